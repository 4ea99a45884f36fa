#pragma once

// The robust active-learning loop: per iteration, train (with the EWC anchor
// from the previous consolidation), select, label, consolidate, pick the
// scheduled attack, craft adversarial counterparts of the new labels, and
// evaluate clean and robust accuracy.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "roal/acquisition.hpp"
#include "roal/attacks.hpp"
#include "roal/core.hpp"
#include "roal/data.hpp"
#include "roal/ewc.hpp"
#include "roal/metrics.hpp"
#include "roal/model.hpp"
#include "roal/train.hpp"

namespace roal::loop {

struct LoopConfig {
    std::size_t iterations = 10;
    std::size_t candidates_per_iter = 200;
    double lambda = 0.5;
    double gamma = 1.0;  // weight of the adversarial-augmentation loss
    bool adversarial_training = true;
    double attack_fraction = 1.0;  // share of each newly labeled batch that gets an adversarial copy
    bool forgetting_probe = true;
    /// false removes consolidation and the penalty from the code path altogether
    bool use_ewc = true;
    std::size_t eval_cap = 0;  // evaluate on at most this many test rows (0 = all)
    acquisition::AcquisitionConfig acquisition;
    attacks::AttackSchedule schedule = attacks::default_schedule();
    nn::OptimizerConfig optimizer;
};

inline void validate(const LoopConfig& c) {
    if (c.iterations < 1) throw ConfigError("loop iterations must be >= 1");
    if (c.candidates_per_iter < 1) throw ConfigError("loop candidates_per_iter must be >= 1");
    if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ConfigError("loop lambda must be >= 0");
    if (!(c.gamma >= 0.0) || !std::isfinite(c.gamma)) throw ConfigError("loop gamma must be >= 0");
    if (!(c.attack_fraction > 0.0 && c.attack_fraction <= 1.0)) throw ConfigError("loop attack_fraction must be in (0, 1]");
    if (c.schedule.sequence.empty()) throw ConfigError("loop attack schedule is empty");
    for (const auto& s : c.schedule.sequence) attacks::validate(s);
    nn::validate(c.optimizer);
}

enum class Stage { train, select, label, consolidate, schedule, craft, evaluate, bookkeeping };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::train: return "train";
        case Stage::select: return "select";
        case Stage::label: return "label";
        case Stage::consolidate: return "consolidate";
        case Stage::schedule: return "schedule";
        case Stage::craft: return "craft";
        case Stage::evaluate: return "evaluate";
        case Stage::bookkeeping: return "bookkeeping";
    }
    return "?";
}

/// Called after each stage completes.
using StageObserver = std::function<void(Stage, std::size_t iteration)>;

struct LoopResult {
    std::vector<IterationRecord> records;
    nn::ModelState model;
    data::LabelPool pool;
    /// Per-iteration parameter vectors after the training stage.
    std::vector<std::vector<double>> trajectory;
};

namespace detail {
enum SeedTag : std::uint64_t { kInit = 1, kTrain, kSelect, kCraftSubset, kCraft, kEvalAttack };
}

inline LoopResult run_roal(data::LabelPool pool, nn::ModelConfig model_config, const LoopConfig& config, std::uint64_t seed,
                           const StageObserver& observe = {}) {
    validate(config);
    const std::size_t T = config.iterations, C = config.candidates_per_iter;
    if (pool.labeled_indices().empty()) throw ConfigError("the initial labeled set is empty");
    if (pool.unlabeled_indices().size() < T * C)
        throw ConfigError("unlabeled pool has " + std::to_string(pool.unlabeled_indices().size()) + " examples, " +
                          std::to_string(T) + " iterations x " + std::to_string(C) + " candidates need " +
                          std::to_string(T * C));
    if (model_config.input_dim != pool.input_dim()) throw ConfigError("model input_dim does not match the dataset");
    if (model_config.num_classes != pool.num_classes()) throw ConfigError("model num_classes does not match the dataset");
    if (pool.test().size() == 0) throw ConfigError("the test set is empty");

    auto notify = [&](Stage s, std::size_t t) {
        if (observe) observe(s, t);
    };
    const data::Dataset test = data::take(pool.test(), config.eval_cap, derive_seed(seed, 0x7E57));
    acquisition::AcquisitionConfig acq = config.acquisition;
    acq.k = C;
    nn::OptimizerConfig opt = config.optimizer;
    opt.clean_adv_weight = config.gamma;

    LoopResult out{{}, nn::init_model(model_config, derive_seed(seed, detail::kInit)), std::move(pool), {}};
    data::LabelPool& P = out.pool;
    nn::ModelState& model = out.model;
    std::optional<ewc::EwcState> anchor;

    for (std::size_t t = 1; t <= T; ++t) {
        IterationRecord rec;
        rec.iteration = t;
        rec.seed = seed;

        // train on L (plus adversarial counterparts), anchored to the last consolidation
        {
            const nn::Batch labeled = P.labeled_batch();
            const nn::Batch* adv = config.adversarial_training ? &P.adversarial_store() : nullptr;
            const ewc::EwcState* penalty = (config.use_ewc && anchor) ? &*anchor : nullptr;
            try {
                auto trained = nn::train(model, labeled, adv, penalty, opt, derive_seed(seed, detail::kTrain, t));
                model = std::move(trained.model);
                rec.train_loss = trained.final_loss;
            } catch (const TrainingError& e) {
                throw TrainingError(std::string("active-learning training diverged: ") + e.what(), t);
            }
            out.trajectory.push_back(model.params);
        }
        notify(Stage::train, t);

        // select C candidates from U
        std::vector<std::size_t> chosen;
        {
            const Matrix pool_inputs = P.unlabeled_inputs();
            const auto positions =
                acquisition::select(acq, model, pool_inputs, P.labeled_batch(), opt, derive_seed(seed, detail::kSelect, t));
            for (std::size_t p : positions) chosen.push_back(P.unlabeled_indices()[p]);
        }
        notify(Stage::select, t);

        const nn::Batch revealed = P.label_oracle(chosen);
        notify(Stage::label, t);

        if (config.use_ewc) {
            anchor = ewc::consolidate(model, P.labeled_batch(), config.lambda);
            notify(Stage::consolidate, t);
        }

        const attacks::AttackSpec& spec = attacks::schedule_attack(config.schedule, t);
        rec.attack = attacks::display_name(spec.family);
        notify(Stage::schedule, t);

        if (config.adversarial_training) {
            const auto m = static_cast<std::size_t>(std::ceil(config.attack_fraction * static_cast<double>(revealed.size())));
            nn::Batch subset = revealed;
            if (m < revealed.size()) {
                Rng rng(derive_seed(seed, detail::kCraftSubset, t));
                auto rows = rng.sample_without_replacement(revealed.size(), m);
                std::sort(rows.begin(), rows.end());
                subset = nn::Batch{revealed.inputs.select_rows(rows), {}};
                for (std::size_t r : rows) subset.labels.push_back(revealed.labels[r]);
            }
            P.append_adversarial(attacks::craft(model, subset, spec, derive_seed(seed, detail::kCraft, t)));
            notify(Stage::craft, t);
        }

        rec.clean_accuracy = metrics::accuracy(model, test);
        rec.robust_accuracy = metrics::robust_accuracy(
            model, metrics::build_adversarial_test(model, test, spec, derive_seed(seed, detail::kEvalAttack, t)));
        if (config.forgetting_probe && t >= 2) {
            const auto& prev = attacks::schedule_attack(config.schedule, t - 1);
            rec.previous_attack_robust_accuracy = metrics::robust_accuracy(
                model, metrics::build_adversarial_test(model, test, prev, derive_seed(seed, detail::kEvalAttack, t - 1)));
        }
        notify(Stage::evaluate, t);

        // the selected candidates already left U inside label_oracle
        rec.labeled_count = P.labeled_indices().size();
        notify(Stage::bookkeeping, t);
        out.records.push_back(std::move(rec));
    }
    return out;
}

/// Comparison run: no EWC, the given acquisition strategy.
inline LoopResult run_baseline(data::LabelPool pool, nn::ModelConfig model_config, LoopConfig config,
                               acquisition::Strategy strategy, std::uint64_t seed, const StageObserver& observe = {}) {
    config.lambda = 0.0;
    config.use_ewc = false;
    config.acquisition.strategy = strategy;
    return run_roal(std::move(pool), std::move(model_config), config, seed, observe);
}

inline LoopResult run_baseline(data::LabelPool pool, nn::ModelConfig model_config, LoopConfig config,
                               std::string_view strategy, std::uint64_t seed, const StageObserver& observe = {}) {
    return run_baseline(std::move(pool), std::move(model_config), std::move(config), acquisition::parse_strategy(strategy),
                        seed, observe);
}

inline std::vector<double> forgetting_probe(std::span<const IterationRecord> records) {
    return metrics::forgetting_probe(records);
}

}  // namespace roal::loop
