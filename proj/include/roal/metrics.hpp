#pragma once

// Accuracy, robust accuracy, multi-run aggregation and improvement figures.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "roal/attacks.hpp"
#include "roal/core.hpp"
#include "roal/data.hpp"
#include "roal/model.hpp"

namespace roal {

/// One active-learning iteration's log line.
struct IterationRecord {
    std::size_t iteration = 0;  // 1-based
    std::string attack;
    double clean_accuracy = 0.0;
    double robust_accuracy = 0.0;
    std::size_t labeled_count = 0;
    double train_loss = 0.0;
    std::uint64_t seed = 0;
    /// Robust accuracy of this iteration's model under the previous
    /// iteration's attack; empty at t = 1 or when the probe is disabled.
    std::optional<double> previous_attack_robust_accuracy;

    friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

}  // namespace roal

namespace roal::metrics {

struct ConfusionCounts {
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

    [[nodiscard]] std::size_t total() const noexcept { return tp + tn + fp + fn; }
};

/// (TP + TN) / (TP + TN + FP + FN)
inline double accuracy(const ConfusionCounts& c) {
    require(c.total() > 0, "accuracy: no examples counted");
    return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

/// Full C x C matrix, rows = true class, cols = predicted class.
inline std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const std::size_t> predicted,
                                                              std::span<const std::size_t> truth, std::size_t num_classes) {
    if (predicted.size() != truth.size()) throw ShapeError("confusion_matrix: length mismatch");
    std::vector<std::vector<std::size_t>> m(num_classes, std::vector<std::size_t>(num_classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) ++m.at(truth[i]).at(predicted[i]);
    return m;
}

/// Binarized counts whose total equals the example count. Two classes use the
/// usual class-1-positive table. With more classes each example is scored in
/// the one-vs-rest task of its own true class, where it can only be a TP
/// (correct) or an FN (wrong); accuracy then equals correct / total.
inline ConfusionCounts binarize(const std::vector<std::vector<std::size_t>>& m) {
    ConfusionCounts c;
    const std::size_t C = m.size();
    if (C == 2) {
        c.tn = m[0][0];
        c.fp = m[0][1];
        c.fn = m[1][0];
        c.tp = m[1][1];
        return c;
    }
    for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < C; ++j) (i == j ? c.tp : c.fn) += m[i][j];
    return c;
}

inline ConfusionCounts confusion_counts(const nn::ModelState& model, const data::Dataset& test) {
    const auto pred = nn::predict(model, test.inputs);
    return binarize(confusion_matrix(pred, test.labels, std::max(test.num_classes, model.config.num_classes)));
}

/// Fraction of argmax predictions equal to the true label.
inline double accuracy(const nn::ModelState& model, const data::Dataset& test) {
    require(test.size() > 0, "accuracy: empty test set");
    const auto pred = nn::predict(model, test.inputs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == test.labels[i] ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

/// Adversarial copy of the test set. Attacks target the model's own
/// predictions (true labels are withheld from the attacker); the true labels
/// are carried through unchanged.
inline data::Dataset build_adversarial_test(const nn::ModelState& model, const data::Dataset& test,
                                            const attacks::AttackSpec& spec, std::uint64_t seed) {
    nn::Batch targets{test.inputs, nn::predict(model, test.inputs)};
    nn::Batch adv = attacks::craft(model, targets, spec, seed);
    return data::Dataset{std::move(adv.inputs), test.labels, test.num_classes, test.name + "+" + attacks::key_name(spec.family)};
}

inline double robust_accuracy(const nn::ModelState& model, const data::Dataset& adv_test) { return accuracy(model, adv_test); }

// ---- aggregation ----

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population
};

/// Two-pass mean and population standard deviation.
inline MeanStd mean_std(std::span<const double> xs) {
    require(!xs.empty(), "mean_std: no values");
    double s = 0.0;
    for (double x : xs) s += x;
    const double mean = s / static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

/// Forgetting across each attack switch: for t >= 2,
///   drop_t = robust_acc at t-1 under A_(t-1)  -  robust_acc at t under A_(t-1).
/// Result has length T - 1 (entry k belongs to iteration k + 2).
inline std::vector<double> forgetting_probe(std::span<const IterationRecord> records) {
    std::vector<double> drops;
    for (std::size_t t = 1; t < records.size(); ++t) {
        const auto& prev = records[t - 1];
        const auto& cur = records[t];
        if (!cur.previous_attack_robust_accuracy)
            throw ContractViolation("forgetting_probe: iteration " + std::to_string(cur.iteration) +
                                    " has no previous-attack measurement");
        drops.push_back(prev.robust_accuracy - *cur.previous_attack_robust_accuracy);
    }
    return drops;
}

struct IterationSummary {
    std::size_t iteration = 0;
    std::size_t labeled_count = 0;
    std::string attack;
    MeanStd clean_accuracy, robust_accuracy, train_loss;
    MeanStd forgetting_drop;  // zero at the first iteration, where no switch has happened
};

struct RunSummary {
    std::vector<IterationSummary> iterations;
    std::size_t repetitions = 0;
    std::string fingerprint;
};

/// Per-iteration mean and population std across equally long runs.
inline RunSummary aggregate(std::span<const std::vector<IterationRecord>> runs, std::string fingerprint = {}) {
    require(!runs.empty(), "aggregate: no runs");
    const std::size_t T = runs.front().size();
    for (const auto& r : runs) require(r.size() == T, "aggregate: runs have different lengths");

    std::vector<std::vector<double>> drops;
    bool have_drops = true;
    for (const auto& r : runs)
        for (std::size_t t = 1; t < r.size(); ++t) have_drops = have_drops && r[t].previous_attack_robust_accuracy.has_value();
    if (have_drops)
        for (const auto& r : runs) drops.push_back(forgetting_probe(r));

    RunSummary out;
    out.repetitions = runs.size();
    out.fingerprint = std::move(fingerprint);
    std::vector<double> clean(runs.size()), robust(runs.size()), loss(runs.size()), drop(runs.size());
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t r = 0; r < runs.size(); ++r) {
            clean[r] = runs[r][t].clean_accuracy;
            robust[r] = runs[r][t].robust_accuracy;
            loss[r] = runs[r][t].train_loss;
            drop[r] = (t == 0 || !have_drops) ? 0.0 : drops[r][t - 1];
        }
        const auto& first = runs.front()[t];
        out.iterations.push_back(
            {first.iteration, first.labeled_count, first.attack, mean_std(clean), mean_std(robust), mean_std(loss), mean_std(drop)});
    }
    return out;
}

/// 100 * (ours - baseline) / baseline, rounded to two decimals.
inline double improvement_pct(double ours, double baseline) {
    require(baseline > 0.0, "improvement_pct: baseline must be positive");
    return std::round(10000.0 * (ours - baseline) / baseline) / 100.0;
}

/// Mean of per-dataset improvement percentages, rounded to two decimals.
inline double average_improvement(std::span<const double> percentages) {
    require(!percentages.empty(), "average_improvement: no values");
    double s = 0.0;
    for (double p : percentages) s += p;
    return std::round(100.0 * s / static_cast<double>(percentages.size())) / 100.0;
}

}  // namespace roal::metrics
