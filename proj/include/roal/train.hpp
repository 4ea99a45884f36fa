#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "roal/core.hpp"
#include "roal/ewc.hpp"
#include "roal/model.hpp"

namespace roal::nn {

struct OptimizerConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 0.1;
    double clean_adv_weight = 1.0;  // weight on the adversarial-augmentation loss

    friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

inline void validate(const OptimizerConfig& opt) {
    if (opt.epochs < 1) throw ConfigError("optimizer epochs must be >= 1");
    if (opt.batch_size < 1) throw ConfigError("optimizer batch_size must be >= 1");
    if (!(opt.learning_rate >= 0.0) || !std::isfinite(opt.learning_rate))
        throw ConfigError("optimizer learning_rate must be finite and nonnegative");
    if (!(opt.clean_adv_weight >= 0.0)) throw ConfigError("optimizer clean_adv_weight must be nonnegative");
}

struct TrainResult {
    ModelState model;
    double final_loss = 0.0;  // mean objective over the last epoch's steps
};

namespace detail {

struct LossGrad {
    double loss;
    std::vector<double> grad;
};

inline LossGrad loss_and_grad(const ModelState& model, const Matrix& inputs, std::span<const std::size_t> labels,
                              Rng& mask_rng) {
    std::optional<DropoutMask> mask;
    if (model.config.dropout_rate > 0.0) mask = sample_dropout_mask(model.config, inputs.rows(), mask_rng);
    const DropoutMask* mp = mask ? &*mask : nullptr;
    const auto cache = run_forward(model, inputs, mp);
    Matrix probs = cache.logits;
    softmax_rows(probs);
    const double inv_n = 1.0 / static_cast<double>(labels.size());
    double total = 0.0;
    for (std::size_t r = 0; r < probs.rows(); ++r) total -= std::log(std::max(probs(r, labels[r]), kProbabilityFloor));
    LossGrad out{total * inv_n, {}};
    backprop(model, cache, mp, cross_entropy_upstream(probs, labels, inv_n), &out.grad, nullptr);
    return out;
}

inline std::pair<Matrix, std::vector<std::size_t>> gather(const Batch& batch, std::span<const std::size_t> rows) {
    std::vector<std::size_t> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = batch.labels[rows[i]];
    return {batch.inputs.select_rows(rows), std::move(labels)};
}

}  // namespace detail

/// Mini-batch SGD on  clean CE + gamma * adversarial CE + EWC penalty.
///
/// The adversarial set is shuffled and split into as many chunks as there are
/// clean mini-batches, so every step sees a proportional share of both. The
/// EWC term is applied as an exact proximal step,
///   theta <- (theta - lr*g + lr*lambda*F*theta_star) / (1 + lr*lambda*F),
/// which agrees with a plain gradient step to first order in lr and stays
/// stable for arbitrarily large lambda. With lambda == 0 (or no state) the
/// penalty path is skipped entirely.
inline TrainResult train(const ModelState& model, const Batch& labeled, const Batch* adversarial_augment,
                         const ewc::EwcState* ewc, const OptimizerConfig& opt, std::uint64_t seed) {
    validate(opt);
    require(labeled.size() > 0, "train: labeled set is empty");
    detail::check_labels(model, labeled);
    const bool use_adv = adversarial_augment != nullptr && adversarial_augment->size() > 0 && opt.clean_adv_weight > 0.0;
    if (use_adv) detail::check_labels(model, *adversarial_augment);
    const bool use_ewc = ewc != nullptr && ewc->lambda > 0.0;
    if (use_ewc) ewc::detail::check_dims(*ewc, model.params);

    TrainResult result{model, 0.0};
    auto& theta = result.model.params;
    Rng order_rng(derive_seed(seed, 0x5a1));
    Rng mask_rng(derive_seed(seed, 0x5a2));

    const std::size_t n = labeled.size();
    const std::size_t num_batches = (n + opt.batch_size - 1) / opt.batch_size;
    const std::size_t n_adv = use_adv ? adversarial_augment->size() : 0;
    std::vector<std::size_t> clean_order(n), adv_order(n_adv);
    for (std::size_t i = 0; i < n; ++i) clean_order[i] = i;
    for (std::size_t i = 0; i < n_adv; ++i) adv_order[i] = i;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        order_rng.shuffle(clean_order);
        if (use_adv) order_rng.shuffle(adv_order);
        double epoch_total = 0.0;
        for (std::size_t b = 0; b < num_batches; ++b, ++step) {
            const std::size_t lo = b * opt.batch_size;
            const std::size_t hi = std::min(n, lo + opt.batch_size);
            const auto [xs, ys] = detail::gather(labeled, std::span(clean_order).subspan(lo, hi - lo));
            auto lg = detail::loss_and_grad(result.model, xs, ys, mask_rng);
            double objective = lg.loss;

            if (use_adv) {
                const std::size_t alo = b * n_adv / num_batches;
                const std::size_t ahi = (b + 1) * n_adv / num_batches;
                if (ahi > alo) {
                    const auto [xa, ya] = detail::gather(*adversarial_augment, std::span(adv_order).subspan(alo, ahi - alo));
                    const auto adv = detail::loss_and_grad(result.model, xa, ya, mask_rng);
                    objective += opt.clean_adv_weight * adv.loss;
                    for (std::size_t i = 0; i < lg.grad.size(); ++i) lg.grad[i] += opt.clean_adv_weight * adv.grad[i];
                }
            }
            if (use_ewc) objective += ewc::penalty(*ewc, theta);
            if (!std::isfinite(objective)) throw TrainingError("training objective became non-finite", step);

            const double lr = opt.learning_rate;
            if (use_ewc) {
                for (std::size_t i = 0; i < theta.size(); ++i) {
                    const double k = lr * ewc->lambda * ewc->fisher[i];
                    theta[i] = (theta[i] - lr * lg.grad[i] + k * ewc->theta_star[i]) / (1.0 + k);
                }
            } else {
                for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * lg.grad[i];
            }
            if (!all_finite(theta)) throw TrainingError("parameters became non-finite", step);
            epoch_total += objective;
        }
        result.final_loss = epoch_total / static_cast<double>(num_batches);
    }
    return result;
}

}  // namespace roal::nn
