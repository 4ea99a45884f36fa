#pragma once

// Elastic Weight Consolidation: a quadratic anchor on parameters weighted by
// the diagonal empirical Fisher information of the labeled set.

#include <cstdint>
#include <vector>

#include "roal/core.hpp"
#include "roal/model.hpp"

namespace roal::ewc {

/// Fisher estimation subsamples larger labeled sets down to this many examples.
inline constexpr std::size_t kFisherSampleCap = 2048;

struct EwcState {
    std::vector<double> theta_star;
    std::vector<double> fisher;
    double lambda = 0.0;

    friend bool operator==(const EwcState&, const EwcState&) = default;
};

namespace detail {
inline void check_dims(const EwcState& state, std::span<const double> theta) {
    if (state.theta_star.size() != theta.size() || state.fisher.size() != theta.size())
        throw ShapeError("EWC state has " + std::to_string(state.fisher.size()) + " parameters, theta has " +
                         std::to_string(theta.size()));
}
}  // namespace detail

/// (lambda / 2) * sum_i F_i (theta_i - theta*_i)^2
inline double penalty(const EwcState& state, std::span<const double> theta) {
    detail::check_dims(state, theta);
    double s = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double d = theta[i] - state.theta_star[i];
        s += state.fisher[i] * d * d;
    }
    return 0.5 * state.lambda * s;
}

inline std::vector<double> penalty_grad(const EwcState& state, std::span<const double> theta) {
    detail::check_dims(state, theta);
    std::vector<double> g(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i)
        g[i] = state.lambda * state.fisher[i] * (theta[i] - state.theta_star[i]);
    return g;
}

/// Diagonal empirical Fisher: mean over examples of the squared per-example
/// cross-entropy gradient at the true label. Sets larger than `cap` are
/// uniformly subsampled with `seed`.
inline std::vector<double> estimate_fisher(const nn::ModelState& model, const nn::Batch& labeled,
                                           std::size_t cap = kFisherSampleCap, std::uint64_t seed = 0) {
    require(labeled.size() > 0, "estimate_fisher: empty labeled set");
    std::vector<std::size_t> rows;
    if (labeled.size() > cap) {
        Rng rng(derive_seed(seed, 0xF15));
        rows = rng.sample_without_replacement(labeled.size(), cap);
        std::sort(rows.begin(), rows.end());
    } else {
        rows.resize(labeled.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    }
    std::vector<double> fisher(model.params.size(), 0.0);
    nn::Batch single{Matrix(1, labeled.inputs.cols()), {0}};
    for (std::size_t r : rows) {
        auto src = labeled.inputs.row(r);
        std::copy(src.begin(), src.end(), single.inputs.row(0).begin());
        single.labels[0] = labeled.labels[r];
        const auto g = nn::param_grad(model, single);
        for (std::size_t i = 0; i < g.size(); ++i) fisher[i] += g[i] * g[i];
    }
    const double n = static_cast<double>(rows.size());
    for (double& f : fisher) f /= n;
    return fisher;
}

/// Snapshot the current parameters as the new anchor. Replaces, never accumulates.
inline EwcState consolidate(const nn::ModelState& model, const nn::Batch& labeled, double lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("EWC lambda must be nonnegative");
    return EwcState{model.params, estimate_fisher(model, labeled), lambda};
}

}  // namespace roal::ewc
