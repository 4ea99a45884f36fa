#pragma once

// Candidate selection over the unlabeled pool. All selectors return
// positions into the pool matrix they were given (not base dataset indices).
// Ties always go to the lower index.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "roal/core.hpp"
#include "roal/model.hpp"
#include "roal/train.hpp"

namespace roal::acquisition {

enum class Strategy { entropy, random, margin, entropy_dropout, bald, expected_error_reduction, cluster, representative };

inline constexpr Strategy kAllStrategies[] = {Strategy::entropy,         Strategy::random,
                                              Strategy::margin,          Strategy::entropy_dropout,
                                              Strategy::bald,            Strategy::expected_error_reduction,
                                              Strategy::cluster,         Strategy::representative};

inline std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::entropy: return "entropy";
        case Strategy::random: return "random";
        case Strategy::margin: return "margin";
        case Strategy::entropy_dropout: return "entropy_dropout";
        case Strategy::bald: return "bald";
        case Strategy::expected_error_reduction: return "expected_error_reduction";
        case Strategy::cluster: return "cluster";
        case Strategy::representative: return "representative";
    }
    return "?";
}

inline Strategy parse_strategy(std::string_view s) {
    for (Strategy st : kAllStrategies)
        if (strategy_name(st) == s) return st;
    if (s == "uncertainty") return Strategy::entropy;
    if (s == "eer") return Strategy::expected_error_reduction;
    if (s == "cluster_based") return Strategy::cluster;
    throw ConfigError("unknown acquisition strategy '" + std::string(s) + "'");
}

struct AcquisitionConfig {
    Strategy strategy = Strategy::entropy;
    std::size_t k = 1;
    std::size_t mc_samples = 10;
    std::size_t eer_pool_cap = 20;
    std::size_t num_clusters = 10;

    friend bool operator==(const AcquisitionConfig&, const AcquisitionConfig&) = default;
};

// ---- scores ----

inline double entropy(std::span<const double> p) {
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

inline std::vector<double> entropy_of_rows(const Matrix& probs) {
    std::vector<double> out(probs.rows());
    for (std::size_t r = 0; r < probs.rows(); ++r) out[r] = entropy(probs.row(r));
    return out;
}

/// Predictive entropy per row, in [0, ln C].
inline std::vector<double> entropy_scores(const nn::ModelState& model, const Matrix& pool) {
    require(pool.rows() > 0, "entropy_scores: empty pool");
    return entropy_of_rows(nn::forward(model, pool));
}

/// -(p_top1 - p_top2): 0 on the boundary, -1 for a one-hot prediction.
inline std::vector<double> margin_scores(const nn::ModelState& model, const Matrix& pool) {
    const Matrix p = nn::forward(model, pool);
    std::vector<double> out(p.rows());
    for (std::size_t r = 0; r < p.rows(); ++r) {
        double top1 = -1.0, top2 = -1.0;
        for (double v : p.row(r)) {
            if (v > top1) {
                top2 = top1;
                top1 = v;
            } else if (v > top2) {
                top2 = v;
            }
        }
        out[r] = -(top1 - top2);
    }
    return out;
}

namespace detail {
inline Matrix mean_of(const std::vector<Matrix>& samples) {
    Matrix mean(samples.front().rows(), samples.front().cols(), 0.0);
    for (const auto& s : samples)
        for (std::size_t i = 0; i < mean.data().size(); ++i) mean.data()[i] += s.data()[i];
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (double& v : mean.data()) v *= inv;
    return mean;
}
}  // namespace detail

/// Entropy of the MC-dropout mean prediction. Bitwise equal to
/// entropy_scores when dropout is off.
inline std::vector<double> entropy_dropout_scores(const nn::ModelState& model, const Matrix& pool,
                                                  std::size_t mc_samples, std::uint64_t seed) {
    if (model.config.dropout_rate == 0.0) return entropy_scores(model, pool);
    return entropy_of_rows(detail::mean_of(nn::mc_forward(model, pool, mc_samples, seed)));
}

/// Mutual information H(mean p) - mean H(p) per row over stochastic
/// probability samples, clamped at 0.
inline std::vector<double> mutual_information(const std::vector<Matrix>& samples) {
    require(!samples.empty(), "mutual_information: no samples");
    const auto total = entropy_of_rows(detail::mean_of(samples));
    std::vector<double> expected(total.size(), 0.0);
    for (const auto& s : samples) {
        const auto h = entropy_of_rows(s);
        for (std::size_t r = 0; r < h.size(); ++r) expected[r] += h[r];
    }
    std::vector<double> out(total.size());
    for (std::size_t r = 0; r < out.size(); ++r)
        out[r] = std::max(0.0, total[r] - expected[r] / static_cast<double>(samples.size()));
    return out;
}

/// BALD via MC dropout.
inline std::vector<double> bald_scores(const nn::ModelState& model, const Matrix& pool, std::size_t mc_samples,
                                       std::uint64_t seed) {
    return mutual_information(nn::mc_forward(model, pool, mc_samples, seed));
}

// ---- selectors ----

/// Indices of the k largest scores, in descending score order.
inline std::vector<std::size_t> select_top_k(std::span<const double> scores, std::size_t k) {
    require(k <= scores.size(), "select_top_k: k exceeds the number of scores");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
    idx.resize(k);
    return idx;
}

inline std::vector<std::size_t> select_random(std::size_t pool_size, std::size_t k, std::uint64_t seed) {
    require(k <= pool_size, "select_random: k exceeds pool size");
    Rng rng(derive_seed(seed, 0x2A4D));
    return rng.sample_without_replacement(pool_size, k);
}

/// Greedy expected error reduction. For up to `eer_pool_cap` uniformly drawn
/// candidates (at least k), and each label c weighted by p(c|x), a copy of the
/// model is trained for one epoch on labeled + {(x, c)}; the candidate's score
/// is the expected total entropy over the rest of the pool. The k lowest
/// scores win.
inline std::vector<std::size_t> select_expected_error_reduction(const nn::ModelState& model, const Matrix& pool,
                                                                const nn::Batch& labeled, std::size_t k,
                                                                std::size_t eer_pool_cap, nn::OptimizerConfig opt,
                                                                std::uint64_t seed) {
    require(pool.rows() > 0, "expected_error_reduction: empty pool");
    require(k <= pool.rows(), "expected_error_reduction: k exceeds pool size");
    const std::size_t n_candidates = std::min(pool.rows(), std::max(k, eer_pool_cap));
    std::vector<std::size_t> candidates;
    if (n_candidates == pool.rows()) {
        candidates.resize(pool.rows());
        std::iota(candidates.begin(), candidates.end(), 0);
    } else {
        Rng rng(derive_seed(seed, 0xEE1));
        candidates = rng.sample_without_replacement(pool.rows(), n_candidates);
        std::sort(candidates.begin(), candidates.end());
    }
    opt.epochs = 1;
    const std::uint64_t train_seed = derive_seed(seed, 0xEE2);
    const Matrix probs = nn::forward(model, pool);

    std::vector<double> neg_risk(candidates.size());
    for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
        const std::size_t cand = candidates[ci];
        std::vector<std::size_t> rest;
        rest.reserve(pool.rows() - 1);
        for (std::size_t r = 0; r < pool.rows(); ++r)
            if (r != cand) rest.push_back(r);
        const Matrix rest_inputs = pool.select_rows(rest);

        nn::Batch augmented = labeled;
        augmented.inputs.append_row(pool.row(cand));
        augmented.labels.push_back(0);
        double risk = 0.0;
        for (std::size_t c = 0; c < model.config.num_classes; ++c) {
            const double pc = probs(cand, c);
            if (pc == 0.0) continue;
            augmented.labels.back() = c;
            const auto retrained = nn::train(model, augmented, nullptr, nullptr, opt, train_seed).model;
            double total = 0.0;
            if (!rest.empty())
                for (double h : entropy_scores(retrained, rest_inputs)) total += h;
            risk += pc * total;
        }
        neg_risk[ci] = -risk;
    }
    std::vector<std::size_t> out;
    for (std::size_t ci : select_top_k(neg_risk, k)) out.push_back(candidates[ci]);
    return out;
}

// ---- clustering ----

struct Clustering {
    Matrix centroids;
    std::vector<std::size_t> assignment;
};

/// Lloyd's k-means with seeded Forgy initialization (distinct random points).
inline Clustering kmeans(const Matrix& points, std::size_t num_clusters, std::uint64_t seed, std::size_t max_iter = 50) {
    require(points.rows() > 0, "kmeans: no points");
    require(num_clusters >= 1, "kmeans: need at least one cluster");
    const std::size_t K = std::min(num_clusters, points.rows());
    Rng rng(derive_seed(seed, 0xC1));
    auto init = rng.sample_without_replacement(points.rows(), K);
    std::sort(init.begin(), init.end());
    Clustering cl{points.select_rows(init), std::vector<std::size_t>(points.rows(), K)};

    for (std::size_t iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        for (std::size_t r = 0; r < points.rows(); ++r) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < K; ++c) {
                double d = 0.0;
                for (std::size_t j = 0; j < points.cols(); ++j) {
                    const double diff = points(r, j) - cl.centroids(c, j);
                    d += diff * diff;
                }
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (cl.assignment[r] != best) {
                cl.assignment[r] = best;
                changed = true;
            }
        }
        if (!changed) break;
        Matrix sums(K, points.cols(), 0.0);
        std::vector<std::size_t> counts(K, 0);
        for (std::size_t r = 0; r < points.rows(); ++r) {
            ++counts[cl.assignment[r]];
            for (std::size_t j = 0; j < points.cols(); ++j) sums(cl.assignment[r], j) += points(r, j);
        }
        for (std::size_t c = 0; c < K; ++c)
            if (counts[c] > 0)  // empty clusters keep their centroid
                for (std::size_t j = 0; j < points.cols(); ++j) cl.centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
    return cl;
}

namespace detail {

/// Visits clusters largest-first, taking each cluster's next-best member per
/// round, until k picks. `better(a, b)` orders members within a cluster.
template <class Better>
std::vector<std::size_t> round_robin(const Clustering& cl, std::size_t k, Better&& better) {
    const std::size_t K = cl.centroids.rows();
    std::vector<std::vector<std::size_t>> members(K);
    for (std::size_t r = 0; r < cl.assignment.size(); ++r) members[cl.assignment[r]].push_back(r);
    for (auto& m : members) std::sort(m.begin(), m.end(), better);
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return members[a].size() > members[b].size(); });

    std::vector<std::size_t> picks;
    for (std::size_t round = 0; picks.size() < k; ++round) {
        bool any = false;
        for (std::size_t c : order) {
            if (round < members[c].size()) {
                picks.push_back(members[c][round]);
                any = true;
                if (picks.size() == k) break;
            }
        }
        if (!any) break;
    }
    return picks;
}

}  // namespace detail

/// k-means on raw inputs; the highest-entropy member of each cluster, clusters
/// visited round-robin by descending size.
inline std::vector<std::size_t> select_cluster_based(const nn::ModelState& model, const Matrix& pool, std::size_t k,
                                                     std::size_t num_clusters, std::uint64_t seed) {
    require(k <= pool.rows(), "select_cluster_based: k exceeds pool size");
    if (k == 0) return {};
    const auto cl = kmeans(pool, num_clusters, seed);
    const auto h = entropy_scores(model, pool);
    return detail::round_robin(cl, k, [&](std::size_t a, std::size_t b) { return h[a] > h[b] || (h[a] == h[b] && a < b); });
}

/// k-means on raw inputs; the member nearest each centroid, same visiting order.
inline std::vector<std::size_t> select_representative(const Matrix& pool, std::size_t k, std::size_t num_clusters,
                                                      std::uint64_t seed) {
    require(k <= pool.rows(), "select_representative: k exceeds pool size");
    if (k == 0) return {};
    const auto cl = kmeans(pool, num_clusters, seed);
    std::vector<double> dist(pool.rows());
    for (std::size_t r = 0; r < pool.rows(); ++r) {
        double d = 0.0;
        for (std::size_t j = 0; j < pool.cols(); ++j) {
            const double diff = pool(r, j) - cl.centroids(cl.assignment[r], j);
            d += diff * diff;
        }
        dist[r] = d;
    }
    return detail::round_robin(cl, k, [&](std::size_t a, std::size_t b) {
        return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
    });
}

inline std::vector<std::size_t> select_representative(const nn::ModelState& /*model*/, const Matrix& pool, std::size_t k,
                                                      std::size_t num_clusters, std::uint64_t seed) {
    return select_representative(pool, k, num_clusters, seed);
}

/// Whether a strategy reads model predictions at all.
inline bool uses_model(Strategy s) { return s != Strategy::random && s != Strategy::representative; }

/// Dispatches on config.strategy and returns config.k distinct pool positions.
inline std::vector<std::size_t> select(const AcquisitionConfig& config, const nn::ModelState& model, const Matrix& pool,
                                       const nn::Batch& labeled, const nn::OptimizerConfig& opt, std::uint64_t seed) {
    require(config.k >= 1, "acquisition k must be >= 1");
    require(config.k <= pool.rows(), "acquisition k exceeds the unlabeled pool size");
    switch (config.strategy) {
        case Strategy::entropy: return select_top_k(entropy_scores(model, pool), config.k);
        case Strategy::random: return select_random(pool.rows(), config.k, seed);
        case Strategy::margin: return select_top_k(margin_scores(model, pool), config.k);
        case Strategy::entropy_dropout:
            return select_top_k(entropy_dropout_scores(model, pool, config.mc_samples, seed), config.k);
        case Strategy::bald: return select_top_k(bald_scores(model, pool, config.mc_samples, seed), config.k);
        case Strategy::expected_error_reduction:
            return select_expected_error_reduction(model, pool, labeled, config.k, config.eer_pool_cap, opt, seed);
        case Strategy::cluster: return select_cluster_based(model, pool, config.k, config.num_clusters, seed);
        case Strategy::representative: return select_representative(pool, config.k, config.num_clusters, seed);
    }
    throw ConfigError("unknown acquisition strategy");
}

}  // namespace roal::acquisition
