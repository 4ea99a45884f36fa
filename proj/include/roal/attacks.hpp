#pragma once

// White-box gradient attacks and the per-iteration attack schedule.
//
// Every attack takes a batch whose labels are the *targets* whose loss is
// ascended (true labels for labeled data, model predictions otherwise) and
// returns adversarial inputs inside the family's epsilon ball, clipped to
// [0, 1]. All randomness comes from the `seed` argument.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "roal/core.hpp"
#include "roal/model.hpp"

namespace roal::attacks {

enum class Family { pgd, pgd_l2, jitter, vni_fgsm, fab };
enum class Norm { inf, two };

inline constexpr Family kAllFamilies[] = {Family::pgd, Family::pgd_l2, Family::jitter, Family::vni_fgsm, Family::fab};

/// Short display name used in logs and CSV output.
inline std::string display_name(Family f) {
    switch (f) {
        case Family::pgd: return "PGD";
        case Family::pgd_l2: return "PGDL2";
        case Family::jitter: return "Jitter";
        case Family::vni_fgsm: return "VNI";
        case Family::fab: return "FAB";
    }
    return "?";
}

/// Config-file identifier.
inline std::string key_name(Family f) {
    switch (f) {
        case Family::pgd: return "pgd";
        case Family::pgd_l2: return "pgd_l2";
        case Family::jitter: return "jitter";
        case Family::vni_fgsm: return "vni_fgsm";
        case Family::fab: return "fab";
    }
    return "?";
}

inline Family parse_family(std::string_view s) {
    if (s == "pgd" || s == "PGD") return Family::pgd;
    if (s == "pgd_l2" || s == "pgdl2" || s == "PGDL2") return Family::pgd_l2;
    if (s == "jitter" || s == "Jitter") return Family::jitter;
    if (s == "vni_fgsm" || s == "vni" || s == "VNI") return Family::vni_fgsm;
    if (s == "fab" || s == "FAB") return Family::fab;
    throw ConfigError("unknown attack family '" + std::string(s) + "'");
}

inline Norm family_norm(Family f) { return (f == Family::pgd_l2 || f == Family::fab) ? Norm::two : Norm::inf; }

/// Tunable per-family knobs and their defaults.
inline const std::map<std::string, double>& default_family_params(Family f) {
    static const std::map<std::string, double> pgd{{"random_start", 1.0}};
    static const std::map<std::string, double> pgd_l2{{"random_start", 0.0}};
    static const std::map<std::string, double> jitter{{"random_start", 1.0}, {"jitter_scale", 10.0}, {"noise_std", 0.1}};
    static const std::map<std::string, double> vni{{"momentum", 1.0}, {"variance_samples", 5.0}, {"variance_radius", 1.5}};
    static const std::map<std::string, double> fab{{"overshoot", 1.05}, {"alpha_max", 0.1}, {"backward_step", 0.9}};
    switch (f) {
        case Family::pgd: return pgd;
        case Family::pgd_l2: return pgd_l2;
        case Family::jitter: return jitter;
        case Family::vni_fgsm: return vni;
        case Family::fab: return fab;
    }
    return pgd;
}

struct AttackSpec {
    Family family = Family::pgd;
    double epsilon = 0.3;
    Norm norm = Norm::inf;
    std::size_t steps = 10;
    double step_size = 0.075;
    std::map<std::string, double> family_params;

    [[nodiscard]] double param(const std::string& name) const {
        if (auto it = family_params.find(name); it != family_params.end()) return it->second;
        return default_family_params(family).at(name);
    }

    /// Equal when every effective setting matches; an explicit parameter equal
    /// to its family default is the same as leaving it unset.
    friend bool operator==(const AttackSpec& a, const AttackSpec& b) {
        if (a.family != b.family || a.epsilon != b.epsilon || a.norm != b.norm || a.steps != b.steps ||
            a.step_size != b.step_size)
            return false;
        for (const auto* s : {&a, &b})
            for (const auto& [k, v] : s->family_params) {
                (void)v;
                if (!default_family_params(a.family).contains(k)) return a.family_params == b.family_params;
            }
        for (const auto& [k, v] : default_family_params(a.family))
            if (a.param(k) != b.param(k)) return false;
        return true;
    }
};

inline void validate(const AttackSpec& spec) {
    if (spec.norm != family_norm(spec.family))
        throw ConfigError("attack " + key_name(spec.family) + " uses the wrong norm order");
    if (!(spec.epsilon > 0.0) || !std::isfinite(spec.epsilon)) throw ConfigError("attack epsilon must be positive");
    if (spec.steps < 1) throw ConfigError("attack steps must be >= 1");
    if (!(spec.step_size > 0.0)) throw ConfigError("attack step_size must be positive");
    const auto& known = default_family_params(spec.family);
    for (const auto& [k, v] : spec.family_params) {
        if (!known.contains(k)) throw ConfigError("attack " + key_name(spec.family) + " has no parameter '" + k + "'");
        if (!std::isfinite(v) || v < 0.0) throw ConfigError("attack parameter '" + k + "' must be finite and >= 0");
    }
}

/// Defaults: eps 0.3 (L-inf) or 1.0 (L2), 10 steps, step size 2.5 * eps / steps.
inline AttackSpec default_spec(Family f, std::optional<double> epsilon = std::nullopt) {
    AttackSpec s;
    s.family = f;
    s.norm = family_norm(f);
    s.epsilon = epsilon.value_or(s.norm == Norm::inf ? 0.3 : 1.0);
    s.steps = 10;
    s.step_size = 2.5 * s.epsilon / static_cast<double>(s.steps);
    return s;
}

// ---- schedule ----

struct AttackSchedule {
    std::vector<AttackSpec> sequence;
};

/// PGD, Jitter, FAB, VNI, PGDL2, cycled.
inline AttackSchedule default_schedule(std::optional<double> epsilon = std::nullopt) {
    return {{default_spec(Family::pgd, epsilon), default_spec(Family::jitter, epsilon), default_spec(Family::fab, epsilon),
             default_spec(Family::vni_fgsm, epsilon), default_spec(Family::pgd_l2, epsilon)}};
}

/// Attack for 1-based iteration t: sequence[(t - 1) mod length].
inline const AttackSpec& schedule_attack(const AttackSchedule& schedule, std::size_t t) {
    if (schedule.sequence.empty()) throw ConfigError("attack schedule is empty");
    require(t >= 1, "schedule_attack: iterations are 1-based");
    return schedule.sequence[(t - 1) % schedule.sequence.size()];
}

// ---- geometry ----

inline void clip_unit(std::span<double> x) {
    for (double& v : x) v = std::clamp(v, 0.0, 1.0);
}

inline void project_linf(std::span<double> x, std::span<const double> x0, double eps) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], x0[i] - eps, x0[i] + eps);
}

inline void project_l2(std::span<double> x, std::span<const double> x0, double eps) {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - x0[i]) * (x[i] - x0[i]);
    const double n = std::sqrt(sq);
    if (n <= eps) return;
    const double s = eps / n;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = x0[i] + (x[i] - x0[i]) * s;
}

/// Project onto the norm ball, then clip to [0,1]. Clipping only moves
/// coordinates toward x0 (which lies in the box), so the ball constraint holds
/// afterwards.
inline void project_and_clip(std::span<double> x, std::span<const double> x0, double eps, Norm norm) {
    if (norm == Norm::inf)
        project_linf(x, x0, eps);
    else
        project_l2(x, x0, eps);
    clip_unit(x);
}

/// Perturbation norm of each row of `adv` relative to `clean`.
inline std::vector<double> perturbation_norms(const Matrix& adv, const Matrix& clean, Norm norm) {
    std::vector<double> out(adv.rows());
    std::vector<double> d(adv.cols());
    for (std::size_t r = 0; r < adv.rows(); ++r) {
        for (std::size_t c = 0; c < adv.cols(); ++c) d[c] = adv(r, c) - clean(r, c);
        out[r] = norm == Norm::inf ? norm_inf(d) : norm2(d);
    }
    return out;
}

namespace detail {

inline void random_start(Matrix& x, const Matrix& x0, const AttackSpec& spec, Rng& rng) {
    const std::size_t d = x.cols();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        if (spec.norm == Norm::inf) {
            for (double& v : row) v += rng.uniform(-spec.epsilon, spec.epsilon);
        } else {
            // uniform in the L2 ball: gaussian direction, radius eps * u^(1/d)
            std::vector<double> dir(d);
            for (double& v : dir) v = rng.normal();
            const double n = norm2(dir);
            const double radius = spec.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
            if (n > 0.0)
                for (std::size_t i = 0; i < d; ++i) row[i] += radius * dir[i] / n;
        }
        project_and_clip(row, x0.row(r), spec.epsilon, spec.norm);
    }
}

/// Sign-gradient L-inf ascent loop shared by PGD and Jitter.
template <class GradFn>
Matrix linf_sign_ascent(const Matrix& x0, const AttackSpec& spec, Rng& rng, GradFn&& grad) {
    Matrix x = x0;
    if (spec.param("random_start") > 0.0) random_start(x, x0, spec, rng);
    for (std::size_t step = 0; step < spec.steps; ++step) {
        const Matrix g = grad(x, step);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto row = x.row(r);
            auto gr = g.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) row[c] += spec.step_size * sign(gr[c]);
            project_and_clip(row, x0.row(r), spec.epsilon, Norm::inf);
        }
    }
    return x;
}

inline void check_family(const AttackSpec& spec, Family expected) {
    validate(spec);
    if (spec.family != expected)
        throw ConfigError("attack spec family " + key_name(spec.family) + " passed to " + key_name(expected));
}

}  // namespace detail

// ---- PGD (L-inf) ----

inline Matrix attack_pgd(const nn::ModelState& model, const nn::Batch& batch, const AttackSpec& spec,
                         std::uint64_t seed) {
    detail::check_family(spec, Family::pgd);
    Rng rng(derive_seed(seed, 0xA1));
    return detail::linf_sign_ascent(batch.inputs, spec, rng, [&](const Matrix& x, std::size_t) {
        return nn::input_grads(model, x, batch.labels);
    });
}

// ---- PGD (L2) ----

inline Matrix attack_pgd_l2(const nn::ModelState& model, const nn::Batch& batch, const AttackSpec& spec,
                            std::uint64_t seed) {
    detail::check_family(spec, Family::pgd_l2);
    Rng rng(derive_seed(seed, 0xA2));
    const Matrix& x0 = batch.inputs;
    Matrix x = x0;
    if (spec.param("random_start") > 0.0) detail::random_start(x, x0, spec, rng);
    for (std::size_t step = 0; step < spec.steps; ++step) {
        const Matrix g = nn::input_grads(model, x, batch.labels);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const double gn = norm2(g.row(r));
            if (gn == 0.0) continue;
            auto row = x.row(r);
            auto gr = g.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) row[c] += spec.step_size * gr[c] / gn;
            project_and_clip(row, x0.row(r), spec.epsilon, Norm::two);
        }
    }
    return x;
}

// ---- Jitter ----

/// Jitter objective for one row: mean over classes of
/// (softmax(scale * z / |z|_2) + noise - onehot(y))^2. Returns the objective
/// and writes dObjective/dz into `dlogits` (zero when z == 0).
inline double jitter_objective(std::span<const double> z, std::size_t y, double scale, std::span<const double> noise,
                               std::span<double> dlogits) {
    const std::size_t C = z.size();
    const double nz = norm2(z);
    std::vector<double> u(C, 0.0), q(C), h(C);
    if (nz > 0.0)
        for (std::size_t c = 0; c < C; ++c) u[c] = z[c] / nz;
    double shift = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) shift = std::max(shift, scale * u[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
        q[c] = std::exp(scale * u[c] - shift);
        sum += q[c];
    }
    double obj = 0.0;
    std::vector<double> dh(C);
    for (std::size_t c = 0; c < C; ++c) {
        q[c] /= sum;
        h[c] = q[c] + noise[c];
        const double diff = h[c] - (c == y ? 1.0 : 0.0);
        obj += diff * diff;
        dh[c] = 2.0 * diff / static_cast<double>(C);
    }
    obj /= static_cast<double>(C);
    if (nz == 0.0) {
        std::fill(dlogits.begin(), dlogits.end(), 0.0);
        return obj;
    }
    const double qdh = dot(q, dh);
    std::vector<double> du(C);
    for (std::size_t c = 0; c < C; ++c) du[c] = scale * q[c] * (dh[c] - qdh);
    const double udu = dot(u, du);
    for (std::size_t c = 0; c < C; ++c) dlogits[c] = (du[c] - u[c] * udu) / nz;
    return obj;
}

inline Matrix attack_jitter(const nn::ModelState& model, const nn::Batch& batch, const AttackSpec& spec,
                            std::uint64_t seed) {
    detail::check_family(spec, Family::jitter);
    Rng rng(derive_seed(seed, 0xA3));
    const double scale = spec.param("jitter_scale");
    const double noise_std = spec.param("noise_std");
    const std::size_t C = model.config.num_classes;
    return detail::linf_sign_ascent(batch.inputs, spec, rng, [&](const Matrix& x, std::size_t) {
        const Matrix z = nn::logits(model, x);
        Matrix dz(z.rows(), C);
        std::vector<double> noise(C, 0.0);
        for (std::size_t r = 0; r < z.rows(); ++r) {
            if (noise_std > 0.0)
                for (double& v : noise) v = noise_std * rng.normal();
            jitter_objective(z.row(r), batch.labels[r], scale, noise, dz.row(r));
        }
        return nn::input_grads_from_logits(model, x, dz);
    });
}

// ---- VNI-FGSM ----

/// Variance-tuned Nesterov iterative FGSM. Momentum accumulates L1-normalized
/// (gradient + variance) terms; the variance term is the mean gradient over
/// `variance_samples` uniform neighbors of radius variance_radius * eps, minus
/// the lookahead gradient.
inline Matrix attack_vni_fgsm(const nn::ModelState& model, const nn::Batch& batch, const AttackSpec& spec,
                              std::uint64_t seed) {
    detail::check_family(spec, Family::vni_fgsm);
    Rng rng(derive_seed(seed, 0xA4));
    const double mu = spec.param("momentum");
    const auto samples = static_cast<std::size_t>(spec.param("variance_samples"));
    const double radius = spec.param("variance_radius") * spec.epsilon;
    const double alpha = spec.step_size;

    const Matrix& x0 = batch.inputs;
    Matrix x = x0;
    Matrix momentum(x.rows(), x.cols(), 0.0);
    Matrix variance(x.rows(), x.cols(), 0.0);
    for (std::size_t step = 0; step < spec.steps; ++step) {
        Matrix lookahead = x;
        for (std::size_t i = 0; i < lookahead.data().size(); ++i) lookahead.data()[i] += alpha * mu * momentum.data()[i];
        const Matrix g_hat = nn::input_grads(model, lookahead, batch.labels);

        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto m = momentum.row(r);
            auto gh = g_hat.row(r);
            auto v = variance.row(r);
            double l1 = 0.0;
            for (std::size_t c = 0; c < m.size(); ++c) l1 += std::abs(gh[c] + v[c]);
            for (std::size_t c = 0; c < m.size(); ++c) m[c] = mu * m[c] + (l1 > 0.0 ? (gh[c] + v[c]) / l1 : 0.0);
        }

        if (samples > 0) {
            Matrix acc(x.rows(), x.cols(), 0.0);
            for (std::size_t k = 0; k < samples; ++k) {
                Matrix neighbor = x;
                for (double& val : neighbor.data()) val += rng.uniform(-radius, radius);
                const Matrix gn = nn::input_grads(model, neighbor, batch.labels);
                for (std::size_t i = 0; i < acc.data().size(); ++i) acc.data()[i] += gn.data()[i];
            }
            for (std::size_t i = 0; i < acc.data().size(); ++i)
                variance.data()[i] = acc.data()[i] / static_cast<double>(samples) - g_hat.data()[i];
        }

        for (std::size_t r = 0; r < x.rows(); ++r) {
            auto row = x.row(r);
            auto m = momentum.row(r);
            for (std::size_t c = 0; c < row.size(); ++c) row[c] += alpha * sign(m[c]);
            project_and_clip(row, x0.row(r), spec.epsilon, Norm::inf);
        }
    }
    return x;
}

// ---- FAB ----

/// First-order model of the boundary between class `y` and its closest
/// competitor j around x:  f(u) ~ f + w.(u - x),  f = z_j - z_y.
struct BoundaryLinearization {
    std::size_t competitor = 0;
    double f = 0.0;
    std::vector<double> w;
};

inline BoundaryLinearization linearize_boundary(const nn::ModelState& model, std::span<const double> x, std::size_t y) {
    const std::size_t C = model.config.num_classes;
    const std::size_t d = x.size();
    Matrix xm(1, d, std::vector<double>(x.begin(), x.end()));
    const Matrix z = nn::logits(model, xm);
    // logit Jacobian: row c is d z_c / dx
    Matrix rep(C, d);
    for (std::size_t c = 0; c < C; ++c) std::copy(x.begin(), x.end(), rep.row(c).begin());
    Matrix onehots(C, C, 0.0);
    for (std::size_t c = 0; c < C; ++c) onehots(c, c) = 1.0;
    const Matrix jac = nn::input_grads_from_logits(model, rep, onehots);

    BoundaryLinearization best;
    double best_dist = std::numeric_limits<double>::infinity();
    std::vector<double> w(d);
    for (std::size_t j = 0; j < C; ++j) {
        if (j == y) continue;
        for (std::size_t i = 0; i < d; ++i) w[i] = jac(j, i) - jac(y, i);
        const double f = z(0, j) - z(0, y);
        const double dist = std::abs(f) / (norm2(w) + 1e-12);
        if (dist < best_dist) {
            best_dist = dist;
            best = {j, f, w};
        }
    }
    return best;
}

/// Minimal-L2 step from `point` onto {u : f + w.(u - x) = 0}; `x` is where the
/// linearization was taken.
inline std::vector<double> hyperplane_step(std::span<const double> point, std::span<const double> x,
                                           const BoundaryLinearization& lin) {
    const double ww = dot(lin.w, lin.w);
    std::vector<double> step(point.size(), 0.0);
    if (ww == 0.0) return step;
    double val = lin.f;
    for (std::size_t i = 0; i < point.size(); ++i) val += lin.w[i] * (point[i] - x[i]);
    for (std::size_t i = 0; i < point.size(); ++i) step[i] = -val * lin.w[i] / ww;
    return step;
}

/// Simplified FAB (single closest-class linearization, no restarts) with an
/// explicit L2 cap. Each step projects both the current iterate and the
/// original point onto the linearized boundary with overshoot, mixes the two
/// biased toward the original, and backs off toward x0 after every success.
inline Matrix attack_fab(const nn::ModelState& model, const nn::Batch& batch, const AttackSpec& spec,
                         std::uint64_t /*seed*/) {
    detail::check_family(spec, Family::fab);
    const double eta = spec.param("overshoot");
    const double alpha_max = spec.param("alpha_max");
    const double beta = spec.param("backward_step");
    const Matrix& x0m = batch.inputs;
    const std::size_t d = x0m.cols();
    Matrix out = x0m;
    const auto initial_pred = nn::predict(model, x0m);

    auto predicted = [&](std::span<const double> v) {
        Matrix m(1, d, std::vector<double>(v.begin(), v.end()));
        return nn::predict(model, m)[0];
    };

    for (std::size_t r = 0; r < x0m.rows(); ++r) {
        const std::size_t y = batch.labels[r];
        if (initial_pred[r] != y) continue;  // already on the wrong side
        auto x0 = x0m.row(r);
        std::vector<double> x(x0.begin(), x0.end());
        std::optional<std::vector<double>> best;
        double best_norm = std::numeric_limits<double>::infinity();
        std::vector<double> last_dir(d, 0.0);

        for (std::size_t step = 0; step < spec.steps; ++step) {
            const auto lin = linearize_boundary(model, x, y);
            if (dot(lin.w, lin.w) == 0.0) break;
            const auto delta = hyperplane_step(x, x, lin);
            const auto delta0 = hyperplane_step(x0, x, lin);
            const double n = norm2(delta), n0 = norm2(delta0);
            const double a = (n + n0) > 0.0 ? std::min(n / (n + n0), alpha_max) : 0.0;
            std::vector<double> next(d);
            for (std::size_t i = 0; i < d; ++i)
                next[i] = (1.0 - a) * (x[i] + eta * delta[i]) + a * (x0[i] + eta * delta0[i]);
            clip_unit(next);
            for (std::size_t i = 0; i < d; ++i) last_dir[i] = next[i] - x0[i];

            if (predicted(next) != y) {
                const double dist = norm2(last_dir);
                if (dist < best_norm) {
                    best_norm = dist;
                    best = next;
                }
                for (std::size_t i = 0; i < d; ++i) x[i] = (1.0 - beta) * x0[i] + beta * next[i];
            } else {
                x = std::move(next);
            }
        }

        auto o = out.row(r);
        if (best) {
            std::copy(best->begin(), best->end(), o.begin());
        } else {
            const double ln = norm2(last_dir);
            for (std::size_t i = 0; i < d; ++i) o[i] = x0[i] + (ln > 0.0 ? spec.epsilon * last_dir[i] / ln : 0.0);
        }
        project_and_clip(o, x0, spec.epsilon, Norm::two);
    }
    return out;
}

// ---- dispatch ----

/// Adversarial copy of `batch`: same row order, same labels.
inline nn::Batch craft(const nn::ModelState& model, const nn::Batch& batch, const AttackSpec& spec, std::uint64_t seed) {
    validate(spec);
    if (batch.inputs.rows() != batch.labels.size()) throw ShapeError("craft: inputs and labels differ in length");
    nn::Batch out{Matrix{}, batch.labels};
    if (batch.size() == 0) {
        out.inputs = batch.inputs;
        return out;
    }
    switch (spec.family) {
        case Family::pgd: out.inputs = attack_pgd(model, batch, spec, seed); break;
        case Family::pgd_l2: out.inputs = attack_pgd_l2(model, batch, spec, seed); break;
        case Family::jitter: out.inputs = attack_jitter(model, batch, spec, seed); break;
        case Family::vni_fgsm: out.inputs = attack_vni_fgsm(model, batch, spec, seed); break;
        case Family::fab: out.inputs = attack_fab(model, batch, spec, seed); break;
        default: throw ConfigError("unknown attack family");
    }
    return out;
}

}  // namespace roal::attacks
