#pragma once

// Fully connected ReLU classifier over a flat parameter vector, with exact
// backpropagation to both parameters and inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "roal/core.hpp"

namespace roal::nn {

enum class Activation { relu };

struct ModelConfig {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;  // empty: multinomial logistic regression
    std::size_t num_classes = 2;
    double dropout_rate = 0.0;
    Activation activation = Activation::relu;
    double weight_init_scale = 1.0;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Batch {
    Matrix inputs;
    std::vector<std::size_t> labels;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
};

/// Offsets of one dense layer inside the flat parameter vector. The weight
/// block is fan_in x fan_out row-major, followed by fan_out biases.
struct LayerSlice {
    std::size_t fan_in;
    std::size_t fan_out;
    std::size_t weight_offset;
    std::size_t bias_offset;
};

inline void validate(const ModelConfig& config) {
    if (config.input_dim == 0) throw ConfigError("model input_dim must be positive");
    if (config.num_classes < 2) throw ConfigError("model num_classes must be at least 2");
    for (std::size_t h : config.hidden_dims)
        if (h == 0) throw ConfigError("model hidden_dims entries must be positive");
    if (!(config.dropout_rate >= 0.0 && config.dropout_rate < 1.0))
        throw ConfigError("model dropout_rate must be in [0, 1)");
    if (!(config.weight_init_scale > 0.0)) throw ConfigError("model weight_init_scale must be positive");
}

inline std::vector<LayerSlice> layer_layout(const ModelConfig& config) {
    std::vector<LayerSlice> layout;
    std::size_t offset = 0;
    std::size_t fan_in = config.input_dim;
    auto push = [&](std::size_t fan_out) {
        layout.push_back({fan_in, fan_out, offset, offset + fan_in * fan_out});
        offset += fan_in * fan_out + fan_out;
        fan_in = fan_out;
    };
    for (std::size_t h : config.hidden_dims) push(h);
    push(config.num_classes);
    return layout;
}

inline std::size_t param_count(const ModelConfig& config) {
    const auto layout = layer_layout(config);
    return layout.back().bias_offset + layout.back().fan_out;
}

/// Immutable-by-convention model value; training returns a new one.
struct ModelState {
    ModelConfig config;
    std::vector<double> params;

    [[nodiscard]] std::size_t param_count() const noexcept { return params.size(); }

    friend bool operator==(const ModelState&, const ModelState&) = default;
};

/// Weights uniform in [-s, s], s = weight_init_scale / sqrt(fan_in); biases zero.
inline ModelState init_model(const ModelConfig& config, std::uint64_t seed) {
    validate(config);
    ModelState model{config, std::vector<double>(param_count(config), 0.0)};
    Rng rng(derive_seed(seed, 0x1417));
    for (const auto& layer : layer_layout(config)) {
        const double s = config.weight_init_scale / std::sqrt(static_cast<double>(layer.fan_in));
        for (std::size_t i = 0; i < layer.fan_in * layer.fan_out; ++i)
            model.params[layer.weight_offset + i] = rng.uniform(-s, s);
    }
    return model;
}

/// Per-hidden-layer multipliers (0 or 1/keep), one matrix per hidden layer
/// shaped rows x width.
struct DropoutMask {
    std::vector<Matrix> layers;
};

inline DropoutMask sample_dropout_mask(const ModelConfig& config, std::size_t rows, Rng& rng) {
    DropoutMask mask;
    const double keep = 1.0 - config.dropout_rate;
    for (std::size_t h : config.hidden_dims) {
        Matrix m(rows, h, 1.0);
        if (config.dropout_rate > 0.0)
            for (double& v : m.data()) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
        mask.layers.push_back(std::move(m));
    }
    return mask;
}

namespace detail {

/// Forward passes made on this thread; instrumentation for tests.
inline thread_local std::uint64_t forward_calls = 0;

struct ForwardCache {
    std::vector<Matrix> activations;  // [0] is the input; [l] is hidden layer l after ReLU and dropout
    std::vector<Matrix> pre;          // hidden pre-activations
    Matrix logits;
};

inline Matrix dense(std::span<const double> params, const LayerSlice& layer, const Matrix& in) {
    Matrix out(in.rows(), layer.fan_out);
    const double* w = params.data() + layer.weight_offset;
    const double* b = params.data() + layer.bias_offset;
    for (std::size_t r = 0; r < in.rows(); ++r) {
        auto o = out.row(r);
        std::copy(b, b + layer.fan_out, o.begin());
        auto x = in.row(r);
        for (std::size_t i = 0; i < layer.fan_in; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            const double* wi = w + i * layer.fan_out;
            for (std::size_t j = 0; j < layer.fan_out; ++j) o[j] += xi * wi[j];
        }
    }
    return out;
}

inline ForwardCache run_forward(const ModelState& model, const Matrix& inputs, const DropoutMask* mask) {
    if (inputs.cols() != model.config.input_dim)
        throw ShapeError("input has " + std::to_string(inputs.cols()) + " columns, model expects " +
                         std::to_string(model.config.input_dim));
    ++forward_calls;
    const auto layout = layer_layout(model.config);
    ForwardCache cache;
    cache.activations.push_back(inputs);
    for (std::size_t l = 0; l + 1 < layout.size(); ++l) {
        Matrix z = dense(model.params, layout[l], cache.activations.back());
        Matrix a = z;
        for (double& v : a.data()) v = v > 0.0 ? v : 0.0;
        if (mask != nullptr) {
            const Matrix& m = mask->layers.at(l);
            if (m.rows() != a.rows() || m.cols() != a.cols()) throw ShapeError("dropout mask shape mismatch");
            for (std::size_t i = 0; i < a.data().size(); ++i) a.data()[i] *= m.data()[i];
        }
        cache.pre.push_back(std::move(z));
        cache.activations.push_back(std::move(a));
    }
    cache.logits = dense(model.params, layout.back(), cache.activations.back());
    return cache;
}

/// Reverse pass. `upstream` is dObjective/dlogits per row. Parameter
/// gradients are summed over rows; input gradients are per row. Either
/// output may be null.
inline void backprop(const ModelState& model, const ForwardCache& cache, const DropoutMask* mask,
                     const Matrix& upstream, std::vector<double>* param_grad, Matrix* input_grad) {
    const auto layout = layer_layout(model.config);
    if (param_grad != nullptr) param_grad->assign(model.params.size(), 0.0);
    Matrix delta = upstream;
    for (std::size_t l = layout.size(); l-- > 0;) {
        const LayerSlice& layer = layout[l];
        const Matrix& in = cache.activations[l];
        const double* w = model.params.data() + layer.weight_offset;
        if (param_grad != nullptr) {
            double* gw = param_grad->data() + layer.weight_offset;
            double* gb = param_grad->data() + layer.bias_offset;
            for (std::size_t r = 0; r < in.rows(); ++r) {
                auto d = delta.row(r);
                auto x = in.row(r);
                for (std::size_t i = 0; i < layer.fan_in; ++i) {
                    const double xi = x[i];
                    if (xi == 0.0) continue;
                    double* gwi = gw + i * layer.fan_out;
                    for (std::size_t j = 0; j < layer.fan_out; ++j) gwi[j] += xi * d[j];
                }
                for (std::size_t j = 0; j < layer.fan_out; ++j) gb[j] += d[j];
            }
        }
        if (l == 0 && input_grad == nullptr) break;
        Matrix prev(in.rows(), layer.fan_in);
        for (std::size_t r = 0; r < in.rows(); ++r) {
            auto d = delta.row(r);
            auto p = prev.row(r);
            for (std::size_t i = 0; i < layer.fan_in; ++i) {
                const double* wi = w + i * layer.fan_out;
                double s = 0.0;
                for (std::size_t j = 0; j < layer.fan_out; ++j) s += wi[j] * d[j];
                p[i] = s;
            }
        }
        if (l > 0) {
            const Matrix& z = cache.pre[l - 1];
            for (std::size_t i = 0; i < prev.data().size(); ++i) {
                double g = z.data()[i] > 0.0 ? prev.data()[i] : 0.0;
                if (mask != nullptr) g *= mask->layers[l - 1].data()[i];
                prev.data()[i] = g;
            }
        } else {
            *input_grad = std::move(prev);
            break;
        }
        delta = std::move(prev);
    }
}

inline void softmax_rows(Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        const double shift = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double& v : row) {
            v = std::exp(v - shift);
            sum += v;
        }
        for (double& v : row) v /= sum;
    }
}

/// d(mean CE)/dlogits scaled by `scale` per row: scale * (p - onehot(y)).
inline Matrix cross_entropy_upstream(const Matrix& probs, std::span<const std::size_t> labels, double scale) {
    Matrix g = probs;
    for (std::size_t r = 0; r < g.rows(); ++r) {
        g(r, labels[r]) -= 1.0;
        for (double& v : g.row(r)) v *= scale;
    }
    return g;
}

inline void check_labels(const ModelState& model, const Batch& batch) {
    if (batch.inputs.rows() != batch.labels.size()) throw ShapeError("batch inputs and labels differ in length");
    for (std::size_t y : batch.labels)
        if (y >= model.config.num_classes) throw ContractViolation("label out of range");
}

}  // namespace detail

inline constexpr double kProbabilityFloor = 1e-12;

/// Raw class scores before softmax.
inline Matrix logits(const ModelState& model, const Matrix& inputs, const DropoutMask* mask = nullptr) {
    return detail::run_forward(model, inputs, mask).logits;
}

/// Softmax class probabilities, one row per input. Without a mask, dropout is off.
inline Matrix forward(const ModelState& model, const Matrix& inputs, const DropoutMask* mask = nullptr) {
    Matrix p = logits(model, inputs, mask);
    detail::softmax_rows(p);
    return p;
}

inline std::vector<std::size_t> predict(const ModelState& model, const Matrix& inputs) {
    const Matrix z = logits(model, inputs);
    std::vector<std::size_t> out(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        auto row = z.row(r);
        out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

/// Mean cross-entropy, with probabilities floored at 1e-12 inside the log.
inline double loss(const ModelState& model, const Batch& batch) {
    require(batch.size() > 0, "loss: empty batch");
    detail::check_labels(model, batch);
    const Matrix p = forward(model, batch.inputs);
    double total = 0.0;
    for (std::size_t r = 0; r < p.rows(); ++r) total -= std::log(std::max(p(r, batch.labels[r]), kProbabilityFloor));
    return total / static_cast<double>(batch.size());
}

/// Gradient of `loss` with respect to the flat parameter vector.
inline std::vector<double> param_grad(const ModelState& model, const Batch& batch, const DropoutMask* mask = nullptr) {
    require(batch.size() > 0, "param_grad: empty batch");
    detail::check_labels(model, batch);
    const auto cache = detail::run_forward(model, batch.inputs, mask);
    Matrix probs = cache.logits;
    detail::softmax_rows(probs);
    const Matrix up = detail::cross_entropy_upstream(probs, batch.labels, 1.0 / static_cast<double>(batch.size()));
    std::vector<double> g;
    detail::backprop(model, cache, mask, up, &g, nullptr);
    return g;
}

/// Per-row gradients of each row's own cross-entropy with respect to its input.
inline Matrix input_grads(const ModelState& model, const Matrix& inputs, std::span<const std::size_t> labels) {
    if (inputs.rows() != labels.size()) throw ShapeError("input_grads: inputs and labels differ in length");
    const auto cache = detail::run_forward(model, inputs, nullptr);
    Matrix probs = cache.logits;
    detail::softmax_rows(probs);
    const Matrix up = detail::cross_entropy_upstream(probs, labels, 1.0);
    Matrix g;
    detail::backprop(model, cache, nullptr, up, nullptr, &g);
    return g;
}

inline std::vector<double> input_grad(const ModelState& model, std::span<const double> input, std::size_t label) {
    Matrix x(1, input.size(), std::vector<double>(input.begin(), input.end()));
    const std::size_t labels[] = {label};
    return input_grads(model, x, labels).data();
}

/// Backpropagates an arbitrary per-row logit gradient to the inputs. Used by
/// attacks whose objective is not cross-entropy.
inline Matrix input_grads_from_logits(const ModelState& model, const Matrix& inputs, const Matrix& dlogits) {
    const auto cache = detail::run_forward(model, inputs, nullptr);
    if (dlogits.rows() != inputs.rows() || dlogits.cols() != model.config.num_classes)
        throw ShapeError("logit gradient shape mismatch");
    Matrix g;
    detail::backprop(model, cache, nullptr, dlogits, nullptr, &g);
    return g;
}

/// `samples` stochastic passes, each with an independently drawn dropout mask.
inline std::vector<Matrix> mc_forward(const ModelState& model, const Matrix& inputs, std::size_t samples,
                                      std::uint64_t seed) {
    require(samples >= 1, "mc_forward: samples must be >= 1");
    std::vector<Matrix> out;
    out.reserve(samples);
    if (model.config.dropout_rate == 0.0) {
        const Matrix p = forward(model, inputs);
        out.assign(samples, p);
        return out;
    }
    Rng rng(derive_seed(seed, 0x3c));
    for (std::size_t s = 0; s < samples; ++s) {
        const DropoutMask mask = sample_dropout_mask(model.config, inputs.rows(), rng);
        out.push_back(forward(model, inputs, &mask));
    }
    return out;
}

}  // namespace roal::nn
