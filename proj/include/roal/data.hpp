#pragma once

// Datasets, the IDX binary format, synthetic blobs, and the labeled /
// unlabeled / test partition the active-learning loop mutates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "roal/core.hpp"
#include "roal/model.hpp"

namespace roal::data {

struct Dataset {
    Matrix inputs;  // values in [0, 1]
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;
    std::string name;

    [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
    [[nodiscard]] std::size_t input_dim() const noexcept { return inputs.cols(); }
    [[nodiscard]] nn::Batch as_batch() const { return {inputs, labels}; }
};

inline void validate(const Dataset& ds) {
    if (ds.inputs.rows() != ds.labels.size()) throw ShapeError("dataset inputs and labels differ in length");
    for (std::size_t y : ds.labels)
        if (y >= ds.num_classes) throw ContractViolation("dataset label out of range");
}

/// Rows `idx` of `ds`, in order.
inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
    Dataset out{ds.inputs.select_rows(idx), {}, ds.num_classes, ds.name};
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.labels.push_back(ds.labels[i]);
    return out;
}

/// Uniform subsample of at most `n` rows, original order preserved. n == 0 keeps everything.
inline Dataset take(const Dataset& ds, std::size_t n, std::uint64_t seed) {
    if (n == 0 || n >= ds.size()) return ds;
    Rng rng(derive_seed(seed, 0x7A4E));
    auto idx = rng.sample_without_replacement(ds.size(), n);
    std::sort(idx.begin(), idx.end());
    return subset(ds, idx);
}

// ---- IDX ----

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at, const char* field) {
    if (b.size() < at + 4) throw FormatError(std::string("truncated IDX header: missing ") + field);
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    b.push_back(static_cast<std::uint8_t>(v >> 24));
    b.push_back(static_cast<std::uint8_t>(v >> 16));
    b.push_back(static_cast<std::uint8_t>(v >> 8));
    b.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace detail

struct IdxImages {
    std::size_t count = 0, rows = 0, cols = 0;
    std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image
};

inline IdxImages decode_idx_images(const std::vector<std::uint8_t>& b) {
    const std::uint32_t magic = detail::read_be32(b, 0, "image magic");
    if (magic != kIdxImageMagic) throw FormatError("bad IDX image magic number");
    IdxImages img;
    img.count = detail::read_be32(b, 4, "image count");
    img.rows = detail::read_be32(b, 8, "image rows");
    img.cols = detail::read_be32(b, 12, "image cols");
    const std::size_t need = img.count * img.rows * img.cols;
    if (b.size() - 16 < need) throw FormatError("truncated IDX image data: expected " + std::to_string(need) + " pixel bytes");
    if (b.size() - 16 > need) throw FormatError("trailing bytes after IDX image data");
    img.pixels.assign(b.begin() + 16, b.end());
    return img;
}

inline std::vector<std::uint8_t> decode_idx_labels(const std::vector<std::uint8_t>& b) {
    const std::uint32_t magic = detail::read_be32(b, 0, "label magic");
    if (magic != kIdxLabelMagic) throw FormatError("bad IDX label magic number");
    const std::size_t n = detail::read_be32(b, 4, "label count");
    if (b.size() - 8 < n) throw FormatError("truncated IDX label data: expected " + std::to_string(n) + " label bytes");
    if (b.size() - 8 > n) throw FormatError("trailing bytes after IDX label data");
    return {b.begin() + 8, b.end()};
}

inline std::vector<std::uint8_t> encode_idx_images(const IdxImages& img) {
    std::vector<std::uint8_t> b;
    b.reserve(16 + img.pixels.size());
    detail::put_be32(b, kIdxImageMagic);
    detail::put_be32(b, static_cast<std::uint32_t>(img.count));
    detail::put_be32(b, static_cast<std::uint32_t>(img.rows));
    detail::put_be32(b, static_cast<std::uint32_t>(img.cols));
    b.insert(b.end(), img.pixels.begin(), img.pixels.end());
    return b;
}

inline std::vector<std::uint8_t> encode_idx_labels(const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> b;
    detail::put_be32(b, kIdxLabelMagic);
    detail::put_be32(b, static_cast<std::uint32_t>(labels.size()));
    b.insert(b.end(), labels.begin(), labels.end());
    return b;
}

/// Loads an IDX image/label file pair. Pixels are flattened row-major and
/// scaled by 1/255; the class count is max(label) + 1 (at least 2).
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::string name = "idx") {
    const IdxImages img = decode_idx_images(detail::read_bytes(images_path));
    const auto labels = decode_idx_labels(detail::read_bytes(labels_path));
    if (labels.size() != img.count)
        throw FormatError("IDX count mismatch: " + std::to_string(img.count) + " images vs " +
                          std::to_string(labels.size()) + " labels");
    const std::size_t dim = img.rows * img.cols;
    Dataset ds{Matrix(img.count, dim), {}, 0, std::move(name)};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) ds.inputs.data()[i] = static_cast<double>(img.pixels[i]) / 255.0;
    ds.labels.assign(labels.begin(), labels.end());
    std::size_t max_label = 0;
    for (std::size_t y : ds.labels) max_label = std::max(max_label, y);
    ds.num_classes = std::max<std::size_t>(2, max_label + 1);
    return ds;
}

/// Writes `ds` as an IDX pair with the given image geometry. Features are
/// quantized to round(255 * v).
inline void write_idx(const Dataset& ds, std::size_t rows, std::size_t cols, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
    if (rows * cols != ds.input_dim()) throw ShapeError("IDX geometry does not match dataset input_dim");
    IdxImages img{ds.size(), rows, cols, {}};
    img.pixels.reserve(ds.inputs.data().size());
    for (double v : ds.inputs.data())
        img.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    std::vector<std::uint8_t> labels;
    for (std::size_t y : ds.labels) {
        if (y > 255) throw ShapeError("IDX labels must fit in one byte");
        labels.push_back(static_cast<std::uint8_t>(y));
    }
    detail::write_bytes(images_path, encode_idx_images(img));
    detail::write_bytes(labels_path, encode_idx_labels(labels));
}

// ---- synthetic blobs ----

/// Gaussian blobs. Class c is centered on the unit vector e_(c mod dim), with a
/// seeded offset for classes beyond `dim`; points get isotropic noise of
/// standard deviation `spread`. Labels cycle 0..C-1 so classes are balanced
/// to within one. Each feature is then min-max rescaled into [0, 1].
inline Dataset make_blobs(std::size_t n, std::size_t num_classes, std::size_t dim, double spread, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("blobs need at least 2 classes");
    if (dim == 0) throw ConfigError("blobs need dim >= 1");
    if (!(spread >= 0.0)) throw ConfigError("blobs spread must be nonnegative");
    Rng rng(derive_seed(seed, 0xB10B));
    Matrix centers(num_classes, dim, 0.0);
    for (std::size_t c = 0; c < num_classes; ++c) {
        centers(c, c % dim) = 1.0;
        if (c >= dim)
            for (std::size_t j = 0; j < dim; ++j) centers(c, j) += 0.5 * rng.normal();
    }
    Dataset ds{Matrix(n, dim), std::vector<std::size_t>(n), num_classes, "blobs"};
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % num_classes;
        ds.labels[i] = c;
        for (std::size_t j = 0; j < dim; ++j) ds.inputs(i, j) = centers(c, j) + spread * rng.normal();
    }
    for (std::size_t j = 0; j < dim; ++j) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t i = 0; i < n; ++i) {
            lo = std::min(lo, ds.inputs(i, j));
            hi = std::max(hi, ds.inputs(i, j));
        }
        const double range = hi - lo;
        for (std::size_t i = 0; i < n; ++i) ds.inputs(i, j) = range > 0.0 ? (ds.inputs(i, j) - lo) / range : 0.0;
    }
    return ds;
}

/// Blobs generated jointly and split, so train and test share one rescaling.
inline std::pair<Dataset, Dataset> make_blobs_split(std::size_t n_train, std::size_t n_test, std::size_t num_classes,
                                                    std::size_t dim, double spread, std::uint64_t seed) {
    Dataset all = make_blobs(n_train + n_test, num_classes, dim, spread, seed);
    std::vector<std::size_t> tr(n_train), te(n_test);
    for (std::size_t i = 0; i < n_train; ++i) tr[i] = i;
    for (std::size_t i = 0; i < n_test; ++i) te[i] = n_train + i;
    return {subset(all, tr), subset(all, te)};
}

// ---- pool ----

/// Labeled set, unlabeled pool, held-out test set, and the accumulated
/// adversarial counterparts. Unlabeled labels are only reachable through
/// label_oracle.
class LabelPool {
public:
    LabelPool(Dataset base, Dataset test, std::vector<std::size_t> labeled, std::vector<std::size_t> unlabeled)
        : base_(std::move(base)), test_(std::move(test)), labeled_(std::move(labeled)), unlabeled_(std::move(unlabeled)),
          adversarial_{Matrix(0, base_.input_dim()), {}} {
        std::sort(unlabeled_.begin(), unlabeled_.end());
        std::vector<std::size_t> all(labeled_);
        all.insert(all.end(), unlabeled_.begin(), unlabeled_.end());
        std::sort(all.begin(), all.end());
        if (std::adjacent_find(all.begin(), all.end()) != all.end())
            throw ContractViolation("labeled and unlabeled sets overlap");
        if (!all.empty() && all.back() >= base_.size()) throw ContractViolation("pool index out of range");
    }

    [[nodiscard]] std::size_t base_size() const noexcept { return base_.size(); }
    [[nodiscard]] std::size_t input_dim() const noexcept { return base_.input_dim(); }
    [[nodiscard]] std::size_t num_classes() const noexcept { return base_.num_classes; }
    [[nodiscard]] const std::string& name() const noexcept { return base_.name; }

    [[nodiscard]] const std::vector<std::size_t>& labeled_indices() const noexcept { return labeled_; }
    [[nodiscard]] const std::vector<std::size_t>& unlabeled_indices() const noexcept { return unlabeled_; }
    [[nodiscard]] const Dataset& test() const noexcept { return test_; }
    [[nodiscard]] const nn::Batch& adversarial_store() const noexcept { return adversarial_; }

    /// (x, y) for every labeled example, in labeling order.
    [[nodiscard]] nn::Batch labeled_batch() const {
        nn::Batch b{base_.inputs.select_rows(labeled_), {}};
        b.labels.reserve(labeled_.size());
        for (std::size_t i : labeled_) b.labels.push_back(base_.labels[i]);
        return b;
    }

    /// Inputs of the unlabeled pool, row k corresponding to unlabeled_indices()[k].
    [[nodiscard]] Matrix unlabeled_inputs() const { return base_.inputs.select_rows(unlabeled_); }

    /// Reveals labels for base indices currently in the unlabeled pool and moves
    /// them to the labeled set.
    nn::Batch label_oracle(std::span<const std::size_t> indices) {
        std::vector<std::size_t> req(indices.begin(), indices.end());
        std::sort(req.begin(), req.end());
        if (std::adjacent_find(req.begin(), req.end()) != req.end())
            throw ContractViolation("label_oracle: duplicate index in request");
        for (std::size_t i : req)
            if (!std::binary_search(unlabeled_.begin(), unlabeled_.end(), i))
                throw ContractViolation("label_oracle: index " + std::to_string(i) + " is not in the unlabeled pool");
        std::vector<std::size_t> rest;
        rest.reserve(unlabeled_.size() - req.size());
        std::set_difference(unlabeled_.begin(), unlabeled_.end(), req.begin(), req.end(), std::back_inserter(rest));
        unlabeled_ = std::move(rest);
        labeled_.insert(labeled_.end(), indices.begin(), indices.end());

        nn::Batch out{base_.inputs.select_rows(indices), {}};
        for (std::size_t i : indices) out.labels.push_back(base_.labels[i]);
        return out;
    }

    void append_adversarial(const nn::Batch& batch) {
        for (std::size_t r = 0; r < batch.size(); ++r) {
            adversarial_.inputs.append_row(batch.inputs.row(r));
            adversarial_.labels.push_back(batch.labels[r]);
        }
    }

private:
    Dataset base_;
    Dataset test_;
    std::vector<std::size_t> labeled_;
    std::vector<std::size_t> unlabeled_;  // kept sorted
    nn::Batch adversarial_;
};

/// Initial partition. When `initial_labeled` divides evenly by the class count
/// and every class has enough members, the draw is class-stratified;
/// otherwise it is uniform.
inline LabelPool split_pool(Dataset train, Dataset test, std::size_t initial_labeled, std::uint64_t seed) {
    validate(train);
    validate(test);
    if (initial_labeled > train.size()) throw ContractViolation("initial_labeled exceeds the training set size");
    if (test.size() > 0 && test.input_dim() != train.input_dim()) throw ShapeError("train and test input_dim differ");
    Rng rng(derive_seed(seed, 0x5B11));
    const std::size_t C = train.num_classes;
    std::vector<std::vector<std::size_t>> by_class(C);
    for (std::size_t i = 0; i < train.size(); ++i) by_class[train.labels[i]].push_back(i);

    std::vector<std::size_t> labeled;
    bool stratified = initial_labeled % C == 0;
    if (stratified)
        for (const auto& members : by_class) stratified = stratified && members.size() >= initial_labeled / C;
    if (stratified) {
        for (const auto& members : by_class)
            for (std::size_t k : rng.sample_without_replacement(members.size(), initial_labeled / C))
                labeled.push_back(members[k]);
    } else {
        labeled = rng.sample_without_replacement(train.size(), initial_labeled);
    }
    std::sort(labeled.begin(), labeled.end());
    std::vector<std::size_t> unlabeled;
    unlabeled.reserve(train.size() - labeled.size());
    for (std::size_t i = 0, k = 0; i < train.size(); ++i) {
        if (k < labeled.size() && labeled[k] == i)
            ++k;
        else
            unlabeled.push_back(i);
    }
    return LabelPool(std::move(train), std::move(test), std::move(labeled), std::move(unlabeled));
}

}  // namespace roal::data
