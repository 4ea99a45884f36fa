#pragma once

// Experiment runner: INI-style configuration, dataset wiring, multi-seed
// execution and result files (per-run CSV, aggregate CSV, JSON manifest,
// plot-ready long-format CSVs, ablation tables).

#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "roal/acquisition.hpp"
#include "roal/attacks.hpp"
#include "roal/core.hpp"
#include "roal/data.hpp"
#include "roal/loop.hpp"
#include "roal/metrics.hpp"
#include "roal/model.hpp"

namespace roal::experiment {

/// Environment variable that overrides the configured output directory.
inline constexpr const char* kOutputDirEnv = "ROAL_OUTPUT_DIR";

struct DatasetSection {
    std::string name = "blobs";  // blobs | mnist | fashion_mnist | idx
    std::string train_images, train_labels, test_images, test_labels;
    std::size_t n_train = 2000;
    std::size_t n_test = 1000;
    std::size_t num_classes = 4;
    std::size_t dim = 16;
    double spread = 0.25;
    std::uint64_t seed = 0;  // dataset generation / subsampling, shared by all repetitions
    std::size_t initial_labeled = 100;
    std::size_t max_train = 0;  // 0 = all
    std::size_t max_test = 0;

    friend bool operator==(const DatasetSection&, const DatasetSection&) = default;
};

struct ExperimentConfig {
    DatasetSection dataset;
    std::vector<std::size_t> hidden_dims{32};
    double dropout_rate = 0.0;
    double weight_init_scale = 1.0;
    nn::OptimizerConfig optimizer;
    loop::LoopConfig loop;  // schedule is rebuilt from attack_order / attack_specs
    std::vector<attacks::Family> attack_order{attacks::Family::pgd, attacks::Family::jitter, attacks::Family::fab,
                                              attacks::Family::vni_fgsm, attacks::Family::pgd_l2};
    std::map<attacks::Family, attacks::AttackSpec> attack_specs;
    std::string output_directory = "results";
    std::vector<std::string> output_formats{"csv"};
    std::size_t repetitions = 1;
    std::uint64_t base_seed = 0;
    std::size_t workers = 1;
    std::string method = "roal";

    ExperimentConfig() {
        for (auto f : attacks::kAllFamilies) attack_specs[f] = attacks::default_spec(f);
    }

    [[nodiscard]] attacks::AttackSchedule schedule() const {
        attacks::AttackSchedule s;
        for (auto f : attack_order) s.sequence.push_back(attack_specs.at(f));
        return s;
    }

    [[nodiscard]] loop::LoopConfig loop_config() const {
        loop::LoopConfig c = loop;
        c.schedule = schedule();
        c.optimizer = optimizer;
        return c;
    }

    friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
        const auto la = a.loop_config(), lb = b.loop_config();
        return a.dataset == b.dataset && a.hidden_dims == b.hidden_dims && a.dropout_rate == b.dropout_rate &&
               a.weight_init_scale == b.weight_init_scale && a.optimizer == b.optimizer && a.attack_order == b.attack_order &&
               a.attack_specs == b.attack_specs && a.output_directory == b.output_directory &&
               a.output_formats == b.output_formats && a.repetitions == b.repetitions && a.base_seed == b.base_seed &&
               a.workers == b.workers && a.method == b.method && la.iterations == lb.iterations &&
               la.candidates_per_iter == lb.candidates_per_iter && la.lambda == lb.lambda && la.gamma == lb.gamma &&
               la.adversarial_training == lb.adversarial_training && la.attack_fraction == lb.attack_fraction &&
               la.forgetting_probe == lb.forgetting_probe && la.use_ewc == lb.use_ewc && la.eval_cap == lb.eval_cap &&
               la.acquisition == lb.acquisition;
    }
};

// ---- parsing ----

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto piece = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (!piece.empty()) out.push_back(piece);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::string fmt_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// 6 significant digits, '.' decimal, as used in every CSV.
inline std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

/// Converts one raw value; errors name the key.
struct ValueReader {
    std::string key;
    std::string value;

    [[nodiscard]] ConfigError bad(const std::string& why) const {
        return ConfigError("invalid value for '" + key + "': " + why + " (got '" + value + "')");
    }

    template <class Int>
    [[nodiscard]] Int integer() const {
        Int v{};
        const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
        if (ec != std::errc{} || p != value.data() + value.size()) throw bad("expected a nonnegative integer");
        return v;
    }
    [[nodiscard]] double real() const {
        double v{};
        const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
        if (ec != std::errc{} || p != value.data() + value.size() || !std::isfinite(v)) throw bad("expected a real number");
        return v;
    }
    [[nodiscard]] bool boolean() const {
        if (value == "true" || value == "yes" || value == "1") return true;
        if (value == "false" || value == "no" || value == "0") return false;
        throw bad("expected true or false");
    }
    [[nodiscard]] double nonneg() const {
        const double v = real();
        if (v < 0.0) throw bad("must be >= 0");
        return v;
    }
    [[nodiscard]] double positive() const {
        const double v = real();
        if (!(v > 0.0)) throw bad("must be > 0");
        return v;
    }
    [[nodiscard]] std::size_t at_least(std::size_t lo) const {
        const auto v = integer<std::size_t>();
        if (v < lo) throw bad("must be >= " + std::to_string(lo));
        return v;
    }
};

}  // namespace detail

/// Parses the INI-like experiment grammar:
///   # comment            (a '#' starts a comment anywhere on a line)
///   [section]
///   key = value
/// Sections: experiment, dataset, model, optimizer, loop, acquisition,
/// attacks, attack.<family>, output. Unknown sections or keys, duplicates
/// and keys outside a section are rejected. Errors carry the line number
/// (syntax) or the key name (semantics).
inline ExperimentConfig parse_config(std::string_view text) {
    ExperimentConfig cfg;
    std::string section;
    std::set<std::string> seen;
    std::optional<double> global_eps;
    std::map<attacks::Family, std::set<std::string>> explicit_keys;

    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto where = "line " + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "unterminated section header");
            section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
            static const std::set<std::string> known{"experiment", "dataset", "model",   "optimizer",
                                                     "loop",       "acquisition", "attacks", "output"};
            if (!known.contains(section) && !section.starts_with("attack."))
                throw ConfigError(where + "unknown section '" + section + "'");
            if (section.starts_with("attack.")) attacks::parse_family(section.substr(7));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        if (section.empty()) throw ConfigError(where + "key outside of any section");
        const std::string key = detail::trim(std::string_view(line).substr(0, eq));
        const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
        if (key.empty()) throw ConfigError(where + "empty key");
        if (!seen.insert(section + "." + key).second) throw ConfigError(where + "duplicate key '" + key + "'");
        const detail::ValueReader v{key, value};
        auto unknown = [&] { return ConfigError(where + "unknown key '" + key + "' in section [" + section + "]"); };

        if (section == "experiment") {
            if (key == "repetitions") cfg.repetitions = v.at_least(1);
            else if (key == "base_seed") cfg.base_seed = v.integer<std::uint64_t>();
            else if (key == "workers") cfg.workers = v.at_least(1);
            else if (key == "method") {
                if (value.empty() || value.find(',') != std::string::npos) throw v.bad("must be a non-empty name without commas");
                cfg.method = value;
            } else throw unknown();
        } else if (section == "dataset") {
            auto& d = cfg.dataset;
            if (key == "name") {
                if (value != "blobs" && value != "mnist" && value != "fashion_mnist" && value != "idx")
                    throw v.bad("expected blobs, mnist, fashion_mnist or idx");
                d.name = value;
            } else if (key == "train_images") d.train_images = value;
            else if (key == "train_labels") d.train_labels = value;
            else if (key == "test_images") d.test_images = value;
            else if (key == "test_labels") d.test_labels = value;
            else if (key == "n_train") d.n_train = v.at_least(1);
            else if (key == "n_test") d.n_test = v.at_least(1);
            else if (key == "num_classes") d.num_classes = v.at_least(2);
            else if (key == "dim") d.dim = v.at_least(1);
            else if (key == "spread") d.spread = v.nonneg();
            else if (key == "seed") d.seed = v.integer<std::uint64_t>();
            else if (key == "initial_labeled") d.initial_labeled = v.at_least(1);
            else if (key == "max_train") d.max_train = v.integer<std::size_t>();
            else if (key == "max_test") d.max_test = v.integer<std::size_t>();
            else throw unknown();
        } else if (section == "model") {
            if (key == "hidden_dims") {
                cfg.hidden_dims.clear();
                for (const auto& piece : detail::split_list(value))
                    cfg.hidden_dims.push_back(detail::ValueReader{key, piece}.at_least(1));
            } else if (key == "dropout_rate") {
                const double r = v.nonneg();
                if (r >= 1.0) throw v.bad("must be < 1");
                cfg.dropout_rate = r;
            } else if (key == "weight_init_scale") cfg.weight_init_scale = v.positive();
            else throw unknown();
        } else if (section == "optimizer") {
            if (key == "epochs") cfg.optimizer.epochs = v.at_least(1);
            else if (key == "batch_size") cfg.optimizer.batch_size = v.at_least(1);
            else if (key == "learning_rate") cfg.optimizer.learning_rate = v.positive();
            else throw unknown();
        } else if (section == "loop") {
            auto& l = cfg.loop;
            if (key == "iterations") l.iterations = v.at_least(1);
            else if (key == "candidates_per_iter") l.candidates_per_iter = v.at_least(1);
            else if (key == "lambda") l.lambda = v.nonneg();
            else if (key == "gamma") l.gamma = v.nonneg();
            else if (key == "adversarial_training") l.adversarial_training = v.boolean();
            else if (key == "attack_fraction") {
                const double f = v.positive();
                if (f > 1.0) throw v.bad("must be in (0, 1]");
                l.attack_fraction = f;
            } else if (key == "forgetting_probe") l.forgetting_probe = v.boolean();
            else if (key == "use_ewc") l.use_ewc = v.boolean();
            else if (key == "eval_cap") l.eval_cap = v.integer<std::size_t>();
            else throw unknown();
        } else if (section == "acquisition") {
            auto& a = cfg.loop.acquisition;
            if (key == "strategy") {
                try {
                    a.strategy = acquisition::parse_strategy(value);
                } catch (const ConfigError&) {
                    throw v.bad("unknown strategy");
                }
            } else if (key == "mc_samples") a.mc_samples = v.at_least(1);
            else if (key == "eer_pool_cap") a.eer_pool_cap = v.at_least(1);
            else if (key == "num_clusters") a.num_clusters = v.at_least(1);
            else throw unknown();
        } else if (section == "attacks") {
            if (key == "order") {
                cfg.attack_order.clear();
                for (const auto& piece : detail::split_list(value)) {
                    try {
                        cfg.attack_order.push_back(attacks::parse_family(piece));
                    } catch (const ConfigError&) {
                        throw v.bad("unknown attack family '" + piece + "'");
                    }
                }
                if (cfg.attack_order.empty()) throw v.bad("needs at least one attack");
            } else if (key == "epsilon") global_eps = v.positive();
            else throw unknown();
        } else if (section == "output") {
            if (key == "directory") {
                if (value.empty()) throw v.bad("must not be empty");
                cfg.output_directory = value;
            } else if (key == "formats") {
                cfg.output_formats = detail::split_list(value);
                for (const auto& f : cfg.output_formats)
                    if (f != "csv" && f != "json") throw v.bad("formats are csv and json");
            } else throw unknown();
        } else {  // attack.<family>
            const auto fam = attacks::parse_family(section.substr(7));
            auto& spec = cfg.attack_specs[fam];
            if (key == "epsilon") spec.epsilon = v.positive();
            else if (key == "steps") spec.steps = v.at_least(1);
            else if (key == "step_size") spec.step_size = v.positive();
            else if (attacks::default_family_params(fam).contains(key)) spec.family_params[key] = v.nonneg();
            else throw unknown();
            explicit_keys[fam].insert(key);
        }
    }

    // Unset budgets follow [attacks] epsilon; unset step sizes follow 2.5 * eps / steps.
    for (auto& [fam, spec] : cfg.attack_specs) {
        const auto& keys = explicit_keys[fam];
        if (!keys.contains("epsilon") && global_eps) spec.epsilon = *global_eps;
        if (!keys.contains("step_size")) spec.step_size = 2.5 * spec.epsilon / static_cast<double>(spec.steps);
        attacks::validate(spec);
    }
    if (cfg.dataset.name != "blobs" &&
        (cfg.dataset.train_images.empty() || cfg.dataset.train_labels.empty() || cfg.dataset.test_images.empty() ||
         cfg.dataset.test_labels.empty()))
        throw ConfigError("invalid value for 'train_images': dataset '" + cfg.dataset.name +
                          "' needs train_images, train_labels, test_images and test_labels");
    return cfg;
}

/// Canonical text form with every value explicit; parse(serialize(c)) == c.
inline std::string serialize_config(const ExperimentConfig& c) {
    using detail::fmt_real;
    std::ostringstream o;
    auto list = [](const auto& xs, auto&& f) {
        std::string s;
        for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + f(xs[i]);
        return s;
    };
    o << "[experiment]\nrepetitions = " << c.repetitions << "\nbase_seed = " << c.base_seed << "\nworkers = " << c.workers
      << "\nmethod = " << c.method << "\n\n";
    const auto& d = c.dataset;
    o << "[dataset]\nname = " << d.name << "\n";
    if (!d.train_images.empty()) o << "train_images = " << d.train_images << "\n";
    if (!d.train_labels.empty()) o << "train_labels = " << d.train_labels << "\n";
    if (!d.test_images.empty()) o << "test_images = " << d.test_images << "\n";
    if (!d.test_labels.empty()) o << "test_labels = " << d.test_labels << "\n";
    o << "n_train = " << d.n_train << "\nn_test = " << d.n_test << "\nnum_classes = " << d.num_classes << "\ndim = " << d.dim
      << "\nspread = " << fmt_real(d.spread) << "\nseed = " << d.seed << "\ninitial_labeled = " << d.initial_labeled
      << "\nmax_train = " << d.max_train << "\nmax_test = " << d.max_test << "\n\n";
    o << "[model]\nhidden_dims = " << list(c.hidden_dims, [](std::size_t h) { return std::to_string(h); })
      << "\ndropout_rate = " << fmt_real(c.dropout_rate) << "\nweight_init_scale = " << fmt_real(c.weight_init_scale)
      << "\n\n";
    o << "[optimizer]\nepochs = " << c.optimizer.epochs << "\nbatch_size = " << c.optimizer.batch_size
      << "\nlearning_rate = " << fmt_real(c.optimizer.learning_rate) << "\n\n";
    const auto& l = c.loop;
    o << "[loop]\niterations = " << l.iterations << "\ncandidates_per_iter = " << l.candidates_per_iter
      << "\nlambda = " << fmt_real(l.lambda) << "\ngamma = " << fmt_real(l.gamma)
      << "\nadversarial_training = " << (l.adversarial_training ? "true" : "false")
      << "\nattack_fraction = " << fmt_real(l.attack_fraction)
      << "\nforgetting_probe = " << (l.forgetting_probe ? "true" : "false") << "\nuse_ewc = " << (l.use_ewc ? "true" : "false")
      << "\neval_cap = " << l.eval_cap << "\n\n";
    const auto& a = l.acquisition;
    o << "[acquisition]\nstrategy = " << acquisition::strategy_name(a.strategy) << "\nmc_samples = " << a.mc_samples
      << "\neer_pool_cap = " << a.eer_pool_cap << "\nnum_clusters = " << a.num_clusters << "\n\n";
    o << "[attacks]\norder = " << list(c.attack_order, [](attacks::Family f) { return attacks::key_name(f); }) << "\n";
    for (const auto& [fam, spec] : c.attack_specs) {
        o << "\n[attack." << attacks::key_name(fam) << "]\nepsilon = " << fmt_real(spec.epsilon) << "\nsteps = " << spec.steps
          << "\nstep_size = " << fmt_real(spec.step_size) << "\n";
        for (const auto& [k, _] : attacks::default_family_params(fam)) o << k << " = " << fmt_real(spec.param(k)) << "\n";
    }
    o << "\n[output]\ndirectory = " << c.output_directory << "\nformats = " << list(c.output_formats, [](const std::string& s) {
        return s;
    }) << "\n";
    return o.str();
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

/// FNV-1a of the canonical config text, as 16 hex digits.
inline std::string fingerprint(const ExperimentConfig& c) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : serialize_config(c)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---- datasets ----

inline std::pair<data::Dataset, data::Dataset> load_datasets(const DatasetSection& d) {
    if (d.name == "blobs") return data::make_blobs_split(d.n_train, d.n_test, d.num_classes, d.dim, d.spread, d.seed);
    auto train = data::load_idx(d.train_images, d.train_labels, d.name);
    auto test = data::load_idx(d.test_images, d.test_labels, d.name);
    const std::size_t C = std::max(train.num_classes, test.num_classes);
    train.num_classes = test.num_classes = C;
    return {data::take(train, d.max_train, derive_seed(d.seed, 1)), data::take(test, d.max_test, derive_seed(d.seed, 2))};
}

// ---- single runs ----

inline std::vector<IterationRecord> run_once(const ExperimentConfig& cfg, const data::Dataset& train,
                                             const data::Dataset& test, std::uint64_t seed) {
    auto pool = data::split_pool(train, test, cfg.dataset.initial_labeled, seed);
    nn::ModelConfig mc;
    mc.input_dim = train.input_dim();
    mc.num_classes = train.num_classes;
    mc.hidden_dims = cfg.hidden_dims;
    mc.dropout_rate = cfg.dropout_rate;
    mc.weight_init_scale = cfg.weight_init_scale;
    return loop::run_roal(std::move(pool), mc, cfg.loop_config(), seed).records;
}

// ---- files ----

inline const char* kRunCsvHeader = "run_id,iteration,attack,labeled_count,clean_accuracy,robust_accuracy,train_loss,seed";
inline const char* kAggregateCsvHeader =
    "iteration,labeled_count,attack,clean_accuracy_mean,clean_accuracy_std,robust_accuracy_mean,robust_accuracy_std,"
    "train_loss_mean,train_loss_std,forgetting_drop_mean,forgetting_drop_std";

inline std::string run_csv(std::size_t run_id, std::span<const IterationRecord> records) {
    using detail::fmt6;
    std::string s = std::string(kRunCsvHeader) + "\n";
    for (const auto& r : records)
        s += std::to_string(run_id) + "," + std::to_string(r.iteration) + "," + r.attack + "," + std::to_string(r.labeled_count) +
             "," + fmt6(r.clean_accuracy) + "," + fmt6(r.robust_accuracy) + "," + fmt6(r.train_loss) + "," +
             std::to_string(r.seed) + "\n";
    return s;
}

inline std::string aggregate_csv(const metrics::RunSummary& summary) {
    using detail::fmt6;
    std::string s = std::string(kAggregateCsvHeader) + "\n";
    for (const auto& it : summary.iterations)
        s += std::to_string(it.iteration) + "," + std::to_string(it.labeled_count) + "," + it.attack + "," +
             fmt6(it.clean_accuracy.mean) + "," + fmt6(it.clean_accuracy.std) + "," + fmt6(it.robust_accuracy.mean) + "," +
             fmt6(it.robust_accuracy.std) + "," + fmt6(it.train_loss.mean) + "," + fmt6(it.train_loss.std) + "," +
             fmt6(it.forgetting_drop.mean) + "," + fmt6(it.forgetting_drop.std) + "\n";
    return s;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::string run_file_name(std::size_t r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "run_%03zu.csv", r);
    return buf;
}

/// Refuses to overwrite earlier results unless `force`.
inline void prepare_output_dir(const std::filesystem::path& dir, bool force) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    if (force) return;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (name == "manifest.json" || name == "aggregate.csv" || (name.starts_with("run_") && name.ends_with(".csv")))
            throw IoError("output directory " + dir.string() + " already holds results (use --force to overwrite)");
    }
}

}  // namespace detail

struct RunOptions {
    std::filesystem::path output_dir;  // empty: environment override, then the config's directory
    bool force = false;
    std::size_t workers = 0;  // 0: use the config value
    bool quiet = true;
};

inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg, const RunOptions& opts) {
    if (!opts.output_dir.empty()) return opts.output_dir;
    if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
    return cfg.output_directory;
}

struct ExperimentResult {
    std::filesystem::path directory;
    std::vector<std::vector<IterationRecord>> runs;
    metrics::RunSummary summary;
};

/// Runs `repetitions` independent repetitions (run r uses base_seed + r) on a
/// worker pool, then writes every file from this thread.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    const auto started = std::chrono::steady_clock::now();
    loop::validate(cfg.loop_config());
    const auto dir = resolve_output_dir(cfg, opts);
    detail::prepare_output_dir(dir, opts.force);

    const auto [train, test] = load_datasets(cfg.dataset);
    const std::size_t R = cfg.repetitions;
    std::vector<std::vector<IterationRecord>> runs(R);
    std::vector<std::exception_ptr> errors(R);
    std::atomic<std::size_t> next{0};
    const std::size_t width = std::max<std::size_t>(1, std::min(R, opts.workers ? opts.workers : cfg.workers));
    auto worker = [&] {
        for (std::size_t r = next++; r < R; r = next++) {
            try {
                runs[r] = run_once(cfg, train, test, cfg.base_seed + r);
            } catch (...) {
                errors[r] = std::current_exception();
            }
        }
    };
    if (width == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < width; ++w) pool.emplace_back(worker);
    }
    for (std::size_t r = 0; r < R; ++r) {
        if (!errors[r]) continue;
        try {
            std::rethrow_exception(errors[r]);
        } catch (const ConfigError& e) {
            throw ConfigError("run " + std::to_string(r) + ": " + e.what());
        } catch (const IoError& e) {
            throw IoError("run " + std::to_string(r) + ": " + e.what());
        } catch (const std::exception& e) {
            throw Error("run " + std::to_string(r) + ": " + e.what());
        }
    }

    ExperimentResult result{dir, std::move(runs), {}};
    result.summary = metrics::aggregate(result.runs, fingerprint(cfg));

    std::vector<std::string> files;
    for (std::size_t r = 0; r < R; ++r) {
        detail::write_text(dir / detail::run_file_name(r), run_csv(r, result.runs[r]));
        files.push_back(detail::run_file_name(r));
    }
    detail::write_text(dir / "aggregate.csv", aggregate_csv(result.summary));
    files.push_back("aggregate.csv");

    if (std::find(cfg.output_formats.begin(), cfg.output_formats.end(), "json") != cfg.output_formats.end()) {
        nlohmann::json records = nlohmann::json::array();
        for (std::size_t r = 0; r < R; ++r)
            for (const auto& rec : result.runs[r]) {
                nlohmann::json j{{"run_id", r},
                                 {"iteration", rec.iteration},
                                 {"attack", rec.attack},
                                 {"labeled_count", rec.labeled_count},
                                 {"clean_accuracy", rec.clean_accuracy},
                                 {"robust_accuracy", rec.robust_accuracy},
                                 {"train_loss", rec.train_loss},
                                 {"seed", rec.seed}};
                if (rec.previous_attack_robust_accuracy)
                    j["previous_attack_robust_accuracy"] = *rec.previous_attack_robust_accuracy;
                records.push_back(std::move(j));
            }
        detail::write_text(dir / "records.json", records.dump(2) + "\n");
        files.push_back("records.json");
    }

    std::vector<std::uint64_t> seeds;
    for (std::size_t r = 0; r < R; ++r) seeds.push_back(cfg.base_seed + r);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    const nlohmann::json manifest{{"library_version", kVersion},
                                  {"method", cfg.method},
                                  {"fingerprint", result.summary.fingerprint},
                                  {"repetitions", R},
                                  {"seeds", seeds},
                                  {"initial_labeled", cfg.dataset.initial_labeled},
                                  {"candidates_per_iter", cfg.loop.candidates_per_iter},
                                  {"wall_clock_seconds", wall},
                                  {"files", files},
                                  {"config", serialize_config(cfg)}};
    detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return result;
}

// ---- plot data ----

/// Long-format (method, queries, mean, std) CSV per metric, built from a run
/// directory's aggregate.csv. Returns the files written.
inline std::vector<std::filesystem::path> emit_plot_data(const std::filesystem::path& run_dir) {
    const auto agg_path = run_dir / "aggregate.csv";
    if (!std::filesystem::exists(agg_path)) throw IoError("no aggregate.csv in " + run_dir.string());
    std::string method = "roal";
    if (std::filesystem::exists(run_dir / "manifest.json")) {
        try {
            method = nlohmann::json::parse(detail::read_text(run_dir / "manifest.json")).value("method", method);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest.json is not valid: " + std::string(e.what()));
        }
    }
    std::istringstream in(detail::read_text(agg_path));
    std::string header;
    std::getline(in, header);
    std::vector<std::string> cols = detail::split_list(header);
    auto col = [&](const std::string& name) {
        const auto it = std::find(cols.begin(), cols.end(), name);
        if (it == cols.end()) throw FormatError("aggregate.csv lacks column " + name);
        return static_cast<std::size_t>(it - cols.begin());
    };
    const std::size_t q = col("labeled_count");
    const std::vector<std::pair<std::string, std::string>> metric_cols{
        {"accuracy", "clean_accuracy"}, {"robust_accuracy", "robust_accuracy"}, {"forgetting_drop", "forgetting_drop"}};

    std::vector<std::string> bodies(metric_cols.size(), "method,queries,mean,std\n");
    std::string line;
    while (std::getline(in, line)) {
        if (detail::trim(line).empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
        if (cells.size() != cols.size()) throw FormatError("aggregate.csv has a ragged row");
        for (std::size_t m = 0; m < metric_cols.size(); ++m)
            bodies[m] += method + "," + cells[q] + "," + cells[col(metric_cols[m].second + "_mean")] + "," +
                         cells[col(metric_cols[m].second + "_std")] + "\n";
    }
    std::vector<std::filesystem::path> written;
    for (std::size_t m = 0; m < metric_cols.size(); ++m) {
        const auto path = run_dir / ("plot_" + metric_cols[m].first + ".csv");
        detail::write_text(path, bodies[m]);
        written.push_back(path);
    }
    return written;
}

// ---- ablations ----

enum class Sweep { lambda, acquisition, initial_labeled };

inline Sweep parse_sweep(std::string_view s) {
    if (s == "lambda") return Sweep::lambda;
    if (s == "acquisition") return Sweep::acquisition;
    if (s == "initial_labeled") return Sweep::initial_labeled;
    throw ConfigError("unknown sweep '" + std::string(s) + "' (expected lambda, acquisition or initial_labeled)");
}

inline std::string sweep_name(Sweep s) {
    switch (s) {
        case Sweep::lambda: return "lambda";
        case Sweep::acquisition: return "acquisition";
        case Sweep::initial_labeled: return "initial_labeled";
    }
    return "?";
}

/// Config with the swept setting replaced by `value`.
inline ExperimentConfig apply_sweep(ExperimentConfig cfg, Sweep sweep, const std::string& value) {
    const detail::ValueReader v{sweep_name(sweep), value};
    switch (sweep) {
        case Sweep::lambda: cfg.loop.lambda = v.nonneg(); break;
        case Sweep::acquisition:
            try {
                cfg.loop.acquisition.strategy = acquisition::parse_strategy(value);
            } catch (const ConfigError&) {
                throw v.bad("unknown strategy");
            }
            break;
        case Sweep::initial_labeled: cfg.dataset.initial_labeled = v.at_least(1); break;
    }
    return cfg;
}

struct AblationResult {
    std::filesystem::path table;
    std::vector<ExperimentResult> runs;
};

/// One full experiment per sweep value, all else (including seeds) fixed.
/// Each value gets its own subdirectory; the wide table has one row per
/// value and one robust-accuracy column per (iteration, attack).
inline AblationResult run_ablation(const ExperimentConfig& base, Sweep sweep, const std::vector<std::string>& values,
                                   const RunOptions& opts = {}) {
    if (values.empty()) throw ConfigError("ablation needs at least one sweep value");
    const auto root = resolve_output_dir(base, opts);
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root.string());
    const auto table_path = root / ("ablation_" + sweep_name(sweep) + ".csv");
    if (!opts.force && std::filesystem::exists(table_path))
        throw IoError(table_path.string() + " exists (use --force to overwrite)");

    AblationResult out{table_path, {}};
    std::string table;
    for (const auto& value : values) {
        const ExperimentConfig cfg = apply_sweep(base, sweep, value);
        RunOptions sub = opts;
        sub.output_dir = root / (sweep_name(sweep) + "_" + value);
        out.runs.push_back(run_experiment(cfg, sub));
        const auto& summary = out.runs.back().summary;
        if (table.empty()) {
            table = sweep_name(sweep);
            for (const auto& it : summary.iterations)
                table += ",t" + std::to_string(it.iteration) + "_" + it.attack + "_robust_accuracy";
            table += ",final_clean_accuracy\n";
        }
        table += value;
        for (const auto& it : summary.iterations) table += "," + detail::fmt6(it.robust_accuracy.mean);
        table += "," + detail::fmt6(summary.iterations.back().clean_accuracy.mean) + "\n";
    }
    detail::write_text(table_path, table);
    return out;
}

}  // namespace roal::experiment
