// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   acceptance            run everything
//   acceptance 5 6        run selected criteria
//
// The MNIST part of criterion 10 reads train/t10k IDX files from
// $ROAL_MNIST_DIR or <source>/data/mnist and is skipped when they are absent.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "roal/acquisition.hpp"
#include "roal/attacks.hpp"
#include "roal/data.hpp"
#include "roal/ewc.hpp"
#include "roal/experiment.hpp"
#include "roal/loop.hpp"
#include "roal/metrics.hpp"
#include "roal/model.hpp"
#include "roal/train.hpp"
#include "test_support.hpp"

using namespace roal;
namespace rt = roal::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---- 1: gradient fidelity ----

Outcome gradient_fidelity() {
    const auto t0 = Clock::now();
    std::mt19937_64 gen(101);
    double worst_param = 0.0, worst_input = 0.0;
    const int models = 24;
    for (int trial = 0; trial < models; ++trial) {
        const auto m = rt::random_model(gen, 1000);
        const auto b = rt::random_batch(gen, 5, m.config.input_dim, m.config.num_classes);
        const auto fd = rt::numeric_gradient(
            [&](const std::vector<double>& th) { return rt::reference_loss(nn::ModelState{m.config, th}, b.inputs, b.labels); },
            m.params);
        worst_param = std::max(worst_param, rt::relative_error(nn::param_grad(m, b), fd));
        for (std::size_t r = 0; r < b.size(); ++r) {
            const auto row = b.inputs.row(r);
            const std::vector<double> x(row.begin(), row.end());
            const auto fdx = rt::numeric_gradient(
                [&](const std::vector<double>& v) { return rt::reference_loss(m, Matrix(1, v.size(), v), {b.labels[r]}); }, x);
            worst_input = std::max(worst_input, rt::relative_error(nn::input_grad(m, x, b.labels[r]), fdx));
        }
    }
    const double secs = seconds_since(t0);
    return {worst_param < 1e-4 && worst_input < 1e-4 && secs < 10.0,
            std::to_string(models) + " models, max rel err param " + fmt("%.2e", worst_param) + ", input " +
                fmt("%.2e", worst_input) + ", " + fmt("%.2f", secs) + " s"};
}

// ---- 2: EWC ----

Outcome ewc_correctness() {
    std::vector<std::string> failures;
    std::mt19937_64 gen(202);
    std::uniform_real_distribution<double> u(-2.0, 2.0), pos(0.0, 3.0);

    ewc::EwcState s{{0.4, -1.1, 2.0}, {1.0, 0.5, 3.0}, 0.7};
    if (ewc::penalty(s, s.theta_star) != 0.0) failures.push_back("penalty at anchor");
    const ewc::EwcState hand{{0.0, 0.0}, {1.0, 2.0}, 0.5};
    if (std::abs(ewc::penalty(hand, std::vector<double>{1.0, 1.0}) - 0.75) > 1e-15) failures.push_back("hand case");

    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        ewc::EwcState e;
        e.lambda = pos(gen);
        std::vector<double> theta(10);
        for (auto& v : theta) {
            v = u(gen);
            e.theta_star.push_back(u(gen));
            e.fisher.push_back(pos(gen));
        }
        const auto fd = rt::numeric_gradient([&](const std::vector<double>& th) { return ewc::penalty(e, th); }, theta);
        worst = std::max(worst, rt::relative_error(ewc::penalty_grad(e, theta), fd));
    }
    if (worst > 1e-6) failures.push_back("penalty_grad rel err " + fmt("%.2e", worst));

    for (int t = 0; t < 1000; ++t) {
        const auto m = rt::random_model(gen, 300);
        const auto b = rt::random_batch(gen, 4, m.config.input_dim, m.config.num_classes);
        for (double f : ewc::estimate_fisher(m, b))
            if (!(f >= 0.0)) {
                failures.push_back("negative Fisher entry");
                t = 1000;
                break;
            }
    }

    double logistic_err = 0.0;
    for (int t = 0; t < 20; ++t) {
        const std::size_t d = 2 + t % 6;
        nn::ModelState m{nn::ModelConfig{d, {}, 2}, std::vector<double>(d * 2 + 2, 0.0)};
        const auto b = rt::random_batch(gen, 1, d, 2);
        const auto F = ewc::estimate_fisher(m, b);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t c = 0; c < 2; ++c)
                logistic_err = std::max(logistic_err, std::abs(F[i * 2 + c] - 0.25 * b.inputs(0, i) * b.inputs(0, i)));
    }
    if (logistic_err > 1e-6) failures.push_back("logistic Fisher err " + fmt("%.2e", logistic_err));

    std::string detail = "penalty_grad rel err " + fmt("%.2e", worst) + ", logistic Fisher err " + fmt("%.2e", logistic_err) +
                         ", 1000 Fisher trials";
    for (const auto& f : failures) detail += "; FAILED " + f;
    return {failures.empty(), detail};
}

// ---- 3: attack contracts ----

nn::ModelState trained_blobs_model(std::uint64_t seed, data::Dataset& test_out) {
    auto [tr, te] = data::make_blobs_split(300, 60, 3, 6, 0.25, seed);
    const auto m0 = nn::init_model(nn::ModelConfig{6, {16}, 3}, seed);
    test_out = te;
    return nn::train(m0, tr.as_batch(), nullptr, nullptr, nn::OptimizerConfig{30, 32, 0.2}, seed).model;
}

Outcome attack_contracts() {
    const auto t0 = Clock::now();
    std::mt19937_64 gen(303);
    std::size_t violations = 0, nondeterministic = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto m = rt::random_model(gen);
        const auto b = rt::random_batch(gen, 8, m.config.input_dim, m.config.num_classes);
        const double eps_scale = 0.05 + 0.1 * (trial % 10);
        for (auto f : attacks::kAllFamilies) {
            const auto spec = attacks::default_spec(f, (attacks::family_norm(f) == attacks::Norm::inf ? 1.0 : 3.0) * eps_scale);
            const auto a = attacks::craft(m, b, spec, static_cast<std::uint64_t>(trial));
            const auto a2 = attacks::craft(m, b, spec, static_cast<std::uint64_t>(trial));
            if (!(a.inputs == a2.inputs)) ++nondeterministic;
            for (double v : a.inputs.data())
                if (!(v >= 0.0 && v <= 1.0)) ++violations;
            for (double n : attacks::perturbation_norms(a.inputs, b.inputs, spec.norm))
                if (n > spec.epsilon + 1e-9) ++violations;
        }
    }

    const attacks::Family ascent_families[] = {attacks::Family::pgd, attacks::Family::pgd_l2, attacks::Family::vni_fgsm};
    const int trained_trials = 20;
    std::string ascent_detail;
    bool ascent_ok = true;
    std::vector<int> ascents(3, 0);
    for (int trial = 0; trial < trained_trials; ++trial) {
        data::Dataset test;
        const auto m = trained_blobs_model(1000 + static_cast<std::uint64_t>(trial), test);
        const auto batch = test.as_batch();
        const double clean = nn::loss(m, batch);
        for (std::size_t k = 0; k < 3; ++k) {
            const auto adv = attacks::craft(m, batch, attacks::default_spec(ascent_families[k]), static_cast<std::uint64_t>(trial));
            if (nn::loss(m, adv) > clean) ++ascents[k];
        }
    }
    for (std::size_t k = 0; k < 3; ++k) {
        const double rate = static_cast<double>(ascents[k]) / trained_trials;
        ascent_ok = ascent_ok && rate >= 0.9;
        ascent_detail += " " + attacks::display_name(ascent_families[k]) + "=" + fmt("%.2f", rate);
    }
    const double secs = seconds_since(t0);
    return {violations == 0 && nondeterministic == 0 && ascent_ok && secs < 60.0,
            "500 family x pair checks, " + std::to_string(violations) + " contract violations, " +
                std::to_string(nondeterministic) + " nondeterministic; ascent rate" + ascent_detail + "; " + fmt("%.1f", secs) + " s"};
}

// ---- 4: schedule ----

Outcome schedule_fidelity() {
    const auto s = attacks::default_schedule();
    const std::vector<std::string> expected{"PGD", "Jitter", "FAB", "VNI", "PGDL2", "PGD", "Jitter", "FAB", "VNI", "PGDL2"};
    std::string got;
    bool ok = true;
    for (std::size_t t = 1; t <= 10; ++t) {
        const auto name = attacks::display_name(attacks::schedule_attack(s, t).family);
        ok = ok && name == expected[t - 1];
        got += (t > 1 ? "," : "") + name;
    }
    return {ok, got};
}

// ---- 5 and 6: desk-scale benefit and forgetting ----

struct BenefitStats {
    double final_robust = 0.0;
    double mean_drop = 0.0;
    std::vector<double> drop_by_switch;  // iterations 2..T, mean over seeds
};

experiment::ExperimentConfig desk_config(double lambda) {
    auto cfg = experiment::parse_config(
        "[dataset]\nname = blobs\nn_train = 2000\nn_test = 1000\nnum_classes = 4\ndim = 16\ninitial_labeled = 100\n"
        "[loop]\niterations = 5\ncandidates_per_iter = 20\n"
        "[attacks]\nepsilon = 0.1\n");
    cfg.loop.lambda = lambda;
    return cfg;
}

BenefitStats desk_run(double lambda, std::size_t seeds) {
    const auto cfg = desk_config(lambda);
    const auto [train, test] = experiment::load_datasets(cfg.dataset);
    BenefitStats s;
    std::vector<std::vector<IterationRecord>> runs(seeds);
    std::vector<std::jthread> workers;
    for (std::size_t r = 0; r < seeds; ++r)
        workers.emplace_back([&, r] { runs[r] = experiment::run_once(cfg, train, test, r); });
    workers.clear();
    const std::size_t T = runs.front().size();
    s.drop_by_switch.assign(T - 1, 0.0);
    double all_drops = 0.0;
    for (const auto& run : runs) {
        s.final_robust += run.back().robust_accuracy / static_cast<double>(seeds);
        const auto d = metrics::forgetting_probe(run);
        for (std::size_t i = 0; i < d.size(); ++i) {
            s.drop_by_switch[i] += d[i] / static_cast<double>(seeds);
            all_drops += d[i];
        }
    }
    s.mean_drop = all_drops / static_cast<double>(seeds * (T - 1));
    return s;
}

struct DeskResults {
    BenefitStats ewc, plain;
    double seconds = 0.0;
};

const DeskResults& desk_results() {
    static const DeskResults r = [] {
        const auto t0 = Clock::now();
        DeskResults out;
        out.ewc = desk_run(0.5, 10);
        out.plain = desk_run(0.0, 10);
        out.seconds = seconds_since(t0);
        return out;
    }();
    return r;
}

Outcome desk_benefit() {
    const auto& r = desk_results();
    const bool ok = r.ewc.final_robust >= r.plain.final_robust && r.ewc.mean_drop <= r.plain.mean_drop && r.seconds < 300.0;
    return {ok, "final robust acc lambda=0.5 " + fmt("%.4f", r.ewc.final_robust) + " vs lambda=0 " +
                    fmt("%.4f", r.plain.final_robust) + "; mean drop " + fmt("%.4f", r.ewc.mean_drop) + " vs " +
                    fmt("%.4f", r.plain.mean_drop) + "; " + fmt("%.1f", r.seconds) + " s for 20 runs"};
}

Outcome forgetting_observation() {
    const auto& r = desk_results();
    double best = -1.0;
    std::string per;
    for (std::size_t i = 0; i < r.plain.drop_by_switch.size(); ++i) {
        best = std::max(best, r.plain.drop_by_switch[i]);
        per += (i ? "," : "") + fmt("%.4f", r.plain.drop_by_switch[i]);
    }
    return {best >= 0.02, "lambda=0 mean drop per switch (t=2..5): " + per};
}

// ---- 7: metrics ----

double oracle_accuracy(const nn::ModelState& m, const Matrix& inputs, const std::vector<std::size_t>& labels) {
    const std::size_t C = m.config.num_classes;
    std::vector<std::vector<std::size_t>> cm(C, std::vector<std::size_t>(C, 0));
    for (std::size_t r = 0; r < inputs.rows(); ++r) {
        const auto row = inputs.row(r);
        ++cm[labels[r]][rt::reference_argmax(rt::reference_logits(m, {row.begin(), row.end()}))];
    }
    std::size_t diag = 0, total = 0;
    for (std::size_t i = 0; i < C; ++i)
        for (std::size_t j = 0; j < C; ++j) {
            total += cm[i][j];
            if (i == j) diag += cm[i][j];
        }
    return static_cast<double>(diag) / static_cast<double>(total);
}

Outcome metric_oracles() {
    std::mt19937_64 gen(707);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto m = rt::random_model(gen);
        const auto b = rt::random_batch(gen, 40, m.config.input_dim, m.config.num_classes);
        const data::Dataset ds{b.inputs, b.labels, m.config.num_classes, "eval"};
        if (metrics::accuracy(m, ds) != oracle_accuracy(m, ds.inputs, ds.labels)) ++mismatches;
        if (metrics::accuracy(metrics::confusion_counts(m, ds)) != oracle_accuracy(m, ds.inputs, ds.labels)) ++mismatches;
        const auto f = attacks::kAllFamilies[static_cast<std::size_t>(trial) % std::size(attacks::kAllFamilies)];
        const auto adv = metrics::build_adversarial_test(m, ds, attacks::default_spec(f), static_cast<std::uint64_t>(trial));
        if (metrics::robust_accuracy(m, adv) != oracle_accuracy(m, adv.inputs, adv.labels)) ++mismatches;
    }
    const std::vector<double> dre{0, 14.29, 21.62, 5.41, 14.29, 9.68};
    const std::vector<double> mcp{12.05, 3.70, 18.42, 8.33, 9.09, 13.33};
    const double avg_dre = metrics::average_improvement(dre), avg_mcp = metrics::average_improvement(mcp);
    const double cifar = metrics::improvement_pct(0.45, 0.37);
    const bool ok = mismatches == 0 && avg_dre == 10.88 && avg_mcp == 10.82 && cifar == 21.62;
    return {ok, "100 batches, " + std::to_string(mismatches) + " oracle mismatches; average improvement vs DRE " +
                    fmt("%.2f", avg_dre) + ", vs MCP " + fmt("%.2f", avg_mcp) + "; (0.45, 0.37) -> " + fmt("%.2f", cifar)};
}

// ---- 8: acquisition ----

Outcome acquisition_oracles() {
    std::vector<std::string> failures;
    const double h10 = acquisition::entropy(std::vector<double>(10, 0.1));
    if (std::abs(h10 - std::log(10.0)) > 1e-9) failures.push_back("uniform entropy");

    // exhaustive expected-error-reduction oracle on 3-point pools
    std::mt19937_64 gen(808);
    int eer_mismatch = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const auto m = rt::random_model(gen, 200);
        const auto lab = rt::random_batch(gen, 6, m.config.input_dim, m.config.num_classes);
        const auto pool = rt::random_batch(gen, 3, m.config.input_dim, m.config.num_classes).inputs;
        const nn::OptimizerConfig opt{1, 64, 0.5};
        const Matrix p = nn::forward(m, pool);
        std::vector<double> risk(3, 0.0);
        for (std::size_t i = 0; i < 3; ++i) {
            std::vector<std::size_t> rest;
            for (std::size_t j = 0; j < 3; ++j)
                if (j != i) rest.push_back(j);
            for (std::size_t c = 0; c < m.config.num_classes; ++c) {
                nn::Batch aug = lab;
                aug.inputs.append_row(pool.row(i));
                aug.labels.push_back(c);
                const auto clone = nn::train(m, aug, nullptr, nullptr, opt, 99).model;
                double h = 0.0;
                for (std::size_t r : rest) {
                    const auto row = pool.row(r);
                    for (double v : rt::reference_softmax(rt::reference_logits(clone, {row.begin(), row.end()})))
                        if (v > 0.0) h -= v * std::log(v);
                }
                risk[i] += p(i, c) * h;
            }
        }
        const std::size_t best = static_cast<std::size_t>(std::min_element(risk.begin(), risk.end()) - risk.begin());
        if (acquisition::select_expected_error_reduction(m, pool, lab, 1, 3, opt, static_cast<std::uint64_t>(trial)) !=
            std::vector<std::size_t>{best})
            ++eer_mismatch;
    }
    if (eer_mismatch) failures.push_back(std::to_string(eer_mismatch) + " EER mismatches");

    std::size_t bad = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto m = rt::random_model(gen, 150, trial % 2 ? 0.3 : 0.0);
        const auto lab = rt::random_batch(gen, 4, m.config.input_dim, m.config.num_classes);
        const std::size_t n = 3 + static_cast<std::size_t>(trial) % 10;
        const auto pool = rt::random_batch(gen, n, m.config.input_dim, m.config.num_classes).inputs;
        for (auto s : acquisition::kAllStrategies) {
            acquisition::AcquisitionConfig cfg;
            cfg.strategy = s;
            cfg.k = 1 + static_cast<std::size_t>(gen() % n);
            cfg.mc_samples = 2;
            cfg.eer_pool_cap = 3;
            cfg.num_clusters = 1 + static_cast<std::size_t>(gen() % 4);
            const auto got = acquisition::select(cfg, m, pool, lab, nn::OptimizerConfig{1, 8, 0.1}, static_cast<std::uint64_t>(trial));
            const std::set<std::size_t> u(got.begin(), got.end());
            if (got.size() != cfg.k || u.size() != cfg.k || *u.rbegin() >= n) ++bad;
        }
    }
    if (bad) failures.push_back(std::to_string(bad) + " malformed selections");
    std::string detail = "H(uniform10) - ln 10 = " + fmt("%.1e", h10 - std::log(10.0)) + "; 10 EER brute-force pools; " +
                         std::to_string(1000 * std::size(acquisition::kAllStrategies)) + " selections checked";
    for (const auto& f : failures) detail += "; FAILED " + f;
    return {failures.empty(), detail};
}

// ---- 9: CLI determinism ----

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome cli_determinism() {
    const auto dir = rt::scratch_dir("acceptance_cli");
    std::ofstream(dir / "run.ini") << "[experiment]\nrepetitions = 2\n"
                                      "[dataset]\nn_train = 600\nn_test = 200\nnum_classes = 4\ndim = 16\ninitial_labeled = 100\n"
                                      "[loop]\niterations = 3\ncandidates_per_iter = 20\n[attacks]\nepsilon = 0.1\n";
    const std::string cli = ROAL_CLI_PATH;
    int rc[2];
    for (int k = 0; k < 2; ++k) {
        const auto out = dir / ("out" + std::to_string(k));
        rc[k] = std::system((cli + " run --config " + (dir / "run.ini").string() + " --seed 7 --out " + out.string() +
                             " > /dev/null 2>&1")
                                .c_str());
    }
    if (rc[0] != 0 || rc[1] != 0) return {false, "CLI exited with " + std::to_string(rc[0]) + "/" + std::to_string(rc[1])};
    bool same = true;
    std::size_t bytes = 0;
    for (const char* f : {"run_000.csv", "run_001.csv"}) {
        const auto a = slurp(dir / "out0" / f), b = slurp(dir / "out1" / f);
        same = same && !a.empty() && a == b;
        bytes += a.size();
    }
    return {same, "two CLI runs with --seed 7: per-run CSVs " + std::string(same ? "identical" : "DIFFER") + " (" +
                      std::to_string(bytes) + " bytes)"};
}

// ---- 10: IDX ----

Outcome idx_loader() {
    const auto dir = rt::scratch_dir("acceptance_idx");
    data::IdxImages img{5, 3, 4, {}};
    std::mt19937_64 gen(1010);
    for (std::size_t i = 0; i < 5 * 12; ++i) img.pixels.push_back(static_cast<std::uint8_t>(gen() & 0xFF));
    const std::vector<std::uint8_t> labels{0, 3, 9, 1, 1};
    data::detail::write_bytes(dir / "img", data::encode_idx_images(img));
    data::detail::write_bytes(dir / "lbl", data::encode_idx_labels(labels));
    const auto ds = data::load_idx(dir / "img", dir / "lbl");
    data::write_idx(ds, 3, 4, dir / "img2", dir / "lbl2");
    const bool round_trip = data::detail::read_bytes(dir / "img") == data::detail::read_bytes(dir / "img2") &&
                            data::detail::read_bytes(dir / "lbl") == data::detail::read_bytes(dir / "lbl2");
    std::string detail = std::string("synthetic IDX round trip ") + (round_trip ? "bitwise identical" : "DIFFERS");

    fs::path mnist = fs::path(ROAL_SOURCE_DIR) / "data" / "mnist";
    if (const char* env = std::getenv("ROAL_MNIST_DIR")) mnist = env;
    const auto tr_img = mnist / "train-images-idx3-ubyte", tr_lbl = mnist / "train-labels-idx1-ubyte";
    const auto te_img = mnist / "t10k-images-idx3-ubyte", te_lbl = mnist / "t10k-labels-idx1-ubyte";
    bool mnist_ok = true;
    if (fs::exists(tr_img) && fs::exists(tr_lbl) && fs::exists(te_img) && fs::exists(te_lbl)) {
        const auto train = data::load_idx(tr_img, tr_lbl, "mnist");
        const auto test = data::load_idx(te_img, te_lbl, "mnist");
        mnist_ok = train.size() == 60000 && test.size() == 10000 && train.input_dim() == 784 && train.num_classes == 10;
        detail += "; MNIST " + std::to_string(train.size()) + "/" + std::to_string(test.size()) + ", input_dim " +
                  std::to_string(train.input_dim());
    } else {
        detail += "; MNIST files not found under " + mnist.string() + " (check skipped)";
    }
    return {round_trip && mnist_ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"gradient fidelity", gradient_fidelity},
        {"EWC correctness", ewc_correctness},
        {"attack contracts", attack_contracts},
        {"schedule fidelity", schedule_fidelity},
        {"desk-scale benefit", desk_benefit},
        {"forgetting observation", forgetting_observation},
        {"metric oracle equivalence", metric_oracles},
        {"acquisition oracles", acquisition_oracles},
        {"end-to-end determinism", cli_determinism},
        {"IDX loader", idx_loader},
    };
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected.empty() && !selected.contains(i + 1)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first << " -- " << o.detail << std::endl;
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}
