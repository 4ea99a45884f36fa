#include <gtest/gtest.h>

#include <vector>

#include "roal/loop.hpp"

using namespace roal;

namespace {

struct Setup {
    data::LabelPool pool;
    nn::ModelConfig model;
    loop::LoopConfig cfg;
};

Setup small(std::size_t T = 3, std::size_t C = 8) {
    auto [tr, te] = data::make_blobs_split(120, 60, 3, 4, 0.2, 1);
    Setup s{data::split_pool(tr, te, 12, 2), nn::ModelConfig{4, {6}, 3}, {}};
    s.cfg.iterations = T;
    s.cfg.candidates_per_iter = C;
    s.cfg.optimizer = nn::OptimizerConfig{3, 8, 0.2};
    s.cfg.schedule = attacks::default_schedule(0.1);
    return s;
}

}  // namespace

TEST(Loop, RecordsShapeAndLabelCounts) {
    auto s = small(5, 8);
    const auto out = loop::run_roal(s.pool, s.model, s.cfg, 3);
    ASSERT_EQ(out.records.size(), 5u);
    const char* names[] = {"PGD", "Jitter", "FAB", "VNI", "PGDL2"};
    for (std::size_t t = 0; t < 5; ++t) {
        const auto& r = out.records[t];
        EXPECT_EQ(r.iteration, t + 1);
        EXPECT_EQ(r.attack, names[t]);
        EXPECT_EQ(r.labeled_count, 12 + (t + 1) * 8);
        EXPECT_EQ(r.seed, 3u);
        EXPECT_GE(r.clean_accuracy, 0.0);
        EXPECT_LE(r.robust_accuracy, 1.0);
        EXPECT_EQ(r.previous_attack_robust_accuracy.has_value(), t > 0);
    }
    EXPECT_EQ(out.pool.labeled_indices().size(), 52u);
    EXPECT_EQ(out.pool.adversarial_store().size(), 40u);
    EXPECT_EQ(out.trajectory.size(), 5u);
}

TEST(Loop, StagesRunInOrder) {
    auto s = small(2, 4);
    std::vector<std::pair<loop::Stage, std::size_t>> seen;
    (void)loop::run_roal(s.pool, s.model, s.cfg, 1, [&](loop::Stage st, std::size_t t) { seen.emplace_back(st, t); });
    using S = loop::Stage;
    const std::vector<S> per_iter{S::train, S::select, S::label, S::consolidate, S::schedule, S::craft, S::evaluate, S::bookkeeping};
    ASSERT_EQ(seen.size(), 2 * per_iter.size());
    for (std::size_t i = 0; i < seen.size(); ++i) {
        EXPECT_EQ(seen[i].first, per_iter[i % per_iter.size()]) << loop::stage_name(seen[i].first);
        EXPECT_EQ(seen[i].second, 1 + i / per_iter.size());
    }
}

TEST(Loop, DeterministicPerSeed) {
    auto s = small();
    const auto a = loop::run_roal(s.pool, s.model, s.cfg, 9);
    const auto b = loop::run_roal(s.pool, s.model, s.cfg, 9);
    EXPECT_EQ(a.records, b.records);
    EXPECT_EQ(a.model, b.model);
    EXPECT_NE(a.model.params, loop::run_roal(s.pool, s.model, s.cfg, 10).model.params);
}

TEST(Loop, SingleIterationMatchesNoEwc) {
    auto s = small(1, 8);
    auto off = s.cfg;
    off.use_ewc = false;
    const auto a = loop::run_roal(s.pool, s.model, s.cfg, 4);
    const auto b = loop::run_roal(s.pool, s.model, off, 4);
    ASSERT_EQ(a.records.size(), 1u);
    EXPECT_EQ(a.records, b.records);
}

TEST(Loop, ZeroLambdaEqualsPenaltyRemoved) {
    auto s = small(4, 8);
    s.cfg.lambda = 0.0;
    auto off = s.cfg;
    off.use_ewc = false;
    EXPECT_EQ(loop::run_roal(s.pool, s.model, s.cfg, 5).records, loop::run_roal(s.pool, s.model, off, 5).records);
}

TEST(Loop, PositiveLambdaChangesTheTrajectory) {
    auto s = small(3, 8);
    auto zero = s.cfg;
    zero.lambda = 0.0;
    s.cfg.lambda = 50.0;
    EXPECT_NE(loop::run_roal(s.pool, s.model, s.cfg, 5).model.params, loop::run_roal(s.pool, s.model, zero, 5).model.params);
}

TEST(Loop, FrozenModelHasZeroForgetting) {
    auto s = small(4, 8);
    s.cfg.optimizer.learning_rate = 0.0;
    const auto out = loop::run_roal(s.pool, s.model, s.cfg, 6);
    for (double d : loop::forgetting_probe(out.records)) EXPECT_EQ(d, 0.0);
}

TEST(Loop, PreconditionsAreChecked) {
    auto s = small(50, 20);  // needs 1000 unlabeled examples, only 108 exist
    EXPECT_THROW(loop::run_roal(s.pool, s.model, s.cfg, 1), ConfigError);
    auto t = small();
    t.model.input_dim = 5;
    EXPECT_THROW(loop::run_roal(t.pool, t.model, t.cfg, 1), ConfigError);
    auto u = small();
    u.cfg.lambda = -1.0;
    EXPECT_THROW(loop::run_roal(u.pool, u.model, u.cfg, 1), ConfigError);
}

TEST(Loop, FullProtocolLabelBudget) {
    auto [tr, te] = data::make_blobs_split(2500, 50, 4, 4, 0.2, 1);
    auto pool = data::split_pool(tr, te, 400, 2);
    loop::LoopConfig cfg;  // T = 10, C = 200, lambda = 0.5
    cfg.optimizer = nn::OptimizerConfig{1, 128, 0.1};
    cfg.adversarial_training = false;
    cfg.forgetting_probe = false;
    cfg.eval_cap = 20;
    for (auto& spec : cfg.schedule.sequence) spec.steps = 1;
    const auto out = loop::run_roal(pool, nn::ModelConfig{4, {}, 4}, cfg, 1);
    EXPECT_EQ(out.records.back().labeled_count, 2400u);
}

TEST(Baseline, EntropyBaselineEqualsZeroLambdaRun) {
    auto s = small(3, 8);
    auto roal_cfg = s.cfg;
    roal_cfg.lambda = 0.0;
    EXPECT_EQ(loop::run_baseline(s.pool, s.model, s.cfg, "entropy", 7).records,
              loop::run_roal(s.pool, s.model, roal_cfg, 7).records);
    EXPECT_THROW(loop::run_baseline(s.pool, s.model, s.cfg, "mcp", 7), ConfigError);
}

TEST(Baseline, AllStrategiesProduceMonotoneRecords) {
    for (auto strat : acquisition::kAllStrategies) {
        auto s = small(3, 6);
        s.cfg.acquisition.eer_pool_cap = 6;
        s.cfg.acquisition.mc_samples = 3;
        const auto out = loop::run_baseline(s.pool, s.model, s.cfg, strat, 2);
        ASSERT_EQ(out.records.size(), 3u) << acquisition::strategy_name(strat);
        for (std::size_t t = 1; t < 3; ++t) EXPECT_GT(out.records[t].labeled_count, out.records[t - 1].labeled_count);
    }
}

TEST(Baseline, RandomStrategyNeverScoresTheModelDuringSelection) {
    auto s = small(2, 6);
    s.cfg.acquisition.strategy = acquisition::Strategy::random;
    std::uint64_t at_train = 0, selection_calls = 0;
    (void)loop::run_roal(s.pool, s.model, s.cfg, 3, [&](loop::Stage st, std::size_t) {
        if (st == loop::Stage::train) at_train = nn::detail::forward_calls;
        if (st == loop::Stage::select) selection_calls += nn::detail::forward_calls - at_train;
    });
    EXPECT_EQ(selection_calls, 0u);
}

TEST(Loop, AttackFractionLimitsAugmentation) {
    auto s = small(2, 8);
    s.cfg.attack_fraction = 0.25;
    EXPECT_EQ(loop::run_roal(s.pool, s.model, s.cfg, 3).pool.adversarial_store().size(), 4u);
    s.cfg.adversarial_training = false;
    EXPECT_EQ(loop::run_roal(s.pool, s.model, s.cfg, 3).pool.adversarial_store().size(), 0u);
}
