#include "oracles.hpp"

#include "hmoe/error.hpp"
#include "hmoe/gradcheck.hpp"
#include "hmoe/layer.hpp"
#include "hmoe/ops.hpp"

#include <gtest/gtest.h>

using namespace hmoe;

namespace {

Tensor random_input(std::mt19937_64& rng, std::size_t rows, std::size_t cols)
{
    std::vector<double> v(rows * cols);
    for (auto& x : v)
        x = std::uniform_real_distribution<double>(-2, 2)(rng);
    return Tensor::from({rows, cols}, v);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<double> dense_oracle(const HMoELayer& layer, const Tensor& x, const RoutingDecision& d)
{
    const std::size_t h = x.dim(1);
    std::vector<double> out(x.numel(), 0.0);
    for (std::size_t t = 0; t < x.dim(0); ++t) {
        std::vector<double> xt(x.data().begin() + static_cast<std::ptrdiff_t>(t * h),
                               x.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * h));
        for (std::size_t e = 0; e < layer.experts.size(); ++e) {
            const auto& ex = layer.experts[e];
            const auto y = oracle::expert(values(ex.w_gate), values(ex.w_proj), values(ex.w_out), h, ex.h_ffn, xt);
            for (std::size_t j = 0; j < h; ++j)
                out[t * h + j] += d.gate(t, e) * y[j];
        }
    }
    return out;
}

} // namespace

TEST(AllocateSizes, ArithmeticPaperBudget)
{
    const auto p = allocate_sizes(SizeStrategy::kArithmetic, 8, 12288);
    EXPECT_EQ(p.h_ffn, (std::vector<std::size_t>{864, 1056, 1248, 1440, 1632, 1824, 2016, 2208}));
    EXPECT_EQ(p.relative_sizes, (std::vector<std::size_t>{9, 11, 13, 15, 17, 19, 21, 23}));
}

TEST(AllocateSizes, Homogeneous)
{
    const auto p = allocate_sizes(SizeStrategy::kHomogeneous, 8, 12288);
    EXPECT_EQ(p.h_ffn, std::vector<std::size_t>(8, 1536));
}

TEST(AllocateSizes, Geometric)
{
    const auto p = allocate_sizes(SizeStrategy::kGeometric, 8, 2550);
    EXPECT_EQ(p.h_ffn, (std::vector<std::size_t>{10, 20, 40, 80, 160, 320, 640, 1280}));
}

TEST(AllocateSizes, Hybrid)
{
    EXPECT_EQ(relative_sizes(SizeStrategy::kHybrid, 8), (std::vector<std::size_t>{1, 1, 1, 1, 2, 2, 4, 4}));
    const auto p = allocate_sizes(SizeStrategy::kHybrid, 8, 1600);
    EXPECT_EQ(p.h_ffn, (std::vector<std::size_t>{100, 100, 100, 100, 200, 200, 400, 400}));
}

TEST(AllocateSizes, DeskArithmetic)
{
    const auto p = allocate_sizes(SizeStrategy::kArithmetic, 8, 1024);
    EXPECT_EQ(p.h_ffn, (std::vector<std::size_t>{72, 88, 104, 120, 136, 152, 168, 184}));
}

TEST(AllocateSizes, ResidualToLargest)
{
    // 100 * {1,1,1} / 3 rounds to 33 each; the last expert takes the extra unit.
    EXPECT_EQ(allocate_sizes(SizeStrategy::kHomogeneous, 3, 100).h_ffn, (std::vector<std::size_t>{33, 33, 34}));
}

TEST(AllocateSizes, BudgetConservationAndOrdering)
{
    for (auto strategy : {SizeStrategy::kGeometric, SizeStrategy::kArithmetic, SizeStrategy::kHybrid,
                          SizeStrategy::kHomogeneous}) {
        for (std::size_t n = 1; n <= 9; ++n) {
            std::size_t floor_budget = 0;
            for (auto r : relative_sizes(strategy, n))
                floor_budget += r;
            for (std::size_t b = floor_budget; b < floor_budget * 3 + 17; ++b) {
                const auto p = allocate_sizes(strategy, static_cast<std::int64_t>(n), static_cast<std::int64_t>(b));
                std::size_t sum = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    sum += p.h_ffn[i];
                    EXPECT_GE(p.h_ffn[i], 1u);
                    if (i)
                        EXPECT_LE(p.h_ffn[i - 1], p.h_ffn[i]) << to_string(strategy) << " n=" << n << " b=" << b;
                }
                EXPECT_EQ(sum, b) << to_string(strategy) << " n=" << n;
            }
        }
    }
}

TEST(AllocateSizes, Custom)
{
    const auto p = allocate_sizes(SizeStrategy::kCustom, 3, 60, {1, 2, 3});
    EXPECT_EQ(p.h_ffn, (std::vector<std::size_t>{10, 20, 30}));
    EXPECT_THROW(allocate_sizes(SizeStrategy::kCustom, 3, 60, {3, 2, 1}), ConfigError);
    EXPECT_THROW(allocate_sizes(SizeStrategy::kCustom, 3, 60, {1, 2}), ConfigError);
}

TEST(AllocateSizes, Errors)
{
    EXPECT_THROW(allocate_sizes(SizeStrategy::kHomogeneous, 8, 7), ConfigError);
    EXPECT_THROW(allocate_sizes(SizeStrategy::kHomogeneous, 0, 7), ConfigError);
    EXPECT_THROW(allocate_sizes(SizeStrategy::kGeometric, 8, 20), ConfigError);
}

TEST(MoeForward, SingleExpertIsDense)
{
    std::mt19937_64 rng(1);
    const auto layer = new_hmoe_layer(4, allocate_sizes(SizeStrategy::kHomogeneous, 1, 6), 3);
    const Tensor x = random_input(rng, 5, 4);
    for (auto mode : {RoutingMode::kTopK, RoutingMode::kTopP}) {
        const auto res = moe_forward(layer, x, mode, mode == RoutingMode::kTopK ? 1.0 : 0.6);
        EXPECT_EQ(values(res.output), values(expert_forward(layer.experts[0], x)));
        for (std::size_t t = 0; t < 5; ++t)
            EXPECT_EQ(res.decision.gate(t, 0), 1.0);
    }
}

TEST(MoeForward, ForcedEqualGatesAverage)
{
    std::mt19937_64 rng(2);
    const auto layer = new_hmoe_layer(3, allocate_sizes(SizeStrategy::kArithmetic, 2, 20), 4);
    const Tensor x = random_input(rng, 4, 3);
    const auto decision = select_top_k(Tensor::full({4, 2}, 0.5), 2);
    const auto res = moe_forward(layer, x, decision);
    const auto a = values(expert_forward(layer.experts[0], x));
    const auto b = values(expert_forward(layer.experts[1], x));
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_NEAR(res.output.data()[i], 0.5 * (a[i] + b[i]), 1e-10);
}

TEST(MoeForward, MatchesDenseOracle)
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 1 + rng() % 6;
        const auto strategy = static_cast<SizeStrategy>(rng() % 4);
        std::size_t floor_budget = 0;
        for (auto r : relative_sizes(strategy, n))
            floor_budget += r;
        const auto layer =
            new_hmoe_layer(5, allocate_sizes(strategy, static_cast<std::int64_t>(n),
                                             static_cast<std::int64_t>(floor_budget * (1 + rng() % 3))),
                           rng());
        const Tensor x = random_input(rng, 9, 5);
        const auto res = trial % 2 ? moe_forward(layer, x, RoutingMode::kTopK, std::min<double>(2.0, n))
                                   : moe_forward(layer, x, RoutingMode::kTopP, 0.6);
        const auto want = dense_oracle(layer, x, res.decision);
        for (std::size_t i = 0; i < want.size(); ++i)
            EXPECT_NEAR(res.output.data()[i], want[i], 1e-10);
    }
}

TEST(MoeForward, EvaluatesOnlyRoutedTokens)
{
    std::mt19937_64 rng(4);
    const auto layer = new_hmoe_layer(6, allocate_sizes(SizeStrategy::kArithmetic, 8, 160), 5);
    const Tensor x = random_input(rng, 30, 6);
    const auto res = moe_forward(layer, x, RoutingMode::kTopP, 0.6);
    std::size_t evals = 0, acts = 0;
    for (auto e : res.expert_evaluations)
        evals += e;
    for (const auto& a : res.decision.activated)
        acts += a.size();
    EXPECT_EQ(evals, acts);
    EXPECT_LT(evals, 30u * 8u);
}

TEST(MoeForward, GradientsReachOnlyActivatedExperts)
{
    std::mt19937_64 rng(5);
    const auto layer = new_hmoe_layer(4, allocate_sizes(SizeStrategy::kArithmetic, 6, 60), 6);
    const Tensor x = random_input(rng, 3, 4);
    // Force tokens onto experts {0, 2} and {2, 5}; 1, 3, 4 stay idle.
    std::vector<double> p(18, 0.0);
    p[0] = 0.6, p[2] = 0.4;
    p[6 + 2] = 0.5, p[6 + 5] = 0.5;
    p[12 + 0] = 0.9, p[12 + 1] = 0.1;
    const auto decision = select_top_p(Tensor::from({3, 6}, p), 0.8);
    for (const auto& e : layer.experts)
        for (auto w : e.parameters())
            w.zero_grad();
    backward(ops::sum(ops::mul(moe_forward(layer, x, decision).output, random_input(rng, 3, 4))));
    std::set<std::size_t> active;
    for (const auto& a : decision.activated)
        active.insert(a.begin(), a.end());
    for (std::size_t e = 0; e < 6; ++e) {
        double mag = 0.0;
        for (const auto& w : layer.experts[e].parameters())
            if (w.has_grad())
                for (double g : w.grad())
                    mag += std::abs(g);
        if (active.count(e))
            EXPECT_GT(mag, 0.0) << e;
        else
            EXPECT_EQ(mag, 0.0) << e;
    }
}

TEST(MoeForward, GradientCheckThroughRouter)
{
    std::mt19937_64 rng(6);
    const auto layer = new_hmoe_layer(3, allocate_sizes(SizeStrategy::kArithmetic, 3, 12), 7);
    const Tensor x = random_input(rng, 4, 3);
    const Tensor w = random_input(rng, 4, 3);
    const double err = finite_diff_check(
        [&] { return ops::sum(ops::mul(moe_forward(layer, x, RoutingMode::kTopK, 2).output, w)); }, layer.parameters());
    EXPECT_LT(err, 1e-4);
}

TEST(MoeForward, WidthMismatch)
{
    const auto layer = new_hmoe_layer(4, allocate_sizes(SizeStrategy::kHomogeneous, 2, 8), 1);
    EXPECT_THROW(moe_forward(layer, Tensor::zeros({2, 3}), RoutingMode::kTopK, 1), DimensionError);
}

TEST(LayerStats, CollapseAndConservation)
{
    const auto profile = allocate_sizes(SizeStrategy::kArithmetic, 3, 30);
    const auto collapse = select_top_k(Tensor::from({2, 3}, {0.8, 0.1, 0.1, 0.7, 0.2, 0.1}), 1);
    const auto s = layer_stats(collapse, profile);
    EXPECT_EQ(s.token_fraction, (std::vector<double>{1.0, 0.0, 0.0}));

    std::mt19937_64 rng(7);
    const auto layer = new_hmoe_layer(5, allocate_sizes(SizeStrategy::kArithmetic, 8, 160), 2);
    const auto res = moe_forward(layer, random_input(rng, 17, 5), RoutingMode::kTopK, 2);
    const auto stats = layer_stats(res.decision, layer.profile);
    double sum = 0.0;
    for (double t : stats.token_fraction)
        sum += t;
    EXPECT_NEAR(sum, 2.0, 1e-12);
}

TEST(LayerStats, MatchesLoopOracle)
{
    std::mt19937_64 rng(8);
    const auto layer = new_hmoe_layer(5, allocate_sizes(SizeStrategy::kGeometric, 5, 93), 3);
    const auto res = moe_forward(layer, random_input(rng, 11, 5), RoutingMode::kTopP, 0.6);
    const auto stats = layer_stats(res.decision, layer.profile);
    std::vector<std::vector<double>> probs(11);
    std::vector<std::set<std::size_t>> act;
    for (std::size_t t = 0; t < 11; ++t) {
        probs[t].assign(res.decision.probs.data().begin() + static_cast<std::ptrdiff_t>(t * 5),
                        res.decision.probs.data().begin() + static_cast<std::ptrdiff_t>(t * 5 + 5));
        act.emplace_back(res.decision.activated[t].begin(), res.decision.activated[t].end());
    }
    const auto want = oracle::accumulate(probs, act, layer.profile.h_ffn);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(stats.token_fraction[i], want.t[i], 1e-12);
        EXPECT_NEAR(stats.mean_prob.data()[i], want.phat[i], 1e-12);
        EXPECT_NEAR(stats.size_weighted[i], want.m[i], 1e-12);
    }
}

TEST(HMoELayer, HomogeneousMatchesConventionalMoe)
{
    const auto layer = new_hmoe_layer(6, allocate_sizes(SizeStrategy::kHomogeneous, 4, 40), 9);
    for (const auto& e : layer.experts)
        EXPECT_EQ(param_count(e), param_count(layer.experts[0]));
    std::mt19937_64 rng(10);
    const auto res = moe_forward(layer, random_input(rng, 12, 6), RoutingMode::kTopK, 2);
    const auto s = layer_stats(res.decision, layer.profile);
    EXPECT_LT(std::abs(p_penalty_loss(s, 4).item() - load_balance_loss(s, 4).item()), 1e-12);
}
