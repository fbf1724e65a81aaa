#include "hmoe/error.hpp"
#include "hmoe/gradcheck.hpp"
#include "hmoe/model.hpp"
#include "hmoe/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace hmoe;

namespace {

ModelConfig tiny(std::size_t experts = 4, SizeStrategy strategy = SizeStrategy::kArithmetic)
{
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.h_input = 8;
    cfg.n_heads = 2;
    cfg.head_dim = 4;
    cfg.context_length = 8;
    cfg.experts = experts;
    cfg.budget_per_layer = 48;
    cfg.strategy = strategy;
    cfg.seed = 11;
    return cfg;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

const std::vector<std::int32_t> kTokens{72, 101, 108, 108, 111, 32, 119, 111, 114, 108, 100, 33, 10, 65, 66, 67};

} // namespace

TEST(ModelConfig, Defaults)
{
    const ModelConfig cfg;
    EXPECT_EQ(cfg.experts, 8u);
    EXPECT_EQ(cfg.k, 2);
    EXPECT_EQ(cfg.p, 0.6);
    EXPECT_EQ(cfg.coefficients.p_penalty, 0.1);
    EXPECT_EQ(cfg.coefficients.entropy, 0.03);
    EXPECT_EQ(cfg.coefficients.load_balance, 0.01);
    EXPECT_NO_THROW(cfg.validate());
}

TEST(ModelConfig, Invariants)
{
    auto bad = tiny();
    bad.head_dim = 3;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = tiny();
    bad.routing = RoutingMode::kTopK;
    bad.k = 5;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad.k = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = tiny();
    bad.p = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad.p = 1.2;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = tiny();
    bad.vocab_size = 100;
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_THROW(Model{bad}, ConfigError);
}

TEST(Model, ParameterCountClosedForm)
{
    for (auto cfg : {tiny(), tiny(1, SizeStrategy::kHomogeneous), ModelConfig{}}) {
        const Model m(cfg);
        const std::size_t V = cfg.vocab_size, C = cfg.context_length, h = cfg.h_input, L = cfg.n_layers,
                          N = cfg.experts, B = cfg.budget_per_layer;
        const std::size_t want = V * h + C * h + L * (2 * h + 4 * h * h + N * h + 3 * h * B) + h + V * h;
        EXPECT_EQ(m.parameter_count(), want);
        EXPECT_EQ(expected_parameter_count(cfg), want);
        std::size_t enumerated = 0;
        std::set<std::string> names;
        for (const auto& p : m.named_parameters()) {
            enumerated += p.tensor.numel();
            names.insert(p.name);
        }
        EXPECT_EQ(enumerated, want);
        EXPECT_EQ(names.size(), m.named_parameters().size());
    }
}

TEST(Model, DenseReduction)
{
    const auto cfg = tiny(1, SizeStrategy::kHomogeneous);
    const Model moe(cfg, FfnKind::kMoe);
    const Model dense(cfg, FfnKind::kDense);
    const auto a = values(moe.forward(kTokens, 2, 8).logits);
    const auto b = values(dense.forward(kTokens, 2, 8).logits);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_NEAR(a[i], b[i], 1e-10);
}

TEST(Model, DeterministicInit)
{
    EXPECT_EQ(values(Model(tiny()).forward(kTokens, 2, 8).logits), values(Model(tiny()).forward(kTokens, 2, 8).logits));
    auto other = tiny();
    other.seed = 12;
    EXPECT_NE(values(Model(tiny()).forward(kTokens, 2, 8).logits), values(Model(other).forward(kTokens, 2, 8).logits));
}

TEST(Model, Causality)
{
    const Model m(tiny());
    const std::size_t seq = 8, vocab = 256;
    const auto base = values(m.forward(kTokens, 2, seq).logits);
    for (std::size_t t = 0; t + 1 < seq; ++t) {
        auto changed = kTokens;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t s = t + 1; s < seq; ++s)
                changed[b * seq + s] = static_cast<std::int32_t>((changed[b * seq + s] * 7 + 3) % 256);
        const auto out = values(m.forward(changed, 2, seq).logits);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t s = 0; s <= t; ++s)
                for (std::size_t v = 0; v < vocab; ++v) {
                    const std::size_t i = (b * seq + s) * vocab + v;
                    ASSERT_EQ(out[i], base[i]) << "position " << s << " changed after editing > " << t;
                }
    }
}

TEST(Model, ForwardRejectsBadShapes)
{
    const Model m(tiny());
    EXPECT_THROW(m.forward(kTokens, 1, 16), DimensionError);
    EXPECT_THROW(m.forward(kTokens, 3, 8), DimensionError);
    const std::vector<std::int32_t> bad{1, 2, 300, 4};
    EXPECT_THROW(m.forward(bad, 1, 4), IndexError);
}

TEST(Model, EndToEndGradientCheck)
{
    for (auto routing : {RoutingMode::kTopP, RoutingMode::kTopK}) {
        ModelConfig cfg = tiny(2);
        cfg.n_layers = 1;
        cfg.context_length = 4;
        cfg.budget_per_layer = 12;
        cfg.routing = routing;
        cfg.k = 1;
        Model model(cfg);
        Batch batch;
        batch.batch = 1;
        batch.seq = 4;
        batch.inputs = {3, 9, 27, 81};
        batch.targets = {9, 27, 81, 243};
        std::vector<Tensor> params;
        for (auto& p : model.named_parameters())
            params.push_back(p.tensor);
        EXPECT_LT(finite_diff_check([&] { return compute_objective(model, batch).aux.combined; }, params), 1e-3)
            << to_string(routing);
    }
}

TEST(Model, ForwardReportsEveryLayer)
{
    const Model m(tiny());
    const auto res = m.forward(kTokens, 2, 8);
    ASSERT_EQ(res.layers.size(), 2u);
    for (const auto& l : res.layers)
        EXPECT_EQ(l.decision.tokens(), 16u);
    EXPECT_EQ(res.logits.shape(), (Shape{16, 256}));
}
