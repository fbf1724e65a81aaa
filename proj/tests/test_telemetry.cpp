#include "oracles.hpp"

#include "hmoe/error.hpp"
#include "hmoe/ops.hpp"
#include "hmoe/telemetry.hpp"

#include "json.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

using namespace hmoe;
namespace fs = std::filesystem;

namespace {

Tensor probs_for(std::mt19937_64& rng, std::size_t tokens, std::size_t n)
{
    std::vector<double> v(tokens * n);
    for (auto& x : v)
        x = std::uniform_real_distribution<double>(-2, 2)(rng);
    return ops::softmax(Tensor::from({tokens, n}, v));
}

Histogram random_hist(std::mt19937_64& rng, std::size_t v, std::size_t total)
{
    Histogram h(v, 0);
    for (std::size_t i = 0; i < total; ++i)
        ++h[rng() % v];
    return h;
}

std::string read_all(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

fs::path temp_dir(const std::string& tag)
{
    const auto p = fs::temp_directory_path() / ("hmoe_tel_" + std::to_string(::getpid()) + "_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

TelemetryRecord sample_record(std::int64_t step, std::size_t layers, std::size_t experts)
{
    TelemetryRecord r;
    r.step = step;
    r.tokens = 8;
    r.lm_loss = 2.5 - 0.1 * static_cast<double>(step);
    r.cum_flops = 1e6 * static_cast<double>(step + 1);
    for (std::size_t l = 0; l < layers; ++l) {
        LayerTelemetry lt;
        for (std::size_t e = 0; e < experts; ++e) {
            lt.sizes.push_back(10 + e);
            lt.activation_counts.push_back(e + l);
            lt.gate_sums.push_back(0.5 * static_cast<double>(e + l));
            lt.evaluations.push_back(e + l);
            lt.activated_params.push_back(3.0 * static_cast<double>(e));
        }
        r.layers.push_back(lt);
    }
    return r;
}

} // namespace

TEST(ActivatedParams, PaperScaleArithmetic)
{
    HeterogeneityProfile prof;
    prof.h_ffn = {864, 2208};
    const auto d = select_top_k(Tensor::from({1, 2}, {0.5, 0.5}), 2);
    const auto a = activated_params(d, prof, 768);
    EXPECT_EQ(a.per_token[0], 7077888.0);
    EXPECT_EQ(a.mean, 7077888.0);
}

TEST(ActivatedParams, HomogeneousTopKConstant)
{
    std::mt19937_64 rng(1);
    HeterogeneityProfile prof;
    prof.h_ffn.assign(6, 20);
    const auto a = activated_params(select_top_k(probs_for(rng, 9, 6), 3), prof, 5);
    for (double v : a.per_token)
        EXPECT_EQ(v, 3.0 * 5 * 20 * 3);
}

TEST(ActivatedParams, MeanMatchesEnumeration)
{
    std::mt19937_64 rng(2);
    HeterogeneityProfile prof;
    prof.h_ffn = {3, 5, 8, 13};
    const auto d = select_top_p(probs_for(rng, 25, 4), 0.6);
    double total = 0.0;
    for (const auto& act : d.activated)
        for (auto e : act)
            total += 3.0 * 7.0 * static_cast<double>(prof.h_ffn[e]);
    EXPECT_NEAR(activated_params(d, prof, 7).mean, total / 25.0, 1e-9);
}

TEST(Flops, DoublingExpertSizesDoublesExpertTerm)
{
    std::mt19937_64 rng(3);
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.experts = 4;
    HeterogeneityProfile a, b;
    a.h_ffn = {10, 20, 30, 40};
    b.h_ffn = {20, 40, 60, 80};
    const std::vector<RoutingDecision> d{select_top_p(probs_for(rng, 6, 4), 0.6)};
    const double dense = 2.0 * static_cast<double>(dense_matmul_params(cfg));
    const auto fa = flops_per_token(d, a, cfg);
    const auto fb = flops_per_token(d, b, cfg);
    for (std::size_t t = 0; t < 6; ++t)
        EXPECT_DOUBLE_EQ(fb.per_token[t] - dense, 2.0 * (fa.per_token[t] - dense));
}

TEST(Flops, DenseSingleExpertClosedForm)
{
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.h_input = 16;
    cfg.experts = 1;
    cfg.vocab_size = 256;
    HeterogeneityProfile prof;
    prof.h_ffn = {40};
    std::vector<RoutingDecision> d(2, select_top_k(Tensor::full({3, 1}, 1.0), 1));
    const auto f = flops_per_token(d, prof, cfg);
    const double matmul_params = 2 * (4 * 16 * 16 + 1 * 16 + 3 * 16 * 40) + 256 * 16;
    for (double v : f.per_token)
        EXPECT_EQ(v, 2.0 * matmul_params);
    EXPECT_EQ(f.training_total, 3.0 * 3.0 * 2.0 * matmul_params);
}

TEST(Flops, MatchesEnumeration)
{
    std::mt19937_64 rng(4);
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.h_input = 12;
    cfg.experts = 5;
    HeterogeneityProfile prof;
    prof.h_ffn = {2, 4, 6, 8, 10};
    std::vector<RoutingDecision> d;
    for (int l = 0; l < 3; ++l)
        d.push_back(select_top_p(probs_for(rng, 7, 5), 0.5));
    const auto f = flops_per_token(d, prof, cfg);
    for (std::size_t t = 0; t < 7; ++t) {
        double want = 2.0 * (3.0 * (4 * 144 + 5 * 12) + 256.0 * 12);
        for (const auto& layer : d)
            for (auto e : layer.activated[t])
                want += 2.0 * 3.0 * 12.0 * static_cast<double>(prof.h_ffn[e]);
        EXPECT_DOUBLE_EQ(f.per_token[t], want);
    }
}

TEST(Wasserstein, Examples)
{
    const Histogram a{0, 4, 4, 0};
    EXPECT_EQ(wasserstein_1d(a, a), 0.0);
    EXPECT_DOUBLE_EQ(wasserstein_1d({5, 0, 0, 0}, {0, 0, 0, 2}), 3.0);
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = random_hist(rng, 40, 100), y = random_hist(rng, 40, 57);
        EXPECT_NEAR(wasserstein_1d(x, y), oracle::w1(x, y), 1e-10);
    }
    EXPECT_TRUE(std::isnan(wasserstein_1d({0, 0}, {1, 0})));
}

TEST(SmoothedKl, Examples)
{
    std::mt19937_64 rng(6);
    const auto x = random_hist(rng, 30, 80);
    EXPECT_EQ(smoothed_kl(x, x), 0.0);
    for (int trial = 0; trial < 30; ++trial) {
        const auto p = random_hist(rng, 30, 1 + rng() % 60), q = random_hist(rng, 30, 1 + rng() % 60);
        const double kl = smoothed_kl(p, q);
        EXPECT_GE(kl, 0.0);
        EXPECT_NEAR(kl, oracle::smoothed_kl(p, q, 1e-6), 1e-10);
    }
}

TEST(Matrices, SymmetryAndDiagonals)
{
    std::mt19937_64 rng(7);
    std::vector<Histogram> hs;
    for (int e = 0; e < 5; ++e)
        hs.push_back(random_hist(rng, 64, 20 + rng() % 50));
    hs.push_back(Histogram(64, 0));
    const Matrix sim = expert_similarity_matrix(hs);
    const Matrix syn = expert_synergy_matrix(hs);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(sim(i, i), 0.0);
        EXPECT_EQ(syn(i, i), 0.0);
        for (std::size_t j = 0; j < 6; ++j) {
            if (i == j)
                continue;
            if (i == 5 || j == 5) {
                EXPECT_TRUE(std::isnan(sim(i, j)));
                EXPECT_TRUE(std::isnan(syn(i, j)));
                continue;
            }
            EXPECT_LT(std::abs(sim(i, j) - sim(j, i)), 1e-12);
            EXPECT_GE(syn(i, j), 0.0);
        }
    }
}

TEST(TokenRatios, OneHotAndNormalized)
{
    std::vector<TokenActivation> toks;
    for (int i = 0; i < 4; ++i)
        toks.push_back({7, 1.0, {{2}}});
    toks.push_back({9, 2.0, {{0, 1}}});
    const TokenClass seven{"seven", [](const TokenActivation& t) { return t.token == 7; }};
    EXPECT_EQ(token_activation_ratios(toks, seven, 0, 3), (std::vector<double>{0.0, 0.0, 1.0}));
    const TokenClass all{"all", [](const TokenActivation&) { return true; }};
    const auto r = token_activation_ratios(toks, all, 0, 3);
    EXPECT_NEAR(r[0] + r[1] + r[2], 1.0, 1e-15);
    EXPECT_NEAR(r[2], 4.0 / 6.0, 1e-15);
}

TEST(TokenRatios, MatchesLoopCounting)
{
    std::mt19937_64 rng(8);
    std::vector<TokenActivation> toks;
    for (int i = 0; i < 200; ++i) {
        TokenActivation t{static_cast<std::int32_t>(rng() % 50), 0.0, {{}}};
        const std::size_t k = 1 + rng() % 3;
        std::set<std::size_t> chosen;
        while (chosen.size() < k)
            chosen.insert(rng() % 6);
        t.experts[0].assign(chosen.begin(), chosen.end());
        toks.push_back(t);
    }
    const TokenClass even{"even", [](const TokenActivation& t) { return t.token % 2 == 0; }};
    std::vector<double> counts(6, 0.0);
    double total = 0.0;
    for (const auto& t : toks)
        if (t.token % 2 == 0)
            for (auto e : t.experts[0]) {
                counts[e] += 1.0;
                total += 1.0;
            }
    const auto r = token_activation_ratios(toks, even, 0, 6);
    for (std::size_t e = 0; e < 6; ++e)
        EXPECT_NEAR(r[e], counts[e] / total, 1e-15);
}

TEST(TokenRatios, NoMatchNamesClass)
{
    const std::vector<TokenActivation> toks{{1, 0.0, {{0}}}};
    const TokenClass none{"digits", [](const TokenActivation& t) { return t.token >= '0' && t.token <= '9'; }};
    try {
        token_activation_ratios(toks, none, 0, 2);
        FAIL();
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("digits"), std::string::npos);
    }
}

TEST(DifficultyClasses, QuartilesAndRatiosInRange)
{
    std::mt19937_64 rng(9);
    std::vector<TokenActivation> toks;
    for (int i = 0; i < 100; ++i)
        toks.push_back({static_cast<std::int32_t>(i), static_cast<double>(i), {{rng() % 3}, {rng() % 3, 2}}});
    const std::vector<std::vector<std::size_t>> sizes{{1, 2, 3}, {1, 2, 3}};
    const auto classes = difficulty_classes(toks, sizes, 4);
    ASSERT_EQ(classes.size(), 3u);
    EXPECT_EQ(classes[0].name, "all");
    EXPECT_EQ(classes[0].tokens, 100u);
    EXPECT_EQ(classes[1].tokens, 25u);
    EXPECT_EQ(classes[2].tokens, 25u);
    for (const auto& c : classes)
        for (const auto& layer : c.ratios) {
            double s = 0.0;
            for (double r : layer) {
                EXPECT_GE(r, 0.0);
                EXPECT_LE(r, 1.0);
                s += r;
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
}

TEST(Export, EmptyStream)
{
    const auto dir = temp_dir("empty");
    export_report({}, {}, "[model]\n", dir);
    EXPECT_EQ(read_all(dir / "telemetry.csv"), std::string(kTelemetryCsvHeader) + "\n");
    const auto j = nlohmann::json::parse(read_all(dir / "telemetry.json"));
    EXPECT_EQ(j["format_version"], kTelemetryFormatVersion);
    EXPECT_TRUE(j["steps"].empty());
    EXPECT_TRUE(j["analysis"].empty());
    fs::remove_all(dir);
}

TEST(Export, RowCountAndDeterminism)
{
    const auto dir = temp_dir("rows");
    std::vector<TelemetryRecord> recs;
    for (int s = 0; s < 5; ++s)
        recs.push_back(sample_record(s, 2, 3));
    std::mt19937_64 rng(10);
    std::vector<std::vector<Histogram>> hist(2);
    for (auto& layer : hist)
        for (int e = 0; e < 3; ++e)
            layer.push_back(random_hist(rng, 16, 30));
    const auto report = analyze_histograms(hist, {{10, 11, 12}, {10, 11, 12}}, "unit");
    export_report(recs, {report}, "[model]\nexperts = 3\n", dir);
    const std::string csv = read_all(dir / "telemetry.csv");
    const std::string json = read_all(dir / "telemetry.json");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 5 * 2 * 3);
    export_report(recs, {report}, "[model]\nexperts = 3\n", dir);
    EXPECT_EQ(read_all(dir / "telemetry.csv"), csv);
    EXPECT_EQ(read_all(dir / "telemetry.json"), json);

    const auto j = nlohmann::json::parse(json);
    EXPECT_EQ(j["steps"].size(), 5u);
    EXPECT_EQ(j["analysis"][0]["layers"][0]["similarity"].size(), 3u);
    fs::remove_all(dir);
}

TEST(Export, CsvRowValues)
{
    const auto dir = temp_dir("vals");
    export_report({sample_record(4, 1, 2)}, {}, "", dir);
    const std::string csv = read_all(dir / "telemetry.csv");
    EXPECT_NE(csv.find("\n4,0,1,11,1,0.5,3," + format_double(5e6) + "\n"), std::string::npos) << csv;
    fs::remove_all(dir);
}

TEST(Export, UnwritableDirectory)
{
    EXPECT_THROW(export_report({}, {}, "", "/proc/definitely/not/writable"), IoError);
}
