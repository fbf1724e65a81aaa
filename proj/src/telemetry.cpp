#include "hmoe/telemetry.hpp"

#include "hmoe/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace hmoe {

namespace {

constexpr double kNoData = std::numeric_limits<double>::quiet_NaN();

double total_count(const Histogram& h)
{
    return static_cast<double>(std::accumulate(h.begin(), h.end(), std::uint64_t{0}));
}

} // namespace

ActivatedParams activated_params(const RoutingDecision& decision, const HeterogeneityProfile& profile,
                                 std::size_t h_input)
{
    if (decision.experts() != profile.experts())
        throw ContractError("activated_params: decision covers " + std::to_string(decision.experts()) +
                            " experts, profile " + std::to_string(profile.experts()));
    ActivatedParams out;
    out.per_token.resize(decision.tokens());
    double total = 0.0;
    for (std::size_t t = 0; t < decision.tokens(); ++t) {
        std::size_t params = 0;
        for (auto e : decision.activated[t])
            params += expert_param_count(h_input, profile.h_ffn[e]);
        out.per_token[t] = static_cast<double>(params);
        total += out.per_token[t];
    }
    out.mean = decision.tokens() ? total / static_cast<double>(decision.tokens()) : 0.0;
    return out;
}

std::size_t dense_matmul_params(const ModelConfig& cfg)
{
    const std::size_t h = cfg.h_input;
    return cfg.n_layers * (4 * h * h + cfg.experts * h) + cfg.vocab_size * h;
}

FlopsEstimate flops_per_token(std::span<const RoutingDecision> decisions, const HeterogeneityProfile& profile,
                              const ModelConfig& cfg)
{
    FlopsEstimate out;
    if (decisions.empty())
        return out;
    const std::size_t tokens = decisions.front().tokens();
    const double dense = 2.0 * static_cast<double>(dense_matmul_params(cfg));
    out.per_token.assign(tokens, dense);
    for (const auto& d : decisions) {
        if (d.tokens() != tokens)
            throw ContractError("flops_per_token: layers routed different token counts");
        const auto act = activated_params(d, profile, cfg.h_input);
        for (std::size_t t = 0; t < tokens; ++t)
            out.per_token[t] += 2.0 * act.per_token[t];
    }
    double total = 0.0;
    for (double f : out.per_token)
        total += f;
    out.mean = tokens ? total / static_cast<double>(tokens) : 0.0;
    out.training_total = kTrainingFlopsMultiplier * total;
    return out;
}

LayerTelemetry layer_telemetry(const MoeResult& moe, const HeterogeneityProfile& profile, std::size_t h_input,
                               std::span<const std::int32_t> token_ids, std::size_t vocab)
{
    const auto& d = moe.decision;
    const std::size_t n = d.experts();
    LayerTelemetry lt;
    lt.sizes = profile.h_ffn;
    lt.activation_counts.assign(n, 0);
    lt.gate_sums.assign(n, 0.0);
    lt.evaluations.assign(moe.expert_evaluations.begin(), moe.expert_evaluations.end());
    const bool histo = !token_ids.empty();
    if (histo) {
        if (token_ids.size() != d.tokens())
            throw ContractError("layer_telemetry: token ids do not match routed rows");
        lt.histograms.assign(n, Histogram(vocab, 0));
    }
    for (std::size_t t = 0; t < d.tokens(); ++t)
        for (auto e : d.activated[t]) {
            ++lt.activation_counts[e];
            lt.gate_sums[e] += d.gate(t, e);
            if (histo)
                ++lt.histograms[e][static_cast<std::size_t>(token_ids[t])];
        }
    lt.activated_params.resize(n);
    const double tokens = static_cast<double>(std::max<std::size_t>(d.tokens(), 1));
    for (std::size_t e = 0; e < n; ++e) {
        lt.activated_params[e] = static_cast<double>(lt.activation_counts[e]) *
                                 static_cast<double>(expert_param_count(h_input, profile.h_ffn[e])) / tokens;
        lt.mean_activated_params += lt.activated_params[e];
    }
    return lt;
}

double wasserstein_1d(const Histogram& a, const Histogram& b)
{
    if (a.size() != b.size())
        throw DimensionError("wasserstein_1d: histogram lengths differ");
    const double ta = total_count(a), tb = total_count(b);
    if (ta == 0.0 || tb == 0.0)
        return kNoData;
    double ca = 0.0, cb = 0.0, dist = 0.0;
    for (std::size_t i = 0; i + 1 < a.size(); ++i) {
        ca += static_cast<double>(a[i]) / ta;
        cb += static_cast<double>(b[i]) / tb;
        dist += std::abs(ca - cb);
    }
    return dist;
}

double smoothed_kl(const Histogram& a, const Histogram& b, double eps)
{
    if (a.size() != b.size())
        throw DimensionError("smoothed_kl: histogram lengths differ");
    const double ta = total_count(a), tb = total_count(b);
    if (ta == 0.0 || tb == 0.0)
        return kNoData;
    const double norm = 1.0 + eps * static_cast<double>(a.size());
    double kl = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double p = (static_cast<double>(a[i]) / ta + eps) / norm;
        const double q = (static_cast<double>(b[i]) / tb + eps) / norm;
        kl += p * std::log(p / q);
    }
    return std::max(kl, 0.0);
}

Matrix expert_similarity_matrix(const std::vector<Histogram>& histograms)
{
    Matrix m{histograms.size(), std::vector<double>(histograms.size() * histograms.size(), 0.0)};
    for (std::size_t i = 0; i < m.n; ++i)
        for (std::size_t j = i + 1; j < m.n; ++j) {
            const double d = wasserstein_1d(histograms[i], histograms[j]);
            m(i, j) = d;
            m(j, i) = d;
        }
    return m;
}

Matrix expert_synergy_matrix(const std::vector<Histogram>& histograms, double eps)
{
    Matrix m{histograms.size(), std::vector<double>(histograms.size() * histograms.size(), 0.0)};
    for (std::size_t i = 0; i < m.n; ++i)
        for (std::size_t j = 0; j < m.n; ++j)
            if (i != j)
                m(i, j) = smoothed_kl(histograms[i], histograms[j], eps);
    return m;
}

std::vector<double> token_activation_ratios(std::span<const TokenActivation> tokens, const TokenClass& cls,
                                            std::size_t layer, std::size_t experts)
{
    std::vector<double> counts(experts, 0.0);
    std::size_t matched = 0;
    double total = 0.0;
    for (const auto& tok : tokens) {
        if (!cls.matches(tok))
            continue;
        ++matched;
        if (layer >= tok.experts.size())
            throw ContractError("token_activation_ratios: layer " + std::to_string(layer) + " not recorded");
        for (auto e : tok.experts[layer]) {
            counts.at(e) += 1.0;
            total += 1.0;
        }
    }
    if (matched == 0)
        throw ContractError("token_activation_ratios: no tokens match class '" + cls.name + "'");
    for (auto& c : counts)
        c /= total;
    return counts;
}

AnalysisReport analyze_histograms(const std::vector<std::vector<Histogram>>& histograms,
                                  const std::vector<std::vector<std::size_t>>& sizes, std::string source)
{
    AnalysisReport r;
    r.source = std::move(source);
    for (std::size_t l = 0; l < histograms.size(); ++l) {
        LayerAnalysis la;
        la.layer = l;
        la.sizes = sizes.at(l);
        for (const auto& h : histograms[l])
            la.expert_tokens.push_back(static_cast<std::uint64_t>(total_count(h)));
        la.similarity = expert_similarity_matrix(histograms[l]);
        la.synergy = expert_synergy_matrix(histograms[l]);
        r.layers.push_back(std::move(la));
    }
    return r;
}

std::vector<ClassReport> difficulty_classes(std::span<const TokenActivation> tokens,
                                            const std::vector<std::vector<std::size_t>>& sizes, std::size_t h_input)
{
    std::vector<ClassReport> out;
    if (tokens.empty())
        return out;
    std::vector<double> nll;
    nll.reserve(tokens.size());
    for (const auto& t : tokens)
        nll.push_back(t.nll);
    std::sort(nll.begin(), nll.end());
    const double q1 = nll[(nll.size() - 1) / 4];
    const double q3 = nll[nll.size() - 1 - (nll.size() - 1) / 4];
    const std::vector<TokenClass> classes{
        {"all", [](const TokenActivation&) { return true; }},
        {"easy", [q1](const TokenActivation& t) { return t.nll <= q1; }},
        {"hard", [q3](const TokenActivation& t) { return t.nll >= q3; }},
    };
    for (const auto& cls : classes) {
        ClassReport cr;
        cr.name = cls.name;
        cr.tokens = static_cast<std::size_t>(std::count_if(tokens.begin(), tokens.end(), cls.matches));
        if (cr.tokens == 0)
            continue;
        for (std::size_t l = 0; l < sizes.size(); ++l) {
            const auto& sz = sizes[l];
            cr.ratios.push_back(token_activation_ratios(tokens, cls, l, sz.size()));
            double total_params = 0.0;
            for (auto h : sz)
                total_params += static_cast<double>(expert_param_count(h_input, h));
            double activated = 0.0;
            for (const auto& t : tokens)
                if (cls.matches(t))
                    for (auto e : t.experts[l])
                        activated += static_cast<double>(expert_param_count(h_input, sz[e]));
            cr.activated_param_ratio.push_back(activated / (static_cast<double>(cr.tokens) * total_params));
        }
        out.push_back(std::move(cr));
    }
    return out;
}

std::string format_double(double v)
{
    if (std::isnan(v))
        return "nan";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

nlohmann::json matrix_json(const Matrix& m)
{
    auto rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.n; ++i) {
        auto row = nlohmann::json::array();
        for (std::size_t j = 0; j < m.n; ++j) {
            const double v = m(i, j);
            row.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

nlohmann::json report_json(const AnalysisReport& r)
{
    nlohmann::json j;
    j["source"] = r.source;
    j["layers"] = nlohmann::json::array();
    for (const auto& la : r.layers) {
        nlohmann::json l;
        l["layer"] = la.layer;
        l["sizes"] = la.sizes;
        l["expert_tokens"] = la.expert_tokens;
        l["similarity"] = matrix_json(la.similarity);
        l["synergy"] = matrix_json(la.synergy);
        j["layers"].push_back(std::move(l));
    }
    j["classes"] = nlohmann::json::array();
    for (const auto& c : r.classes) {
        nlohmann::json cj;
        cj["name"] = c.name;
        cj["tokens"] = c.tokens;
        cj["ratios"] = c.ratios;
        cj["activated_param_ratio"] = c.activated_param_ratio;
        j["classes"].push_back(std::move(cj));
    }
    return j;
}

void write_file(const std::filesystem::path& path, const std::string& content)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open " + path.string() + " for writing");
    out << content;
    if (!out)
        throw IoError("failed writing " + path.string());
}

} // namespace

void export_report(const std::vector<TelemetryRecord>& records, const std::vector<AnalysisReport>& reports,
                   const std::string& config_echo, const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec)
        throw IoError("cannot create " + dir.string() + ": " + ec.message());

    std::string csv = std::string(kTelemetryCsvHeader) + "\n";
    for (const auto& r : records)
        for (std::size_t l = 0; l < r.layers.size(); ++l) {
            const auto& lt = r.layers[l];
            for (std::size_t e = 0; e < lt.sizes.size(); ++e) {
                csv += std::to_string(r.step) + ',' + std::to_string(l) + ',' + std::to_string(e) + ',' +
                       std::to_string(lt.sizes[e]) + ',' + std::to_string(lt.activation_counts[e]) + ',' +
                       format_double(lt.mean_gate(e)) + ',' + format_double(lt.activated_params[e]) + ',' +
                       format_double(r.cum_flops) + '\n';
            }
        }
    write_file(dir / "telemetry.csv", csv);

    nlohmann::json j;
    j["format_version"] = kTelemetryFormatVersion;
    j["config"] = config_echo;
    j["steps"] = nlohmann::json::array();
    for (const auto& r : records) {
        nlohmann::json s;
        s["step"] = r.step;
        s["tokens"] = r.tokens;
        s["lm_loss"] = r.lm_loss;
        s["load_balance"] = r.lb;
        s["p_penalty"] = r.p_penalty;
        s["entropy"] = r.entropy;
        s["combined"] = r.combined;
        s["lr"] = r.lr;
        s["mean_activated_params"] = r.mean_activated_params;
        s["step_flops"] = r.step_flops;
        s["cum_flops"] = r.cum_flops;
        j["steps"].push_back(std::move(s));
    }
    j["analysis"] = nlohmann::json::array();
    for (const auto& rep : reports)
        j["analysis"].push_back(report_json(rep));
    write_file(dir / "telemetry.json", j.dump(1) + "\n");
}

} // namespace hmoe
