#include "hmoe/model.hpp"

#include "hmoe/error.hpp"
#include "hmoe/ops.hpp"
#include "hmoe/rng.hpp"

#include <cmath>

namespace hmoe {

std::string to_string(BalanceLoss loss)
{
    return loss == BalanceLoss::kPPenalty ? "p_penalty" : "load_balance";
}

BalanceLoss parse_balance_loss(const std::string& text)
{
    if (text == "p_penalty")
        return BalanceLoss::kPPenalty;
    if (text == "load_balance")
        return BalanceLoss::kLoadBalance;
    throw ConfigError("unknown balance loss '" + text + "' (expected p_penalty or load_balance)");
}

void ModelConfig::validate() const
{
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (n_layers < 1)
        fail("n_layers must be >= 1");
    if (n_heads < 1 || head_dim < 1)
        fail("n_heads and head_dim must be >= 1");
    if (h_input != n_heads * head_dim)
        fail("h_input (" + std::to_string(h_input) + ") must equal n_heads * head_dim (" +
             std::to_string(n_heads * head_dim) + ")");
    if (vocab_size < 256)
        fail("vocab_size must cover the 256 byte values");
    if (context_length < 1)
        fail("context_length must be >= 1");
    if (experts < 1)
        fail("experts must be >= 1");
    if (budget_per_layer < experts)
        fail("budget_per_layer must be >= experts");
    if (routing == RoutingMode::kTopK && (k < 1 || static_cast<std::size_t>(k) > experts))
        fail("k must satisfy 1 <= k <= experts (k=" + std::to_string(k) + ", experts=" + std::to_string(experts) + ")");
    if (!(p > 0.0 && p <= 1.0))
        fail("p must lie in (0, 1]");
    if (coefficients.load_balance < 0.0 || coefficients.p_penalty < 0.0 || coefficients.entropy < 0.0)
        fail("loss coefficients must be non-negative");
    profile();
}

ObjectiveMode ModelConfig::objective_mode() const
{
    if (balance_loss == BalanceLoss::kLoadBalance)
        return ObjectiveMode::kBaseline;
    return routing == RoutingMode::kTopK ? ObjectiveMode::kTopK : ObjectiveMode::kTopP;
}

HeterogeneityProfile ModelConfig::profile() const
{
    return allocate_sizes(strategy, static_cast<std::int64_t>(experts), static_cast<std::int64_t>(budget_per_layer),
                          custom_sizes);
}

namespace {

std::uint64_t param_seed(std::uint64_t seed, const std::string& name) { return mix_seed(seed ^ fnv1a(name)); }

Tensor normal_param(std::uint64_t seed, const std::string& name, Shape shape, double stddev)
{
    Rng rng(param_seed(seed, name));
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v)
        x = rng.normal() * stddev;
    return Tensor::from(std::move(shape), std::move(v), true);
}

std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

} // namespace

Model::Model(ModelConfig cfg, FfnKind ffn) : cfg_(std::move(cfg)), ffn_(ffn)
{
    cfg_.validate();
    profile_ = cfg_.profile();
    const std::size_t h = cfg_.h_input;
    const std::uint64_t seed = cfg_.seed;
    const double attn_std = std::sqrt(1.0 / static_cast<double>(h));
    tok_emb_ = normal_param(seed, "tok_emb", {cfg_.vocab_size, h}, 0.02);
    pos_emb_ = normal_param(seed, "pos_emb", {cfg_.context_length, h}, 0.02);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const auto pre = layer_prefix(l);
        Block b;
        b.attn_norm = Tensor::full({h}, 1.0, true);
        b.wq = normal_param(seed, pre + "wq", {h, h}, attn_std);
        b.wk = normal_param(seed, pre + "wk", {h, h}, attn_std);
        b.wv = normal_param(seed, pre + "wv", {h, h}, attn_std);
        b.wo = normal_param(seed, pre + "wo", {h, h}, attn_std);
        b.ffn_norm = Tensor::full({h}, 1.0, true);
        const std::uint64_t moe_seed = param_seed(seed, pre + "moe");
        if (ffn_ == FfnKind::kMoe) {
            b.moe = new_hmoe_layer(h, profile_, moe_seed);
        } else {
            // Same stream as expert 0 of the MoE build so N=1 models coincide.
            b.dense = new_expert(static_cast<std::int64_t>(h), static_cast<std::int64_t>(cfg_.budget_per_layer),
                                 mix_seed(moe_seed ^ fnv1a("expert.0")), 0);
        }
        blocks_.push_back(std::move(b));
    }
    final_norm_ = Tensor::full({h}, 1.0, true);
    lm_head_ = normal_param(seed, "lm_head", {cfg_.vocab_size, h}, 0.02);
}

ForwardResult Model::forward(std::span<const std::int32_t> tokens, std::size_t batch, std::size_t seq) const
{
    if (seq < 1 || seq > cfg_.context_length)
        throw DimensionError("sequence length " + std::to_string(seq) + " outside [1, " +
                             std::to_string(cfg_.context_length) + "]");
    if (tokens.size() != batch * seq)
        throw DimensionError("got " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(batch) +
                             " x seq " + std::to_string(seq));
    std::vector<std::int32_t> positions(batch * seq);
    for (std::size_t i = 0; i < positions.size(); ++i)
        positions[i] = static_cast<std::int32_t>(i % seq);

    ForwardResult result;
    Tensor x = ops::add(ops::embedding(tok_emb_, tokens), ops::embedding(pos_emb_, positions));
    for (const auto& b : blocks_) {
        Tensor h = ops::rms_norm(x, b.attn_norm);
        Tensor att = ops::causal_attention(ops::linear(h, b.wq), ops::linear(h, b.wk), ops::linear(h, b.wv), batch,
                                           seq, cfg_.n_heads);
        x = ops::add(x, ops::linear(att, b.wo));
        Tensor h2 = ops::rms_norm(x, b.ffn_norm);
        if (b.dense) {
            x = ops::add(x, expert_forward(*b.dense, h2));
        } else {
            MoeResult moe = moe_forward(b.moe, h2, cfg_.routing, cfg_.k_or_p());
            x = ops::add(x, moe.output);
            result.layers.push_back(std::move(moe));
        }
    }
    result.logits = ops::linear(ops::rms_norm(x, final_norm_), lm_head_);
    return result;
}

std::vector<NamedTensor> Model::named_parameters() const
{
    std::vector<NamedTensor> out;
    out.push_back({"tok_emb", tok_emb_});
    out.push_back({"pos_emb", pos_emb_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const auto pre = layer_prefix(l);
        const auto& b = blocks_[l];
        out.push_back({pre + "attn_norm", b.attn_norm});
        out.push_back({pre + "wq", b.wq});
        out.push_back({pre + "wk", b.wk});
        out.push_back({pre + "wv", b.wv});
        out.push_back({pre + "wo", b.wo});
        out.push_back({pre + "ffn_norm", b.ffn_norm});
        if (b.dense) {
            out.push_back({pre + "ffn.w_gate", b.dense->w_gate});
            out.push_back({pre + "ffn.w_proj", b.dense->w_proj});
            out.push_back({pre + "ffn.w_out", b.dense->w_out});
        } else {
            out.push_back({pre + "moe.router", b.moe.router.weight});
            for (std::size_t i = 0; i < b.moe.experts.size(); ++i) {
                const auto ep = pre + "moe.experts." + std::to_string(i) + ".";
                out.push_back({ep + "w_gate", b.moe.experts[i].w_gate});
                out.push_back({ep + "w_proj", b.moe.experts[i].w_proj});
                out.push_back({ep + "w_out", b.moe.experts[i].w_out});
            }
        }
    }
    out.push_back({"final_norm", final_norm_});
    out.push_back({"lm_head", lm_head_});
    return out;
}

std::size_t Model::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& p : named_parameters())
        n += p.tensor.numel();
    return n;
}

void Model::zero_grad()
{
    for (auto& p : named_parameters())
        p.tensor.zero_grad();
}

std::size_t expected_parameter_count(const ModelConfig& cfg)
{
    const std::size_t h = cfg.h_input;
    const std::size_t per_layer = 2 * h + 4 * h * h + cfg.experts * h + 3 * h * cfg.budget_per_layer;
    return cfg.vocab_size * h + cfg.context_length * h + cfg.n_layers * per_layer + h + cfg.vocab_size * h;
}

} // namespace hmoe
