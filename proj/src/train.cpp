#include "hmoe/train.hpp"

#include "hmoe/checkpoint.hpp"
#include "hmoe/corpus.hpp"
#include "hmoe/error.hpp"
#include "hmoe/ops.hpp"
#include "hmoe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hmoe {

std::string to_string(LrSchedule s) { return s == LrSchedule::kConstant ? "constant" : "cosine"; }

LrSchedule parse_lr_schedule(const std::string& text)
{
    if (text == "constant")
        return LrSchedule::kConstant;
    if (text == "cosine")
        return LrSchedule::kCosine;
    throw ConfigError("unknown lr schedule '" + text + "' (expected constant or cosine)");
}

void TrainConfig::validate() const
{
    if (steps < 0)
        throw ConfigError("steps must be >= 0");
    if (batch_size < 1)
        throw ConfigError("batch_size must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr))
        throw ConfigError("lr must be a finite non-negative number");
    if (warmup_steps < 0)
        throw ConfigError("warmup_steps must be >= 0");
    if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0))
        throw ConfigError("min_lr_ratio must lie in [0, 1]");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        throw ConfigError("beta1 and beta2 must lie in [0, 1)");
    if (!(adam.eps > 0.0))
        throw ConfigError("adam_eps must be positive");
    if (adam.weight_decay < 0.0)
        throw ConfigError("weight_decay must be >= 0");
    if (log_interval < 1)
        throw ConfigError("log_interval must be >= 1");
    if (!(divergence_threshold > 0.0))
        throw ConfigError("divergence_threshold must be positive");
}

double learning_rate(const TrainConfig& cfg, std::int64_t step)
{
    if (step < cfg.warmup_steps)
        return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    if (cfg.schedule == LrSchedule::kConstant)
        return cfg.lr;
    const double span = static_cast<double>(std::max<std::int64_t>(cfg.steps - cfg.warmup_steps, 1));
    const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
    const double floor = cfg.lr * cfg.min_lr_ratio;
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

Batch sample_batch(std::span<const std::int32_t> corpus, std::size_t batch, std::size_t seq, std::uint64_t seed,
                   std::int64_t step)
{
    if (corpus.size() < 2)
        throw ContractError("corpus needs at least two tokens");
    seq = std::min(seq, corpus.size() - 1);
    Rng rng(mix_seed(seed ^ fnv1a("batches")) ^ static_cast<std::uint64_t>(step));
    Batch b;
    b.batch = batch;
    b.seq = seq;
    b.inputs.resize(batch * seq);
    b.targets.resize(batch * seq);
    const std::size_t max_start = corpus.size() - seq - 1;
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t start = static_cast<std::size_t>(rng.below(max_start + 1));
        std::copy_n(corpus.begin() + static_cast<std::ptrdiff_t>(start), seq,
                    b.inputs.begin() + static_cast<std::ptrdiff_t>(i * seq));
        std::copy_n(corpus.begin() + static_cast<std::ptrdiff_t>(start + 1), seq,
                    b.targets.begin() + static_cast<std::ptrdiff_t>(i * seq));
    }
    return b;
}

Objective compute_objective(const Model& model, const Batch& batch)
{
    const auto& cfg = model.config();
    Objective obj;
    obj.forward = model.forward(batch.inputs, batch.batch, batch.seq);
    obj.lm_loss = ops::cross_entropy(obj.forward.logits, batch.targets);
    obj.aux.coefficients = cfg.coefficients;
    const auto& layers = obj.forward.layers;
    if (layers.empty()) {
        obj.aux.lb = Tensor::scalar(0.0);
        obj.aux.p_penalty = Tensor::scalar(0.0);
        obj.aux.entropy = Tensor::scalar(0.0);
        obj.aux.combined = obj.lm_loss;
        return obj;
    }
    const double inv_layers = 1.0 / static_cast<double>(layers.size());
    Tensor lb, pp, ent;
    for (const auto& moe : layers) {
        const auto stats = layer_stats(moe.decision, model.profile());
        Tensor l_lb = load_balance_loss(stats, cfg.experts);
        Tensor l_pp = p_penalty_loss(stats, cfg.experts);
        Tensor l_ent = entropy_loss(moe.decision.probs, cfg.entropy_sign);
        lb = lb.defined() ? ops::add(lb, l_lb) : l_lb;
        pp = pp.defined() ? ops::add(pp, l_pp) : l_pp;
        ent = ent.defined() ? ops::add(ent, l_ent) : l_ent;
    }
    obj.aux.lb = ops::scale(lb, inv_layers);
    obj.aux.p_penalty = ops::scale(pp, inv_layers);
    obj.aux.entropy = ops::scale(ent, inv_layers);
    obj.aux.combined = total_objective(obj.lm_loss, obj.aux, cfg.objective_mode());
    return obj;
}

StepReport train_step(Model& model, const Batch& batch, AdamW& optimizer, const TrainConfig& cfg,
                      std::int64_t step, double& cum_flops)
{
    for (auto id : batch.inputs)
        if (id < 0 || static_cast<std::size_t>(id) >= model.config().vocab_size)
            throw IndexError("batch token " + std::to_string(id) + " outside vocabulary");
    model.zero_grad();
    Objective obj = compute_objective(model, batch);
    const double lm = obj.lm_loss.item();
    const double combined = obj.aux.combined.item();
    if (!std::isfinite(lm) || !std::isfinite(combined))
        throw DivergenceError(step, "non-finite loss");
    if (lm > cfg.divergence_threshold)
        throw DivergenceError(step, "lm loss " + format_double(lm) + " exceeds divergence threshold " +
                                        format_double(cfg.divergence_threshold));
    backward(obj.aux.combined);
    const double lr = learning_rate(cfg, step);
    optimizer.step(lr);

    StepReport report;
    report.lm_loss = lm;
    report.aux = obj.aux;
    auto& rec = report.telemetry;
    rec.step = step;
    rec.tokens = batch.inputs.size();
    rec.lm_loss = lm;
    rec.lb = obj.aux.lb.item();
    rec.p_penalty = obj.aux.p_penalty.item();
    rec.entropy = obj.aux.entropy.item();
    rec.combined = combined;
    rec.lr = lr;

    std::vector<RoutingDecision> decisions;
    for (const auto& moe : obj.forward.layers) {
        rec.layers.push_back(layer_telemetry(moe, model.profile(), model.config().h_input,
                                             cfg.collect_histograms ? std::span<const std::int32_t>(batch.inputs)
                                                                    : std::span<const std::int32_t>(),
                                             model.config().vocab_size));
        rec.mean_activated_params += rec.layers.back().mean_activated_params;
        decisions.push_back(moe.decision);
    }
    const auto flops = flops_per_token(decisions, model.profile(), model.config());
    rec.step_flops = flops.training_total;
    cum_flops += rec.step_flops;
    rec.cum_flops = cum_flops;
    return report;
}

namespace {

std::vector<Tensor> tensors_of(const Model& model)
{
    std::vector<Tensor> out;
    for (auto& p : model.named_parameters())
        out.push_back(p.tensor);
    return out;
}

} // namespace

Trainer::Trainer(ModelConfig model_cfg, TrainConfig train_cfg, std::vector<std::int32_t> corpus)
    : model_cfg_(std::move(model_cfg)), train_cfg_(train_cfg), corpus_(std::move(corpus)), model_(model_cfg_),
      optimizer_(tensors_of(model_), train_cfg_.adam)
{
    train_cfg_.validate();
    if (corpus_.size() < 2)
        throw ContractError("training corpus needs at least two tokens");
}

Trainer::Trainer(const Checkpoint& ckpt, std::vector<std::int32_t> corpus)
    : Trainer(ckpt.model_config, ckpt.train_config, std::move(corpus))
{
    load_parameters(model_, ckpt.parameters);
    optimizer_.restore(ckpt.optimizer_steps, ckpt.adam_m, ckpt.adam_v);
    step_ = ckpt.step;
    cum_flops_ = ckpt.cum_flops;
}

void Trainer::run(std::int64_t until_step, const TelemetrySink& sink)
{
    while (step_ < until_step) {
        const Batch batch =
            sample_batch(corpus_, train_cfg_.batch_size, model_cfg_.context_length, model_cfg_.seed, step_);
        StepReport report = train_step(model_, batch, optimizer_, train_cfg_, step_, cum_flops_);
        if (sink && step_ % train_cfg_.log_interval == 0)
            sink(report.telemetry);
        ++step_;
    }
}

Checkpoint Trainer::checkpoint() const
{
    Checkpoint c;
    c.model_config = model_cfg_;
    c.train_config = train_cfg_;
    c.step = step_;
    c.cum_flops = cum_flops_;
    for (const auto& p : model_.named_parameters())
        c.parameters.push_back({p.name, p.tensor.detach()});
    c.optimizer_steps = optimizer_.steps_taken();
    c.adam_m = optimizer_.first_moments();
    c.adam_v = optimizer_.second_moments();
    return c;
}

Checkpoint train_loop(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                      const std::filesystem::path& corpus_path, std::int64_t steps, const TelemetrySink& sink,
                      const Checkpoint* resume)
{
    auto corpus = load_corpus(corpus_path);
    if (corpus.empty())
        throw IoError("corpus " + corpus_path.string() + " is empty");
    Trainer trainer = resume ? Trainer(*resume, std::move(corpus)) : Trainer(model_cfg, train_cfg, std::move(corpus));
    trainer.run(steps, sink);
    return trainer.checkpoint();
}

namespace {

// Non-overlapping windows of up to context_length inputs, each predicting the next byte.
template <typename F>
void for_each_window(const Model& model, std::span<const std::int32_t> tokens, std::size_t max_windows, F&& f)
{
    const std::size_t ctx = model.config().context_length;
    std::size_t windows = 0;
    for (std::size_t start = 0; start + 1 < tokens.size(); start += ctx) {
        if (max_windows && windows >= max_windows)
            break;
        const std::size_t len = std::min(ctx, tokens.size() - 1 - start);
        f(tokens.subspan(start, len), tokens.subspan(start + 1, len));
        ++windows;
    }
}

} // namespace

double evaluate_perplexity(const Model& model, std::span<const std::int32_t> tokens)
{
    if (tokens.size() < 2)
        throw ContractError("perplexity needs a corpus of at least two tokens");
    double total = 0.0;
    std::size_t count = 0;
    for_each_window(model, tokens, 0, [&](auto inputs, auto targets) {
        const auto fwd = model.forward(inputs, 1, inputs.size());
        for (double v : ops::token_nll(fwd.logits, targets)) {
            total += v;
            ++count;
        }
    });
    return std::exp(total / static_cast<double>(count));
}

double evaluate_perplexity(const Model& model, const std::filesystem::path& corpus_path)
{
    return evaluate_perplexity(model, load_corpus(corpus_path));
}

InferenceTrace trace_corpus(const Model& model, std::span<const std::int32_t> tokens, std::size_t max_windows)
{
    if (tokens.size() < 2)
        throw ContractError("trace_corpus needs at least two tokens");
    const auto& cfg = model.config();
    InferenceTrace trace;
    trace.histograms.assign(cfg.n_layers, std::vector<Histogram>(cfg.experts, Histogram(cfg.vocab_size, 0)));
    double total = 0.0;
    for_each_window(model, tokens, max_windows, [&](auto inputs, auto targets) {
        const auto fwd = model.forward(inputs, 1, inputs.size());
        const auto nll = ops::token_nll(fwd.logits, targets);
        for (std::size_t t = 0; t < inputs.size(); ++t) {
            TokenActivation ta;
            ta.token = inputs[t];
            ta.nll = nll[t];
            total += nll[t];
            for (std::size_t l = 0; l < fwd.layers.size(); ++l) {
                const auto& experts = fwd.layers[l].decision.activated[t];
                ta.experts.push_back(experts);
                for (auto e : experts)
                    ++trace.histograms[l][e][static_cast<std::size_t>(inputs[t])];
            }
            trace.tokens.push_back(std::move(ta));
        }
    });
    trace.mean_nll = total / static_cast<double>(trace.tokens.size());
    return trace;
}

} // namespace hmoe
