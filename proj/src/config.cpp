#include "hmoe/config.hpp"

#include "hmoe/error.hpp"
#include "hmoe/telemetry.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace hmoe {

namespace {

struct LineError
{
    std::string message;
};

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& v)
{
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
        return v.substr(1, v.size() - 2);
    return v;
}

std::uint64_t to_u64(const std::string& v)
{
    std::uint64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw LineError{"expected a non-negative integer, got '" + v + "'"};
    return out;
}

std::int64_t to_i64(const std::string& v)
{
    std::int64_t out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw LineError{"expected an integer, got '" + v + "'"};
    return out;
}

double to_double(const std::string& v)
{
    double out = 0.0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw LineError{"expected a number, got '" + v + "'"};
    return out;
}

bool to_bool(const std::string& v)
{
    if (v == "true")
        return true;
    if (v == "false")
        return false;
    throw LineError{"expected true or false, got '" + v + "'"};
}

std::vector<std::size_t> to_list(std::string v)
{
    std::vector<std::size_t> out;
    v = trim(v);
    if (v.size() >= 2 && v.front() == '[' && v.back() == ']')
        v = trim(v.substr(1, v.size() - 2));
    if (v.empty())
        return out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        out.push_back(static_cast<std::size_t>(to_u64(trim(item))));
    return out;
}

template <typename F>
auto wrap(F&& f)
{
    return [f = std::forward<F>(f)](const std::string& v) {
        try {
            f(v);
        } catch (const ConfigError& e) {
            throw LineError{e.what()};
        }
    };
}

using Setter = std::function<void(const std::string&)>;

std::map<std::string, Setter> model_train_setters(ModelConfig& m, TrainConfig& t)
{
    std::map<std::string, Setter> s;
    s["model.n_layers"] = [&](const std::string& v) { m.n_layers = to_u64(v); };
    s["model.h_input"] = [&](const std::string& v) { m.h_input = to_u64(v); };
    s["model.n_heads"] = [&](const std::string& v) { m.n_heads = to_u64(v); };
    s["model.head_dim"] = [&](const std::string& v) { m.head_dim = to_u64(v); };
    s["model.vocab_size"] = [&](const std::string& v) { m.vocab_size = to_u64(v); };
    s["model.context_length"] = [&](const std::string& v) { m.context_length = to_u64(v); };
    s["model.experts"] = [&](const std::string& v) { m.experts = to_u64(v); };
    s["model.budget"] = [&](const std::string& v) { m.budget_per_layer = to_u64(v); };
    s["model.strategy"] = wrap([&](const std::string& v) { m.strategy = parse_size_strategy(unquote(v)); });
    s["model.custom_sizes"] = [&](const std::string& v) { m.custom_sizes = to_list(unquote(v)); };
    s["model.routing"] = wrap([&](const std::string& v) { m.routing = parse_routing_mode(unquote(v)); });
    s["model.k"] = [&](const std::string& v) { m.k = to_i64(v); };
    s["model.p"] = [&](const std::string& v) { m.p = to_double(v); };
    s["model.seed"] = [&](const std::string& v) { m.seed = to_u64(v); };
    s["loss.balance"] = wrap([&](const std::string& v) { m.balance_loss = parse_balance_loss(unquote(v)); });
    s["loss.lambda_pp"] = [&](const std::string& v) { m.coefficients.p_penalty = to_double(v); };
    s["loss.lambda_ent"] = [&](const std::string& v) { m.coefficients.entropy = to_double(v); };
    s["loss.lambda_lb"] = [&](const std::string& v) { m.coefficients.load_balance = to_double(v); };
    s["loss.entropy_sign"] = wrap([&](const std::string& v) { m.entropy_sign = parse_entropy_sign(unquote(v)); });
    s["train.steps"] = [&](const std::string& v) { t.steps = to_i64(v); };
    s["train.batch_size"] = [&](const std::string& v) { t.batch_size = to_u64(v); };
    s["train.lr"] = [&](const std::string& v) { t.lr = to_double(v); };
    s["train.warmup_steps"] = [&](const std::string& v) { t.warmup_steps = to_i64(v); };
    s["train.schedule"] = wrap([&](const std::string& v) { t.schedule = parse_lr_schedule(unquote(v)); });
    s["train.min_lr_ratio"] = [&](const std::string& v) { t.min_lr_ratio = to_double(v); };
    s["train.beta1"] = [&](const std::string& v) { t.adam.beta1 = to_double(v); };
    s["train.beta2"] = [&](const std::string& v) { t.adam.beta2 = to_double(v); };
    s["train.adam_eps"] = [&](const std::string& v) { t.adam.eps = to_double(v); };
    s["train.weight_decay"] = [&](const std::string& v) { t.adam.weight_decay = to_double(v); };
    s["train.log_interval"] = [&](const std::string& v) { t.log_interval = to_i64(v); };
    s["train.divergence_threshold"] = [&](const std::string& v) { t.divergence_threshold = to_double(v); };
    return s;
}

struct ParsedKey
{
    std::size_t line = 0;
};

// Applies every `section.key = value` line through `setters`; returns the
// line each key was seen on.
std::map<std::string, std::size_t> apply_lines(const std::string& text, const std::map<std::string, Setter>& setters)
{
    std::map<std::string, std::size_t> seen;
    std::istringstream in(text);
    std::string raw;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        auto fail = [&](const std::string& msg) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + msg);
        };
        std::string line = raw;
        bool in_quote = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"')
                in_quote = !in_quote;
            if (line[i] == '#' && !in_quote) {
                line.resize(i);
                break;
            }
        }
        line = trim(line);
        if (line.empty())
            continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                fail("malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "model" && section != "loss" && section != "train" && section != "experiment")
                fail("unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            fail("expected 'key = value', got '" + line + "'");
        if (section.empty())
            fail("key outside of any section");
        const std::string key = section + "." + trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end())
            fail("unknown key '" + trim(line.substr(0, eq)) + "' in [" + section + "]");
        if (seen.count(key))
            fail("duplicate key '" + key + "'");
        try {
            it->second(value);
        } catch (const LineError& e) {
            fail(trim(line.substr(0, eq)) + ": " + e.message);
        }
        seen[key] = line_no;
    }
    return seen;
}

// Runs `check`, prefixing any ConfigError with the line of the most relevant key.
void validate_with_lines(const std::function<void()>& check, const std::map<std::string, std::size_t>& seen)
{
    try {
        check();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        std::size_t line = 0;
        for (const auto& [key, l] : seen) {
            const auto name = key.substr(key.find('.') + 1);
            if (msg.rfind(name, 0) == 0 || msg.find(" " + name) != std::string::npos)
                line = std::max(line, l);
        }
        throw ConfigError("line " + std::to_string(line) + ": " + msg);
    }
}

void emit_model_train_into(std::ostringstream& os, const ModelConfig& m, const TrainConfig& t)
{
    os << "[model]\n";
    os << "n_layers = " << m.n_layers << "\n";
    os << "h_input = " << m.h_input << "\n";
    os << "n_heads = " << m.n_heads << "\n";
    os << "head_dim = " << m.head_dim << "\n";
    os << "vocab_size = " << m.vocab_size << "\n";
    os << "context_length = " << m.context_length << "\n";
    os << "experts = " << m.experts << "\n";
    os << "budget = " << m.budget_per_layer << "\n";
    os << "strategy = " << to_string(m.strategy) << "\n";
    os << "custom_sizes = [";
    for (std::size_t i = 0; i < m.custom_sizes.size(); ++i)
        os << (i ? ", " : "") << m.custom_sizes[i];
    os << "]\n";
    os << "routing = " << to_string(m.routing) << "\n";
    os << "k = " << m.k << "\n";
    os << "p = " << format_double(m.p) << "\n";
    os << "seed = " << m.seed << "\n";
    os << "\n[loss]\n";
    os << "balance = " << to_string(m.balance_loss) << "\n";
    os << "lambda_pp = " << format_double(m.coefficients.p_penalty) << "\n";
    os << "lambda_ent = " << format_double(m.coefficients.entropy) << "\n";
    os << "lambda_lb = " << format_double(m.coefficients.load_balance) << "\n";
    os << "entropy_sign = " << to_string(m.entropy_sign) << "\n";
    os << "\n[train]\n";
    os << "steps = " << t.steps << "\n";
    os << "batch_size = " << t.batch_size << "\n";
    os << "lr = " << format_double(t.lr) << "\n";
    os << "warmup_steps = " << t.warmup_steps << "\n";
    os << "schedule = " << to_string(t.schedule) << "\n";
    os << "min_lr_ratio = " << format_double(t.min_lr_ratio) << "\n";
    os << "beta1 = " << format_double(t.adam.beta1) << "\n";
    os << "beta2 = " << format_double(t.adam.beta2) << "\n";
    os << "adam_eps = " << format_double(t.adam.eps) << "\n";
    os << "weight_decay = " << format_double(t.adam.weight_decay) << "\n";
    os << "log_interval = " << t.log_interval << "\n";
    os << "divergence_threshold = " << format_double(t.divergence_threshold) << "\n";
}

} // namespace

void ExperimentConfig::validate() const
{
    model.validate();
    train.validate();
    if (corpus.empty())
        throw ConfigError("corpus is required");
    if (!std::filesystem::is_regular_file(corpus))
        throw ConfigError("corpus " + corpus.string() + " does not exist");
    if (output_dir.empty())
        throw ConfigError("output_dir must not be empty");
}

ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir)
{
    ExperimentConfig cfg;
    auto setters = model_train_setters(cfg.model, cfg.train);
    setters["experiment.corpus"] = [&](const std::string& v) {
        std::filesystem::path p = unquote(v);
        cfg.corpus = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    setters["experiment.output_dir"] = [&](const std::string& v) {
        std::filesystem::path p = unquote(v);
        cfg.output_dir = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    setters["experiment.histograms"] = [&](const std::string& v) { cfg.histograms = to_bool(v); };
    setters["experiment.analysis_windows"] = [&](const std::string& v) { cfg.analysis_windows = to_u64(v); };
    const auto seen = apply_lines(text, setters);
    cfg.train.collect_histograms = cfg.histograms;
    validate_with_lines([&] { cfg.validate(); }, seen);
    return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), std::filesystem::absolute(path).lexically_normal().parent_path());
}

std::string emit_model_train(const ModelConfig& model, const TrainConfig& train)
{
    std::ostringstream os;
    emit_model_train_into(os, model, train);
    return os.str();
}

void parse_model_train(const std::string& text, ModelConfig& model, TrainConfig& train)
{
    ModelConfig m;
    TrainConfig t;
    const auto seen = apply_lines(text, model_train_setters(m, t));
    validate_with_lines(
        [&] {
            m.validate();
            t.validate();
        },
        seen);
    model = std::move(m);
    train = t;
}

std::string emit_config(const ExperimentConfig& cfg)
{
    std::ostringstream os;
    emit_model_train_into(os, cfg.model, cfg.train);
    os << "\n[experiment]\n";
    os << "corpus = \"" << cfg.corpus.string() << "\"\n";
    os << "output_dir = \"" << cfg.output_dir.string() << "\"\n";
    os << "histograms = " << (cfg.histograms ? "true" : "false") << "\n";
    os << "analysis_windows = " << cfg.analysis_windows << "\n";
    return os.str();
}

bool operator==(const ModelConfig& a, const ModelConfig& b)
{
    return a.n_layers == b.n_layers && a.h_input == b.h_input && a.n_heads == b.n_heads &&
           a.head_dim == b.head_dim && a.vocab_size == b.vocab_size && a.context_length == b.context_length &&
           a.experts == b.experts && a.budget_per_layer == b.budget_per_layer && a.strategy == b.strategy &&
           a.custom_sizes == b.custom_sizes && a.routing == b.routing && a.k == b.k && a.p == b.p &&
           a.balance_loss == b.balance_loss && a.coefficients.load_balance == b.coefficients.load_balance &&
           a.coefficients.p_penalty == b.coefficients.p_penalty && a.coefficients.entropy == b.coefficients.entropy &&
           a.entropy_sign == b.entropy_sign && a.seed == b.seed;
}

bool operator==(const TrainConfig& a, const TrainConfig& b)
{
    return a.steps == b.steps && a.batch_size == b.batch_size && a.lr == b.lr && a.warmup_steps == b.warmup_steps &&
           a.schedule == b.schedule && a.min_lr_ratio == b.min_lr_ratio && a.adam.beta1 == b.adam.beta1 &&
           a.adam.beta2 == b.adam.beta2 && a.adam.eps == b.adam.eps && a.adam.weight_decay == b.adam.weight_decay &&
           a.log_interval == b.log_interval && a.divergence_threshold == b.divergence_threshold &&
           a.collect_histograms == b.collect_histograms;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b)
{
    return a.model == b.model && a.train == b.train && a.corpus == b.corpus && a.output_dir == b.output_dir &&
           a.histograms == b.histograms && a.analysis_windows == b.analysis_windows;
}

} // namespace hmoe
