#include "hmoe/cli.hpp"

#include "hmoe/checkpoint.hpp"
#include "hmoe/config.hpp"
#include "hmoe/corpus.hpp"
#include "hmoe/error.hpp"
#include "hmoe/telemetry.hpp"
#include "hmoe/train.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace hmoe::cli {

namespace fs = std::filesystem;

namespace {

bool has_entries(const fs::path& dir)
{
    std::error_code ec;
    return fs::is_directory(dir, ec) && fs::directory_iterator(dir, ec) != fs::directory_iterator();
}

int prepare_output(const fs::path& dir, bool force, std::ostream& err)
{
    std::error_code ec;
    if (fs::exists(dir, ec) && !fs::is_directory(dir, ec)) {
        err << "error: output path " << dir.string() << " exists and is not a directory\n";
        return kUsage;
    }
    if (has_entries(dir) && !force) {
        err << "error: output directory " << dir.string() << " is not empty; pass --force to overwrite\n";
        return kUsage;
    }
    fs::create_directories(dir, ec);
    if (ec) {
        err << "error: cannot create " << dir.string() << ": " << ec.message() << "\n";
        return kRuntime;
    }
    return kSuccess;
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text))
        throw IoError("cannot write " + path.string());
}

std::string read_text(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::size_t>> layer_sizes(const Model& model)
{
    return std::vector<std::vector<std::size_t>>(model.config().n_layers, model.profile().h_ffn);
}

void warn_empty_experts(const AnalysisReport& report, std::ostream& err)
{
    for (const auto& la : report.layers)
        for (std::size_t e = 0; e < la.expert_tokens.size(); ++e)
            if (la.expert_tokens[e] == 0)
                err << "warning: layer " << la.layer << " expert " << e
                    << " received no tokens; its matrix entries are null\n";
}

} // namespace

int cmd_train(const fs::path& config_path, const TrainOptions& options, std::ostream& out, std::ostream& err)
{
    ExperimentConfig cfg;
    try {
        cfg = parse_config(config_path);
        if (options.seed)
            cfg.model.seed = *options.seed;
        if (options.steps)
            cfg.train.steps = *options.steps;
        cfg.validate();
    } catch (const ConfigError& e) {
        err << "config error: " << config_path.string() << ": " << e.what() << "\n";
        return kConfig;
    } catch (const IoError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfig;
    }

    if (int rc = prepare_output(cfg.output_dir, options.force, err); rc != kSuccess)
        return rc;

    try {
        const std::string echo = emit_config(cfg);
        write_text(cfg.output_dir / "config.toml", echo);

        auto corpus = load_corpus(cfg.corpus);
        if (corpus.size() < 2)
            throw IoError("corpus " + cfg.corpus.string() + " is too short to train on");
        Trainer trainer(cfg.model, cfg.train, corpus);

        std::vector<TelemetryRecord> records;
        std::vector<std::vector<Histogram>> histograms(
            cfg.model.n_layers, std::vector<Histogram>(cfg.model.experts, Histogram(cfg.model.vocab_size, 0)));
        TelemetrySink sink = [&](const TelemetryRecord& rec) {
            TelemetryRecord kept = rec;
            for (std::size_t l = 0; l < kept.layers.size(); ++l) {
                auto& lt = kept.layers[l];
                for (std::size_t e = 0; e < lt.histograms.size(); ++e)
                    for (std::size_t v = 0; v < lt.histograms[e].size(); ++v)
                        histograms[l][e][v] += lt.histograms[e][v];
                lt.histograms.clear();
            }
            records.push_back(std::move(kept));
        };
        trainer.run(cfg.train.steps, sink);
        save_checkpoint(trainer.checkpoint(), cfg.output_dir / "checkpoint.hmoe");

        std::vector<AnalysisReport> reports;
        if (cfg.train.steps > 0) {
            const auto sizes = layer_sizes(trainer.model());
            if (cfg.histograms)
                reports.push_back(analyze_histograms(histograms, sizes, "training"));
            if (cfg.analysis_windows > 0) {
                const auto trace = trace_corpus(trainer.model(), corpus, cfg.analysis_windows);
                auto rep = analyze_histograms(trace.histograms, sizes, "corpus_trace");
                rep.classes = difficulty_classes(trace.tokens, sizes, cfg.model.h_input);
                reports.push_back(std::move(rep));
            }
        }
        export_report(records, reports, echo, cfg.output_dir);

        out << "trained " << trainer.step() << " steps";
        if (!records.empty())
            out << ", final lm loss " << format_double(records.back().lm_loss);
        out << "\noutputs written to " << cfg.output_dir.string() << "\n";
    } catch (const DivergenceError& e) {
        err << "error: " << e.what() << "\n";
        return kRuntime;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kSuccess;
}

int cmd_analyze(const fs::path& checkpoint, const fs::path& corpus, const fs::path& out_dir,
                const AnalyzeOptions& options, std::ostream& out, std::ostream& err)
{
    try {
        const Checkpoint ckpt = load_checkpoint(checkpoint);
        const Model model = model_from_checkpoint(ckpt);
        const auto tokens = load_corpus(corpus);
        if (tokens.size() < 2)
            throw IoError("corpus " + corpus.string() + " is too short to analyze");
        if (int rc = prepare_output(out_dir, options.force, err); rc != kSuccess)
            return rc;

        const auto trace = trace_corpus(model, tokens, options.max_windows);
        const auto sizes = layer_sizes(model);
        AnalysisReport report = analyze_histograms(trace.histograms, sizes, corpus.filename().string());
        report.classes = difficulty_classes(trace.tokens, sizes, model.config().h_input);
        warn_empty_experts(report, err);

        std::vector<AnalysisReport> reports{report};
        nlohmann::json j;
        j["format_version"] = kTelemetryFormatVersion;
        j["checkpoint_step"] = ckpt.step;
        j["tokens"] = trace.tokens.size();
        j["mean_nll"] = trace.mean_nll;
        j["perplexity"] = std::exp(trace.mean_nll);
        // Reuse the exporter's layout for the report body.
        const fs::path tmp = out_dir / ".analysis_tmp";
        export_report({}, reports, emit_model_train(ckpt.model_config, ckpt.train_config), tmp);
        auto body = nlohmann::json::parse(read_text(tmp / "telemetry.json"));
        fs::remove_all(tmp);
        j["config"] = body["config"];
        j["analysis"] = body["analysis"];
        write_text(out_dir / "analysis.json", j.dump(1) + "\n");
        out << "analyzed " << trace.tokens.size() << " tokens, perplexity " << format_double(std::exp(trace.mean_nll))
            << "\nreport written to " << (out_dir / "analysis.json").string() << "\n";
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return kRuntime;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kSuccess;
}

ReportSummary summarize_telemetry(const fs::path& dir)
{
    const std::string csv = read_text(dir / "telemetry.csv");
    const auto json = [&] {
        try {
            return nlohmann::json::parse(read_text(dir / "telemetry.json"));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(std::string("telemetry.json: ") + e.what());
        }
    }();
    if (!json.contains("format_version") || !json["format_version"].is_number_integer())
        throw FormatError("telemetry.json: missing field format_version");
    if (json["format_version"].get<int>() != kTelemetryFormatVersion)
        throw FormatError("telemetry.json: unsupported format_version " + json["format_version"].dump());
    if (!json.contains("steps") || !json["steps"].is_array())
        throw FormatError("telemetry.json: missing field steps");

    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line))
        throw FormatError("telemetry.csv: missing header");
    if (line != kTelemetryCsvHeader) {
        std::istringstream got(line), want(kTelemetryCsvHeader);
        std::string g, w;
        while (std::getline(want, w, ',')) {
            if (!std::getline(got, g, ',') || g != w)
                throw FormatError("telemetry.csv: header field '" + w + "' missing or misplaced");
        }
        throw FormatError("telemetry.csv: unexpected extra header fields");
    }

    static const char* kFields[] = {"step", "layer", "expert", "size", "activation_count", "mean_gate",
                                    "activated_params", "cum_flops"};
    ReportSummary s;
    std::map<std::int64_t, double> step_params;
    std::vector<std::vector<double>> counts;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty())
            continue;
        std::istringstream row(line);
        std::string cell;
        std::vector<double> v;
        std::size_t field = 0;
        while (std::getline(row, cell, ',')) {
            if (field >= 8)
                throw FormatError("telemetry.csv line " + std::to_string(line_no) + ": too many fields");
            try {
                std::size_t used = 0;
                v.push_back(std::stod(cell, &used));
                if (used != cell.size())
                    throw std::invalid_argument(cell);
            } catch (const std::exception&) {
                throw FormatError("telemetry.csv line " + std::to_string(line_no) + ": field " + kFields[field] +
                                  " is not numeric");
            }
            ++field;
        }
        if (v.size() != 8)
            throw FormatError("telemetry.csv line " + std::to_string(line_no) + ": field " + kFields[v.size()] +
                              " missing");
        const auto step = static_cast<std::int64_t>(v[0]);
        const auto layer = static_cast<std::size_t>(v[1]);
        const auto expert = static_cast<std::size_t>(v[2]);
        if (layer >= counts.size())
            counts.resize(layer + 1);
        if (expert >= counts[layer].size())
            counts[layer].resize(expert + 1, 0.0);
        counts[layer][expert] += v[4];
        step_params[step] += v[6];
        if (layer == 0) {
            if (expert >= s.sizes.size())
                s.sizes.resize(expert + 1, 0);
            s.sizes[expert] = static_cast<std::size_t>(v[3]);
        }
        ++s.rows;
    }
    s.steps = step_params.size();
    s.layers = counts.size();
    s.experts = counts.empty() ? 0 : counts.front().size();
    double total = 0.0;
    for (const auto& [step, params] : step_params)
        total += params;
    s.mean_activated_params = s.steps ? total / static_cast<double>(s.steps) : 0.0;
    for (const auto& layer : counts) {
        double sum = 0.0;
        for (double c : layer)
            sum += c;
        std::vector<double> share;
        for (double c : layer)
            share.push_back(sum > 0.0 ? c / sum : 0.0);
        s.activation_share.push_back(std::move(share));
    }
    const auto& steps = json["steps"];
    if (!steps.empty()) {
        const auto& last = steps.back();
        if (!last.contains("lm_loss") || !last["lm_loss"].is_number())
            throw FormatError("telemetry.json: missing field steps[].lm_loss");
        s.final_loss = last["lm_loss"].get<double>();
    }
    if (steps.size() != s.steps)
        throw FormatError("telemetry.json: field steps has " + std::to_string(steps.size()) +
                          " entries but telemetry.csv covers " + std::to_string(s.steps) + " steps");
    return s;
}

int cmd_report(const fs::path& dir, std::ostream& out, std::ostream& err)
{
    ReportSummary s;
    try {
        s = summarize_telemetry(dir);
    } catch (const FormatError& e) {
        err << "schema error: " << e.what() << "\n";
        return kRuntime;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kRuntime;
    }
    out << "telemetry: " << s.rows << " rows (" << s.steps << " steps x " << s.layers << " layers x " << s.experts
        << " experts)\n";
    out << "final lm loss: " << format_double(s.final_loss) << "\n";
    out << "mean activated expert params per token: " << format_double(s.mean_activated_params) << "\n";
    out << "activation share by expert\n";
    out << std::setw(8) << "layer";
    for (std::size_t e = 0; e < s.experts; ++e) {
        std::ostringstream head;
        head << "e" << e;
        if (e < s.sizes.size())
            head << "(" << s.sizes[e] << ")";
        out << std::setw(12) << head.str();
    }
    out << "\n";
    for (std::size_t l = 0; l < s.activation_share.size(); ++l) {
        out << std::setw(8) << l;
        for (double share : s.activation_share[l])
            out << std::setw(12) << std::fixed << std::setprecision(4) << share;
        out << "\n";
        out.unsetf(std::ios::floatfield);
    }
    return kSuccess;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Heterogeneous mixture-of-experts experiment runner"};
    app.require_subcommand(1);

    fs::path train_config;
    TrainOptions train_opts;
    std::uint64_t seed = 0;
    std::int64_t steps = 0;
    auto* train = app.add_subcommand("train", "Train a model from a config file");
    train->add_option("config", train_config, "Experiment config file")->required();
    train->add_flag("--force", train_opts.force, "Overwrite a non-empty output directory");
    auto* seed_opt = train->add_option("--seed", seed, "Override model.seed");
    auto* steps_opt = train->add_option("--steps", steps, "Override train.steps");

    fs::path ckpt, corpus, analyze_out;
    AnalyzeOptions analyze_opts;
    auto* analyze = app.add_subcommand("analyze", "Trace a checkpoint over a corpus and write analysis.json");
    analyze->add_option("checkpoint", ckpt)->required();
    analyze->add_option("corpus", corpus)->required();
    analyze->add_option("out", analyze_out)->required();
    analyze->add_flag("--force", analyze_opts.force, "Overwrite a non-empty output directory");
    analyze->add_option("--max-windows", analyze_opts.max_windows, "Limit the number of context windows (0 = all)");

    fs::path report_dir;
    auto* report = app.add_subcommand("report", "Summarise and validate a telemetry directory");
    report->add_option("dir", report_dir)->required();

    fs::path corpus_out;
    std::size_t corpus_bytes = 1 << 20;
    std::uint64_t corpus_seed = 1;
    auto* gen = app.add_subcommand("gen-corpus", "Write a deterministic synthetic byte corpus");
    gen->add_option("path", corpus_out)->required();
    gen->add_option("--bytes", corpus_bytes, "Corpus size in bytes");
    gen->add_option("--seed", corpus_seed, "Generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kSuccess;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n" << app.help();
        return kUsage;
    }

    if (*train) {
        if (*seed_opt)
            train_opts.seed = seed;
        if (*steps_opt)
            train_opts.steps = steps;
        return cmd_train(train_config, train_opts, out, err);
    }
    if (*analyze)
        return cmd_analyze(ckpt, corpus, analyze_out, analyze_opts, out, err);
    if (*report)
        return cmd_report(report_dir, out, err);
    if (*gen) {
        try {
            write_text(corpus_out, synthesize_corpus(corpus_seed, corpus_bytes));
        } catch (const Error& e) {
            err << "error: " << e.what() << "\n";
            return kRuntime;
        }
        out << "wrote " << corpus_bytes << " bytes to " << corpus_out.string() << "\n";
        return kSuccess;
    }
    return kUsage;
}

} // namespace hmoe::cli
