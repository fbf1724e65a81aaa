#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace hmoe::cli {

enum ExitCode : int
{
    kSuccess = 0,
    kUsage = 1,
    kConfig = 2,
    kRuntime = 3,
};

struct TrainOptions
{
    bool force = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> steps;
};

// Writes config.toml (effective config), checkpoint.hmoe, telemetry.csv and
// telemetry.json into the configured output directory.
int cmd_train(const std::filesystem::path& config_path, const TrainOptions& options, std::ostream& out,
              std::ostream& err);

struct AnalyzeOptions
{
    bool force = false;
    std::size_t max_windows = 0;
};

// Writes <out_dir>/analysis.json.
int cmd_analyze(const std::filesystem::path& checkpoint, const std::filesystem::path& corpus,
                const std::filesystem::path& out_dir, const AnalyzeOptions& options, std::ostream& out,
                std::ostream& err);

struct ReportSummary
{
    std::size_t rows = 0;
    std::size_t steps = 0;
    std::size_t layers = 0;
    std::size_t experts = 0;
    double final_loss = 0.0;
    double mean_activated_params = 0.0; // per token, summed over layers, averaged over logged steps
    std::vector<std::vector<double>> activation_share; // per layer per expert
    std::vector<std::size_t> sizes;                    // layer 0 sizes
};

// Validates the telemetry schema and recomputes the summary from the raw CSV.
// Throws FormatError naming the offending field.
ReportSummary summarize_telemetry(const std::filesystem::path& dir);

int cmd_report(const std::filesystem::path& dir, std::ostream& out, std::ostream& err);

// Entry point shared by the executable: parses argv and dispatches.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

} // namespace hmoe::cli
