#pragma once

// Stage orchestration. Each stage reads its upstream artifacts from
// <data_dir>/<stage>/, writes its own, and records a run.json manifest
// (config hash, seed, input and output checksums).

#include "memecap/config.hpp"
#include "memecap/metrics.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace memecap {

enum class Stage {
    ingest,
    segment,
    augment,
    align,
    sft,
    candidates,
    annotate_serve,
    train_reward,
    rl,
    evaluate,
    heatmap,
};

std::string_view to_string(Stage s);
/// Accepts the CLI spelling ("train-reward", "annotate-serve", ...).
Stage parse_stage(std::string_view s);
const std::vector<Stage> &all_stages();
/// Stages whose run manifest must exist before s can run.
const std::vector<Stage> &stage_requirements(Stage s);

std::filesystem::path stage_dir(const PipelineConfig &cfg, Stage s);

struct RunManifest {
    std::string stage;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> inputs;  // name -> sha256
    std::map<std::string, std::string> outputs; // file relative to the stage dir -> sha256

    std::string to_json() const;
    static RunManifest parse(std::string_view text);
};

/// Throws DependencyError naming the stage when its manifest is missing.
RunManifest read_run_manifest(const PipelineConfig &cfg, Stage s);

struct StageResult {
    RunManifest manifest;
    std::string summary; // one human-readable line
};

StageResult run_stage(Stage s, const PipelineConfig &cfg);

/// ingest through evaluate plus heatmap, in order; the annotation queue is
/// created but not served.
std::vector<StageResult> run_all(const PipelineConfig &cfg);

/// Named values of a report summary: BLEU, ROUGE-L, CIDEr, METEOR, MAverage
/// and, when human ratings exist, Informativeness, Relevance, Creativity,
/// Humor, HAverage and Average.
std::map<std::string, double> summary_metrics(const ReportSummary &s);

struct GridRow {
    SftWeights lambda;
    RlWeights w;
    std::map<std::string, double> metrics;
    double objective = 0.0;
};

struct GridResult {
    std::size_t best = 0; // index into rows
    std::vector<GridRow> rows;

    std::string table() const; // line-delimited JSON, one row per combination
};

/// Runs one configuration end to end and returns its metrics.
using GridRunner = std::function<std::map<std::string, double>(const PipelineConfig &)>;

/// Every (lambda, w) combination in grid order; argmax of the objective with
/// ties going to the earlier row. The default runner executes the pipeline in
/// <data_dir>/grid/run_NN and reads the held-out "all" summary.
GridResult grid_search(const PipelineConfig &base, const std::vector<SftWeights> &lambdas,
                       const std::vector<RlWeights> &ws, const std::string &objective, GridRunner runner = {});

/// Runs f(0..n-1) on up to `workers` threads; the first exception is rethrown.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)> &f);

} // namespace memecap
