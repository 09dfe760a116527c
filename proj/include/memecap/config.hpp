#pragma once

// Effective pipeline configuration. Every key has a default, so an empty
// file reproduces the reference settings; see configs/example.ini.

#include "memecap/rl.hpp"
#include "memecap/sft.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace memecap {

struct PipelineConfig {
    // [paths]
    std::filesystem::path data_dir = "memecap-data";
    std::filesystem::path manifest; // empty: draw a synthetic corpus
    std::filesystem::path config_file;

    // [run]
    std::uint64_t seed = 7;
    int synth_size = 32;
    int workers = 1;

    // [stage.segment]
    bool segment_auto = true;
    double segment_threshold = 0.02;
    int segment_min_thickness = 3;

    // [stage.augment]
    int augment_variants = 2;
    std::filesystem::path paraphrase_table;

    // [stage.align]
    int d = 64;
    int d_k = 32;
    int grid = 4;
    double tau = 0.07;
    int align_epochs = 20;
    int align_batch = 8;
    double align_lr = 0.01;
    bool align_caption_scope = false; // false: token candidates

    // [stage.sft]
    SftWeights lambda;
    int sft_epochs = 20;
    int sft_batch = 4;
    double sft_lr = 0.05;
    int max_length = kMaxSequenceLength;
    int decoder_width = 64;
    int decoder_layers = 2;
    bool trainable_weights = false;
    bool train_align = false;
    std::string baseline_prompt = "What is a humorous short sentence that complements the image as a meme?";
    bool baseline_mode = false;

    // [stage.candidates]
    int k = 4;
    std::vector<double> temperatures{0.0, 0.7, 1.0, 1.3};

    // [stage.annotate]
    double annotate_fraction = 0.01;
    std::vector<std::string> annotators{"a1", "a2", "a3"};
    int min_annotators = 3;
    bool rubric_tasks = false;
    bool serve = false;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path static_dir;
    double human_weight = 0.7;

    // [stage.reward]
    int reward_steps = 500;
    int reward_batch = 4;
    double reward_lr = 0.05;

    // [stage.rl]
    RlWeights w;
    int rl_steps = 200;
    int rl_samples = 16;
    double rl_temperature = 1.0;
    double rl_lr = 0.005;
    double kl_ceiling = 50.0;
    bool divergence_bonus = false;

    // [stage.evaluate]
    std::filesystem::path rubric_file;
    bool force = false;

    // [stage.heatmap]
    int heatmap_limit = 4;
    int heatmap_token = 0;
    double heatmap_opacity = 0.6;

    // [grid]
    std::vector<SftWeights> grid_lambda;
    std::vector<RlWeights> grid_w;
    std::string grid_objective = "Average";

    void validate() const;
    /// Sorted key=value lines of every setting that influences artifacts
    /// (paths, worker count and serving options are excluded).
    std::string canonical() const;
    std::string hash() const;
};

/// Parses INI text; unknown sections or keys are rejected.
PipelineConfig parse_config(std::string_view text);
PipelineConfig load_config(const std::filesystem::path &path);

/// The reference sweep: lambda in {(0.4,0.4,0.2), (0.5,0.3,0.2), (0.6,0.2,0.2)}
/// written as (ori, t, g), and w in {(0.5,0.5), (0.4,0.6), (0.6,0.4)}.
std::vector<SftWeights> default_lambda_grid();
std::vector<RlWeights> default_w_grid();

} // namespace memecap
