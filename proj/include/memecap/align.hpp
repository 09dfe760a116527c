#pragma once

// Multi-granularity image/caption alignment.
//
// Image areas and caption tokens are projected into a shared space, scored
// with a single query/key attention head, normalized over caption tokens
// (token-level similarity) and averaged over areas (global similarity).
// A contrastive objective with in-batch negatives trains the projections.

#include "memecap/autograd.hpp"
#include "memecap/checkpoint.hpp"
#include "memecap/corpus.hpp"
#include "memecap/encode.hpp"
#include "memecap/image.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace memecap {

struct AlignParams {
    ad::Parameter w_m; // d x d, image projection
    ad::Parameter b_m; // 1 x d
    ad::Parameter w_t; // d x d, text projection
    ad::Parameter b_t; // 1 x d
    ad::Parameter w_q; // d x d_k
    ad::Parameter w_k; // d x d_k
    double tau = 0.07;

    int d() const { return static_cast<int>(w_m.value.rows()); }
    int d_k() const { return static_cast<int>(w_q.value.cols()); }
    ad::ParamList params() { return {&w_m, &b_m, &w_t, &b_t, &w_q, &w_k}; }

    /// Identity-near projections plus small random query/key maps.
    static AlignParams init(int d, int d_k, double tau, std::uint64_t seed);
    /// Throws ValidationError on a broken invariant.
    void validate() const;

    Blob to_blob() const;
    static AlignParams from_blob(const Blob &b);
};

struct AttentionMap {
    Mat token_level; // N x n, rows sum to 1
    RowVec global;   // n, column mean of token_level
    Mat energies;    // N x n, unscaled

    Eigen::Index areas() const { return token_level.rows(); }
    Eigen::Index tokens() const { return token_level.cols(); }
};

/// M' rows = W_M m + b_M and T' rows = W_T t + b_T.
std::pair<Mat, Mat> project(const AreaFeatures &areas, const TokenFeatures &tokens, const AlignParams &params);

AttentionMap attention_similarity(const Mat &m_proj, const Mat &t_proj, const AlignParams &params);

/// Area-count-weighted average of per-sub-image maps over the same caption.
AttentionMap combine_subimage_maps(std::span<const AttentionMap> maps);

/// Meme-level map: each sub-image attended against the shared caption, then combined.
AttentionMap meme_attention(std::span<const AreaFeatures> subimages, const TokenFeatures &caption,
                            const AlignParams &params);

/// -log( exp(s_pos / tau) / sum_k exp(s_k / tau) ).
double contrastive_loss(std::span<const double> scores, std::size_t positive_index, double tau);

/// Features of one meme as consumed by the batch loss.
struct MemeFeatures {
    std::string id;
    std::vector<AreaFeatures> subimages;
    TokenFeatures caption;
};

enum class CandidateScope {
    /// Candidates are individual caption tokens; the positive set is every token of the meme's own caption.
    tokens,
    /// Candidates are whole captions; an area's score for a caption is its attention mass on that caption's tokens.
    captions,
};

struct AlignLossOptions {
    CandidateScope scope = CandidateScope::tokens;
};

/// Builds the batch contrastive loss on a tape (params are taped leaves).
ad::Var align_batch_loss_var(ad::Tape &tape, std::span<const MemeFeatures> batch, AlignParams &params,
                             const AlignLossOptions &opt = {});

/// Evaluates the batch loss and accumulates gradients into params' grad fields.
double align_batch_loss(std::span<const MemeFeatures> batch, AlignParams &params, const AlignLossOptions &opt = {});

struct AlignTrainConfig {
    int epochs = 20;
    int batch_size = 8;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 7;
    AlignLossOptions loss;
};

/// Mini-batch training; returns the mean loss of each epoch.
std::vector<double> train_align(std::vector<MemeFeatures> data, AlignParams &params, const AlignTrainConfig &cfg);

// ---- heatmaps ----

struct HeatmapOptions {
    int grid = 4;          // patch lattice used by the visual encoder
    double opacity = 0.6;  // tint strength at full intensity
    std::uint8_t tint[3] = {255, 0, 0};
};

/// Overlay of per-area attention for one caption token. maps holds one map
/// per ROI (or a single map applied to every ROI). Intensities are min-max
/// normalized over all areas; rows beyond grid*grid (variant features) are ignored.
Image render_heatmap(std::span<const AttentionMap> maps, const Image &image, const std::vector<RoiBox> &rois,
                     std::size_t token_index, const HeatmapOptions &opt = {});

void export_heatmap(const std::filesystem::path &out, std::span<const AttentionMap> maps, const Image &image,
                    const std::vector<RoiBox> &rois, std::size_t token_index, const HeatmapOptions &opt = {});

/// Single-line structured-text rendering of a map for inspection.
std::string attention_line(const std::string &meme_id, const AttentionMap &map, const std::vector<std::string> &tokens);

} // namespace memecap
