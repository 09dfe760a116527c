#pragma once

// Supervised fine-tuning: caption likelihood plus KL terms that pull the
// decoder's predicted image/caption similarities toward the alignment prior.

#include "memecap/align.hpp"
#include "memecap/decoder.hpp"
#include "memecap/encode.hpp"
#include "memecap/optim.hpp"

#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace memecap {

struct SftWeights {
    double ori = 0.4;
    double g = 0.2;
    double t = 0.4;

    void validate() const;
};

/// Two-way softmax of (a, b).
std::pair<double, double> binary_softmax_pair(double a, double b);

/// KL((p, 1-p) || (q, 1-q)).
double two_point_kl(double p, double q);

struct SimilarityPrior {
    double global = 0.0;   // S_I
    Mat tokens;            // S_{I_i,j}, areas x caption tokens
    double pred_global = 0.0;
    Mat pred_tokens;
};

/// (L_g, L_t), each already multiplied by its weight. The pair (a, b) is
/// normalized with binary_softmax_pair and compared against its reverse.
std::pair<double, double> kl_alignment_losses(const SimilarityPrior &prior, const SftWeights &w);

/// Sum over entries of KL(softmax(a, b) || softmax(b, a)) on the tape.
ad::Var pair_kl_sum(const ad::Var &a, const ad::Var &b);

/// Alignment-side quantities for one meme.
struct AlignView {
    Mat areas;        // stacked projected areas M' over all sub-images
    int sub_images = 1;
    AttentionMap map; // combined token-level / global similarity
    RowVec pooled;    // attention-pooled image feature
    double global = 0.0;
};

/// Prior similarities and the decoder's image conditioning. The pooled
/// feature weights areas by softmax_i(mean_j E_ij / sqrt(d_k)); the scalar
/// prior is cos(mean_i M'_i, sum_j S_{I,j} T'_j).
AlignView align_view(std::span<const AreaFeatures> subimages, const TokenFeatures &caption, const AlignParams &params);

/// Discrete version used on finished captions: cosine of mean-pooled token
/// embeddings, plus the token-level attention recomputed on the generated caption.
std::pair<double, Mat> predicted_similarity(const std::vector<std::string> &generated,
                                            const std::vector<std::string> &reference, const TextEncoder &enc,
                                            std::span<const AreaFeatures> subimages, const AlignParams &params);

struct SftExample {
    std::string id;
    Conditioning cond;
    std::vector<int> caption;
    std::vector<AreaFeatures> subimages; // raw area features
    double prior_global = 0.0;
    Mat prior_tokens;
    RowVec reference_pooled; // mean position-free embedding of the reference caption
};

/// Frozen text-side tables the soft similarity path needs.
struct SftContext {
    Mat token_embeddings;  // vocab x d, position-free text embedding of each decoder token
    Mat positions;         // max_caption x d, additive position signal of the text encoder
    AlignParams *align = nullptr;
    bool train_align = false;
};

SftContext make_sft_context(const CaptionDecoder &dec, const EmbeddingTextEncoder &enc, AlignParams &align,
                            bool train_align);

struct SftLossTerms {
    ad::Var total, ori, l_g, l_t;
};

/// Optional trainable weights: a 1x3 parameter (ori, g, t).
SftLossTerms sft_loss_var(ad::Tape &tape, std::span<const SftExample> batch, CaptionDecoder &dec, SftContext &ctx,
                          const SftWeights &w, ad::Parameter *trainable_weights = nullptr);

struct SftLossValues {
    double total = 0.0, ori = 0.0, l_g = 0.0, l_t = 0.0;
};

/// Evaluates and back-propagates (gradients accumulate into the parameters).
SftLossValues sft_loss(std::span<const SftExample> batch, CaptionDecoder &dec, SftContext &ctx, const SftWeights &w,
                       ad::Parameter *trainable_weights = nullptr);

/// Loss without touching gradients.
SftLossValues sft_evaluate(std::span<const SftExample> batch, CaptionDecoder &dec, SftContext &ctx,
                           const SftWeights &w);

struct SftTrainConfig {
    int epochs = 20;
    int batch_size = 4;
    OptimConfig optim{0.05, 0.9, 1.0};
    bool trainable_weights = false;
    std::uint64_t seed = 7;
};

struct SftLogEntry {
    int epoch = 0; // 0 is the evaluation before any update
    double l_sft = 0.0, l_ori = 0.0, l_g = 0.0, l_t = 0.0;
    SftWeights weights;
};

std::string sft_log_line(const SftLogEntry &e);

/// Called after each epoch (not for epoch 0) with the updated decoder.
using SftEpochHook = std::function<void(const SftLogEntry &, const CaptionDecoder &)>;

std::vector<SftLogEntry> train_sft(const std::vector<SftExample> &data, CaptionDecoder &dec, SftContext &ctx,
                                   SftWeights weights, const SftTrainConfig &cfg, const SftEpochHook &hook = {});

} // namespace memecap
