#pragma once

// Feature encoders for sub-images and captions, plus the chain-of-humor
// rendering used as decoder conditioning.

#include "memecap/autograd.hpp"
#include "memecap/checkpoint.hpp"
#include "memecap/corpus.hpp"
#include "memecap/image.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace memecap {

inline constexpr int kMaxSequenceLength = 1024;

struct AreaFeatures {
    Mat features; // N x d, one row per image area
    int source_index = 0;
};

struct TokenFeatures {
    Mat features; // n x d
    std::vector<std::string> tokens;
};

class VisualEncoder {
  public:
    virtual ~VisualEncoder() = default;
    virtual int width() const = 0;
    virtual AreaFeatures encode(const Image &subimage, int source_index) const = 0;
};

class TextEncoder {
  public:
    virtual ~TextEncoder() = default;
    virtual int width() const = 0;
    virtual TokenFeatures encode(const std::vector<std::string> &tokens) const = 0;
    /// Position-free embedding of a single token.
    virtual RowVec embed(const std::string &token) const = 0;
};

/// Splits the image into a grid x grid patch lattice, mean-pools the RGB
/// channels of each patch (scaled to [0,1]) and maps the 3-vector to width d
/// with a linear layer: row = means * weight + bias.
class PatchMeanEncoder final : public VisualEncoder {
  public:
    PatchMeanEncoder(int grid, int d, std::uint64_t seed);
    /// Encoder with explicit weight (3 x d) and bias (1 x d).
    PatchMeanEncoder(int grid, Mat weight, Mat bias);

    int width() const override { return static_cast<int>(weight_.value.cols()); }
    int grid() const { return grid_; }
    AreaFeatures encode(const Image &subimage, int source_index) const override;
    /// N x 3 per-patch channel means, row-major patch order.
    Mat patch_means(const Image &subimage) const;

    ad::ParamList params() { return {&weight_, &bias_}; }
    Blob to_blob() const;
    static PatchMeanEncoder from_blob(const Blob &b);

  private:
    int grid_;
    ad::Parameter weight_;
    ad::Parameter bias_;
};

/// Embedding lookup plus a sinusoidal position signal. Tokens outside the
/// vocabulary hash into reserved buckets, or raise when the vocabulary is closed.
class EmbeddingTextEncoder final : public TextEncoder {
  public:
    struct Options {
        int d = 64;
        int unknown_buckets = 8;
        bool closed_vocabulary = false;
        double position_scale = 0.1;
        std::uint64_t seed = 1;
    };

    EmbeddingTextEncoder(std::vector<std::string> vocabulary, Options opt);

    int width() const override { return static_cast<int>(embedding_.value.cols()); }
    TokenFeatures encode(const std::vector<std::string> &tokens) const override;
    RowVec embed(const std::string &token) const override;
    /// Row of the embedding table used for a token.
    int row_of(const std::string &token) const;

    const std::vector<std::string> &vocabulary() const { return vocab_; }
    const Options &options() const { return opt_; }
    ad::Parameter &embedding() { return embedding_; }
    const ad::Parameter &embedding() const { return embedding_; }
    ad::ParamList params() { return {&embedding_}; }

    Blob to_blob() const;
    static EmbeddingTextEncoder from_blob(const Blob &b);

  private:
    std::vector<std::string> vocab_;
    std::map<std::string, int> index_;
    Options opt_;
    ad::Parameter embedding_;
};

/// Sinusoidal position signal row for position pos and width d.
RowVec position_signal(int pos, int d);

/// Features of one sub-image combined with its enhanced variants.
enum class VariantCombine { average, concat };

AreaFeatures encode_with_variants(const VisualEncoder &enc, const Image &original, const std::vector<Image> &variants,
                                  int source_index, VariantCombine mode);

std::string assemble_chain_of_humor(const ChainOfHumor &c);

/// FNV-1a 64-bit; stable across platforms (used for unknown-token buckets).
std::uint64_t fnv1a(std::string_view s);

} // namespace memecap
