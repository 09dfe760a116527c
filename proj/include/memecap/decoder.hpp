#pragma once

// Small causal transformer used as the caption decoder, the reward-model
// trunk and the RL policy.
//
// Input sequence: [image token] [prefix tokens ...] [BOS] [caption tokens ...]
// The image token is a linear map of a pooled image feature; prefix tokens
// carry the chain-of-humor text. Training runs on a tape; sampling uses a
// separate key/value-cached path over plain matrices.

#include "memecap/autograd.hpp"
#include "memecap/checkpoint.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace memecap {

inline constexpr int kMaxCaptionTokens = 25;

class Vocabulary {
  public:
    static constexpr int unk = 0;
    static constexpr int bos = 1;
    static constexpr int eos = 2;
    static constexpr int num_special = 3;

    Vocabulary();
    /// Specials followed by every distinct token in first-seen order.
    static Vocabulary build(const std::vector<std::vector<std::string>> &token_lists);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens_.size()); }
    /// unk for tokens outside the vocabulary.
    int id(const std::string &token) const;
    bool contains(const std::string &token) const { return index_.count(token) > 0; }
    const std::string &token(int id) const;
    const std::vector<std::string> &tokens() const { return tokens_; }

    std::vector<int> encode(const std::vector<std::string> &tokens) const;
    std::vector<std::string> decode(std::span<const int> ids) const;

  private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

struct Conditioning {
    RowVec image;            // pooled image feature, width DecoderConfig::image_dim
    std::vector<int> prefix; // chain-of-humor token ids
};

struct DecoderConfig {
    int vocab_size = 0;
    int width = 64;
    int layers = 2;
    int ffn_mult = 4;
    int image_dim = 64;
    int max_prefix = 24;
    int max_caption = kMaxCaptionTokens;
    std::uint64_t seed = 11;

    int positions() const { return max_prefix + max_caption + 2; }
    void validate() const;
};

/// Embeddings plus transformer blocks, ending in a final layer norm.
class DecoderTrunk {
  public:
    DecoderTrunk() = default;
    explicit DecoderTrunk(const DecoderConfig &cfg);

    const DecoderConfig &config() const { return cfg_; }
    ad::ParamList params();

    /// Hidden states for [image, prefix..., BOS, caption...]; (caption.size() + prefix + 2) x width.
    ad::Var hidden(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption);

    /// Row index of the BOS position for a given conditioning.
    static int bos_position(const Conditioning &cond) { return static_cast<int>(cond.prefix.size()) + 1; }

    // ---- cached inference ----
    struct Cache {
        std::vector<Mat> keys;   // per layer, grows one row per step
        std::vector<Mat> values;
        int length = 0;
    };
    Cache start() const;
    /// Feeds one input row (already embedded, without position) and returns its final hidden row.
    RowVec step(Cache &cache, const RowVec &embedded) const;
    RowVec embed_image(const RowVec &image) const;
    RowVec embed_token(int id) const;
    /// Runs image + prefix + BOS through the cache; returns the hidden row at BOS.
    RowVec prime(Cache &cache, const Conditioning &cond) const;

    void check(const Conditioning &cond, std::span<const int> caption) const;

    void put(Blob &b, const std::string &prefix) const;
    static DecoderTrunk from_blob(const Blob &b, const std::string &prefix);

  private:
    struct Block {
        ad::Parameter ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    DecoderConfig cfg_;
    ad::Parameter tok_emb_, pos_emb_, img_w_, img_b_, lnf_g_, lnf_b_;
    std::vector<Block> blocks_;
};

struct DecodeConfig {
    /// 0 means greedy.
    double temperature = 0.0;
    std::uint64_t seed = 0;
};

class CaptionDecoder {
  public:
    CaptionDecoder() = default;
    CaptionDecoder(Vocabulary vocab, DecoderConfig cfg);

    const Vocabulary &vocab() const { return vocab_; }
    const DecoderConfig &config() const { return trunk_.config(); }
    DecoderTrunk &trunk() { return trunk_; }
    const DecoderTrunk &trunk() const { return trunk_; }
    ad::ParamList params();

    /// Masked logits of the next-token distributions at BOS and after every
    /// caption token: (caption.size() + 1) x vocab. Row t predicts caption[t]
    /// (or EOS for the last row).
    ad::Var logits(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption);
    /// Per-row log-probabilities (same shape as logits).
    ad::Var log_probs(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption);
    /// log pi(caption | cond), including the EOS term when the caption is shorter than max_caption.
    ad::Var sequence_log_prob(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption);

    /// Cached-path equivalents (no tape).
    Mat logits_cached(const Conditioning &cond, std::span<const int> caption) const;
    double sequence_log_prob_cached(const Conditioning &cond, std::span<const int> caption,
                                    double prob_floor = 0.0) const;

    std::vector<int> generate(const Conditioning &cond, const DecodeConfig &dc) const;

    /// Additive mask row for step t: specials are never emitted; EOS only after one token.
    RowVec mask_row(int step) const;

    Blob to_blob() const;
    static CaptionDecoder from_blob(const Blob &b);

  private:
    Vocabulary vocab_;
    DecoderTrunk trunk_;
    ad::Parameter out_w_, out_b_;
};

/// Tokens of a caption must be non-empty, in-vocabulary and at most max_caption long.
void check_caption(const CaptionDecoder &dec, std::span<const int> caption);

} // namespace memecap
