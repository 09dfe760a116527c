#pragma once

// Preference rankings (human, attention-derived, fused), the scalar reward
// model trained with the pairwise ranking loss, and inter-rater agreement.

#include "memecap/align.hpp"
#include "memecap/decoder.hpp"
#include "memecap/optim.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace memecap {

struct Candidate {
    std::string id;
    std::vector<std::string> tokens;
    AttentionMap map; // areas x tokens
};

struct CandidateSet {
    std::string meme_id;
    std::vector<Candidate> candidates;
    std::string provenance; // checkpoint the captions were sampled from

    void validate() const;
    const Candidate &at(const std::string &id) const;
};

enum class PreferenceSource { human, attention, fused };

std::string_view to_string(PreferenceSource s);
PreferenceSource parse_source(std::string_view s);

inline constexpr double kAgreementGate = 0.7;

struct PreferenceRecord {
    std::string meme_id;
    std::vector<std::string> ordering; // worst to best
    PreferenceSource source = PreferenceSource::attention;
    std::optional<double> agreement;
    std::vector<std::string> annotator_ids;
    std::string timestamp;

    void validate() const;
};

std::string preference_line(const PreferenceRecord &r);
PreferenceRecord parse_preference_line(std::string_view line);

/// Append-only line-delimited store; each append is flushed to disk before returning.
void append_preference(const std::filesystem::path &path, const PreferenceRecord &r);
std::vector<PreferenceRecord> load_preferences(const std::filesystem::path &path);

/// Base-2 Jensen-Shannon divergence of two distributions (normalized internally).
double jsd(const Vec &p, const Vec &q);

/// Mean per-token alignment 1 - JSD(candidate column || prior column). Tokens
/// past the prior's length compare with the prior's global-weighted area mixture.
double attention_alignment(const AttentionMap &candidate, const AttentionMap &prior);

/// Orders candidates worst to best by attention_alignment; on ties the
/// lexicographically smaller id ranks higher.
PreferenceRecord attention_rank(const CandidateSet &set, const AttentionMap &prior);

/// Weighted Borda fusion; a candidate's points are its 0-based position in a worst-to-best ordering.
PreferenceRecord fuse_rankings(const PreferenceRecord &human, const PreferenceRecord &attention,
                               double human_weight = 0.7);

/// (winner, loser) for every unordered pair.
std::vector<std::pair<std::string, std::string>> ranking_pairs(const std::vector<std::string> &ordering);

/// Orders ids worst to best by score (ascending), smaller id ranks higher on ties.
std::vector<std::string> order_by_score(std::vector<std::pair<std::string, double>> scored);

// ---- agreement ----

enum class AlphaLevel { nominal, ordinal, interval };

/// ratings[annotator][item]; nullopt marks a missing rating.
double krippendorff_alpha(const std::vector<std::vector<std::optional<double>>> &ratings,
                          AlphaLevel level = AlphaLevel::ordinal);

// ---- reward model ----

class RewardScorer {
  public:
    virtual ~RewardScorer() = default;
    virtual double score(const Conditioning &cond, std::span<const int> caption) const = 0;
};

class RewardModel final : public RewardScorer {
  public:
    RewardModel() = default;
    /// Starts from a copy of the decoder's trunk.
    explicit RewardModel(const CaptionDecoder &base, std::uint64_t seed = 5);

    ad::ParamList params();
    const Vocabulary &vocab() const { return vocab_; }
    DecoderTrunk &trunk() { return trunk_; }

    /// Linear head on the mean hidden state over caption positions.
    ad::Var score_var(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption);
    double score(const Conditioning &cond, std::span<const int> caption) const override;

    Blob to_blob() const;
    static RewardModel from_blob(const Blob &b);

  private:
    Vocabulary vocab_;
    DecoderTrunk trunk_;
    ad::Parameter head_w_, head_b_;
};

/// Candidates of one meme ordered worst to best.
struct RankingExample {
    std::string meme_id;
    Conditioning cond;
    std::vector<std::vector<int>> ordered;
};

/// -(1 / #pairs) sum log sigmoid(r_w - r_l) over given margins.
double ranking_loss_from_margins(std::span<const double> margins);

/// Pairwise ranking loss over all pairs of one example, on the tape.
ad::Var pairwise_ranking_loss_var(ad::Tape &tape, RewardModel &model, const RankingExample &ex);
/// Evaluates and accumulates gradients.
double pairwise_ranking_loss(RewardModel &model, const RankingExample &ex);

struct RewardTrainConfig {
    int steps = 500;
    int batch_size = 4;
    OptimConfig optim{0.05, 0.9, 1.0};
    std::uint64_t seed = 3;
    /// Stop early once the running loss falls below this value (0 disables).
    double target_loss = 0.0;
};

/// Mean loss of each step.
std::vector<double> train_reward(const std::vector<RankingExample> &data, RewardModel &model,
                                 const RewardTrainConfig &cfg);

/// Drops human records at or below the agreement gate; throws "no usable preferences" when nothing is left.
std::vector<PreferenceRecord> usable_preferences(const std::vector<PreferenceRecord> &records);

/// Fraction of (better, worse) pairs the scorer orders correctly.
double pairwise_accuracy(const RewardScorer &scorer, const std::vector<RankingExample> &data);

} // namespace memecap
