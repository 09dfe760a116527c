#pragma once

// Caption metrics (BLEU, ROUGE-L, CIDEr, exact-match METEOR), rubric scaling
// and the HAverage / MAverage / Average composite.

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace memecap {

using Tokens = std::vector<std::string>;

/// Clipped n-gram precision geometric mean times brevity penalty. Zero
/// counts for n >= 2 are smoothed to 1 / (total + 1). An empty candidate
/// scores 0 and sets *empty_candidate when given.
double bleu(const Tokens &candidate, const std::vector<Tokens> &references, int max_n = 4,
            bool *empty_candidate = nullptr);

/// LCS-based F-measure, F = (1 + b^2) P R / (R + b^2 P).
double rouge_l(const Tokens &candidate, const Tokens &reference, double beta = 1.2);

/// Per-meme CIDEr (n = 1..4, tf-idf cosine averaged over n and references,
/// times 10). Document frequencies come from the references of the corpus.
std::vector<double> cider(const std::vector<Tokens> &candidates, const std::vector<std::vector<Tokens>> &references);

/// Exact-match METEOR: Fmean with alpha = 0.9 times 1 - 0.5 (chunks / matches)^3,
/// using the maximum-match alignment with the fewest chunks.
double meteor(const Tokens &candidate, const Tokens &reference);

/// Longest common subsequence length.
std::size_t lcs_length(const Tokens &a, const Tokens &b);

struct RubricScores {
    int informativeness = 0;
    int relevance = 0;
    int creativity = 0;
    int humor = 0;
};

struct ScaledRubric {
    int informativeness = 0, relevance = 0, creativity = 0, humor = 0;
};

/// raw x 20; raw values outside 1..5 are rejected.
ScaledRubric rubric_scale(const RubricScores &raw);

struct Composite {
    std::optional<double> haverage; // absent without human ratings
    double maverage = 0.0;
    std::optional<double> average;
};

/// Means of the four human and four automatic columns, and their mean.
/// Values are unrounded; use round_half_up for reporting.
Composite composite_score(const std::optional<std::array<double, 4>> &human, const std::array<double, 4> &automatic);

/// Decimal round-half-up. A relative nudge of 1e-9 absorbs binary
/// representation error (71.345 is stored as 71.34499...).
double round_half_up(double x, int digits = 2);

// ---- reports ----

struct MemeScores {
    std::string id;
    std::string structure;
    Tokens candidate;
    double bleu = 0.0, rouge_l = 0.0, cider = 0.0, meteor = 0.0;
    bool empty_candidate = false;
    std::optional<std::array<double, 4>> rubric; // scaled means over annotators
};

struct ReportSummary {
    std::string label;
    std::size_t count = 0;
    std::optional<std::array<double, 4>> human; // Info, Rele, Crea, Humo
    std::array<double, 4> automatic{};          // BLEU, ROUGE, CIDEr, METEOR (x100 / native)
    Composite composite;
};

struct EvaluationReport {
    std::string config_hash;
    std::vector<MemeScores> memes;
    std::vector<ReportSummary> summaries; // "all", "single", "multi"

    /// Line-delimited per-meme records followed by one summary line per group.
    std::string to_lines() const;
    std::string to_csv() const;
};

/// Scores each candidate against its single reference and builds the summaries.
/// BLEU, ROUGE-L and METEOR are reported x100; CIDEr is reported x10 of its
/// native value so that self-matches land at 100.
EvaluationReport evaluate_captions(const std::vector<std::string> &ids, const std::vector<std::string> &structures,
                                   const std::vector<Tokens> &candidates, const std::vector<Tokens> &references,
                                   const std::vector<std::optional<std::array<double, 4>>> &rubric,
                                   const std::string &config_hash);

} // namespace memecap
