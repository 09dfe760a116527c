#pragma once

// Policy refinement against a reward model with a KL anchor to the SFT decoder.
// The trainer ascends J = w1 * mean r - w2 * mean(log pi - log pi_ref) using a
// score-function gradient with a mean baseline.

#include "memecap/decoder.hpp"
#include "memecap/optim.hpp"
#include "memecap/reward.hpp"

#include <span>
#include <string>
#include <vector>

namespace memecap {

struct RlWeights {
    double w1 = 0.4;
    double w2 = 0.6;

    void validate() const;
};

struct PolicyPair {
    CaptionDecoder policy;
    CaptionDecoder reference;

    /// Policy starts as a copy of the reference.
    static PolicyPair from_reference(const CaptionDecoder &sft);
    void validate() const;
};

/// SHA-256 over a decoder's serialized parameters.
std::string decoder_checksum(const CaptionDecoder &dec);

/// log pi_policy(y|x) - log pi_ref(y|x) summed over tokens. Reference
/// probabilities are floored at prob_floor (<= 0 raises on a zero probability).
double kl_to_sft(std::span<const int> caption, const Conditioning &cond, const PolicyPair &pair,
                 double prob_floor = 1e-8);

struct RlSample {
    int context = 0; // index of the conditioning in the caller's list
    std::vector<int> caption;
    /// Probability mass of the sample; uniform 1/N for Monte-Carlo batches,
    /// pi(y|x) when the caption space is enumerated.
    double weight = 1.0;
};

struct RlObjectiveConfig {
    RlWeights weights;
    /// Adds w2 * KL instead of subtracting it, rewarding divergence from the reference.
    bool divergence_bonus = false;
    double prob_floor = 1e-8;
};

struct RlObjectiveResult {
    double j = 0.0;
    double mean_reward = 0.0;
    double mean_kl = 0.0;
};

/// Computes J over the (weighted) samples and accumulates the score-function
/// estimate of dJ/dphi into the policy's parameter grads. Identical samples are
/// merged before differentiation.
RlObjectiveResult rl_objective(std::span<const RlSample> samples, std::span<const Conditioning> contexts,
                               const RewardScorer &reward, PolicyPair &pair, const RlObjectiveConfig &cfg);

struct RlTrainConfig {
    int steps = 200;
    int samples_per_step = 16;
    double temperature = 1.0;
    OptimConfig optim{0.05, 0.9, 1.0};
    RlObjectiveConfig objective;
    double kl_ceiling = 50.0;
    std::uint64_t seed = 13;
};

struct RlLogEntry {
    int step = 0;
    double j = 0.0, mean_reward = 0.0, mean_kl = 0.0;
};

std::string rl_log_line(const RlLogEntry &e);

/// Samples are drawn from the current policy; per-sample seeds derive from (seed, step, index).
std::vector<RlLogEntry> rl_train(const std::vector<Conditioning> &corpus, PolicyPair &pair, const RewardScorer &reward,
                                 const RlTrainConfig &cfg);

} // namespace memecap
