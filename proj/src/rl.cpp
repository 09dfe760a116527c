#include "memecap/rl.hpp"

#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace memecap {

void RlWeights::validate() const {
    if (!(w1 >= 0.0) || !(w2 >= 0.0) || !std::isfinite(w1) || !std::isfinite(w2)) {
        throw ValidationError("RL weights must be finite and non-negative");
    }
    if (w1 == 0.0 && w2 == 0.0) {
        throw ValidationError("RL weights cannot both be zero");
    }
}

PolicyPair PolicyPair::from_reference(const CaptionDecoder &sft) { return PolicyPair{sft, sft}; }

void PolicyPair::validate() const {
    if (policy.vocab().tokens() != reference.vocab().tokens()) {
        throw ValidationError("policy and reference vocabularies differ");
    }
    const DecoderConfig &a = policy.config(), &b = reference.config();
    if (a.image_dim != b.image_dim || a.max_prefix != b.max_prefix || a.max_caption != b.max_caption) {
        throw ValidationError("policy and reference conditioning interfaces differ");
    }
}

std::string decoder_checksum(const CaptionDecoder &dec) { return sha256_hex(serialize_blob(dec.to_blob())); }

double kl_to_sft(std::span<const int> caption, const Conditioning &cond, const PolicyPair &pair, double prob_floor) {
    return pair.policy.sequence_log_prob_cached(cond, caption) -
           pair.reference.sequence_log_prob_cached(cond, caption, prob_floor);
}

RlObjectiveResult rl_objective(std::span<const RlSample> samples, std::span<const Conditioning> contexts,
                               const RewardScorer &reward, PolicyPair &pair, const RlObjectiveConfig &cfg) {
    if (samples.empty()) {
        throw ValidationError("rl_objective: empty batch");
    }
    cfg.weights.validate();
    // Merge identical samples so each distinct caption is differentiated once.
    std::map<std::pair<int, std::vector<int>>, double> mass;
    double total_weight = 0.0;
    for (const RlSample &s : samples) {
        if (s.context < 0 || static_cast<std::size_t>(s.context) >= contexts.size()) {
            throw ValidationError("rl_objective: sample refers to an unknown context");
        }
        if (!(s.weight >= 0.0)) {
            throw ValidationError("rl_objective: negative sample weight");
        }
        mass[{s.context, s.caption}] += s.weight;
        total_weight += s.weight;
    }
    if (!(total_weight > 0.0)) {
        throw ValidationError("rl_objective: samples carry no weight");
    }
    const double kl_sign = cfg.divergence_bonus ? 1.0 : -1.0;
    struct Entry {
        const std::pair<int, std::vector<int>> *key;
        double w, r, kl, f;
    };
    std::vector<Entry> entries;
    RlObjectiveResult out;
    for (const auto &[key, m] : mass) {
        const Conditioning &cond = contexts[static_cast<std::size_t>(key.first)];
        Entry e{&key, m / total_weight, 0.0, 0.0, 0.0};
        e.r = reward.score(cond, key.second);
        e.kl = kl_to_sft(key.second, cond, pair, cfg.prob_floor);
        e.f = cfg.weights.w1 * e.r + kl_sign * cfg.weights.w2 * e.kl;
        if (!std::isfinite(e.f)) {
            throw NumericError("rl_objective: non-finite per-sample objective");
        }
        out.mean_reward += e.w * e.r;
        out.mean_kl += e.w * e.kl;
        out.j += e.w * e.f;
        entries.push_back(e);
    }
    const double baseline = out.j;
    ad::Tape tape;
    ad::Var surrogate;
    for (const Entry &e : entries) {
        const double coef = e.w * (e.f - baseline);
        if (coef == 0.0) {
            continue;
        }
        ad::Var lp = pair.policy.sequence_log_prob(tape, contexts[static_cast<std::size_t>(e.key->first)],
                                                   e.key->second);
        ad::Var t = ad::scale(lp, coef);
        surrogate = surrogate.valid() ? ad::add(surrogate, t) : t;
    }
    if (surrogate.valid()) {
        tape.backward(surrogate);
    }
    return out;
}

std::string rl_log_line(const RlLogEntry &e) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["J"] = e.j;
    j["mean_reward"] = e.mean_reward;
    j["mean_kl"] = e.mean_kl;
    return j.dump();
}

std::vector<RlLogEntry> rl_train(const std::vector<Conditioning> &corpus, PolicyPair &pair, const RewardScorer &reward,
                                 const RlTrainConfig &cfg) {
    if (corpus.empty()) {
        throw ValidationError("rl_train: empty corpus");
    }
    if (cfg.samples_per_step < 1 || cfg.steps < 0) {
        throw ValidationError("rl_train: invalid step configuration");
    }
    pair.validate();
    cfg.objective.weights.validate();
    const std::string ref_before = decoder_checksum(pair.reference);

    ad::ParamList params = pair.policy.params();
    ad::zero_grads(params);
    SgdMomentum opt(params, cfg.optim);
    std::mt19937_64 rng(cfg.seed);
    std::vector<int> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    std::vector<RlLogEntry> log;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<RlSample> batch;
        for (int i = 0; i < cfg.samples_per_step; ++i) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const int ctx = order[cursor++];
            const std::uint64_t seed = cfg.seed * 1000003ULL + static_cast<std::uint64_t>(step) * 4099ULL +
                                       static_cast<std::uint64_t>(i);
            RlSample s;
            s.context = ctx;
            s.caption = pair.policy.generate(corpus[static_cast<std::size_t>(ctx)], {cfg.temperature, seed});
            s.weight = 1.0;
            batch.push_back(std::move(s));
        }
        const RlObjectiveResult r = rl_objective(batch, corpus, reward, pair, cfg.objective);
        if (r.mean_kl > cfg.kl_ceiling) {
            throw NumericError("rl_train: mean KL " + std::to_string(r.mean_kl) + " exceeded the ceiling " +
                               std::to_string(cfg.kl_ceiling) + " at step " + std::to_string(step) +
                               "; lower the learning rate or raise w2");
        }
        opt.step(true);
        log.push_back({step, r.j, r.mean_reward, r.mean_kl});
    }
    if (decoder_checksum(pair.reference) != ref_before) {
        throw Error("rl_train: reference decoder changed during training");
    }
    return log;
}

} // namespace memecap
