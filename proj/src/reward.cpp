#include "memecap/reward.hpp"

#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

namespace memecap {

void CandidateSet::validate() const {
    if (candidates.size() < 2) {
        throw ValidationError("candidate set for '" + meme_id + "' needs at least two captions");
    }
    std::set<std::string> ids, captions;
    for (const Candidate &c : candidates) {
        if (!ids.insert(c.id).second) {
            throw ValidationError("candidate set for '" + meme_id + "' repeats id '" + c.id + "'");
        }
        if (!captions.insert(join_tokens(c.tokens)).second) {
            throw ValidationError("candidate set for '" + meme_id + "' repeats a caption");
        }
    }
}

const Candidate &CandidateSet::at(const std::string &id) const {
    for (const Candidate &c : candidates) {
        if (c.id == id) {
            return c;
        }
    }
    throw NotFoundError("candidate '" + id + "' not in set for '" + meme_id + "'");
}

std::string_view to_string(PreferenceSource s) {
    switch (s) {
    case PreferenceSource::human:
        return "human";
    case PreferenceSource::attention:
        return "attention";
    case PreferenceSource::fused:
        return "fused";
    }
    return "?";
}

PreferenceSource parse_source(std::string_view s) {
    if (s == "human") {
        return PreferenceSource::human;
    }
    if (s == "attention") {
        return PreferenceSource::attention;
    }
    if (s == "fused") {
        return PreferenceSource::fused;
    }
    throw ValidationError("unknown preference source '" + std::string(s) + "'");
}

void PreferenceRecord::validate() const {
    if (ordering.size() < 2) {
        throw ValidationError("preference for '" + meme_id + "' orders fewer than two candidates");
    }
    std::set<std::string> seen(ordering.begin(), ordering.end());
    if (seen.size() != ordering.size()) {
        throw ValidationError("preference for '" + meme_id + "' is not a permutation (repeated candidate)");
    }
    if (agreement) {
        if (!(*agreement >= -1.0 && *agreement <= 1.0)) {
            throw ValidationError("preference agreement outside [-1, 1]");
        }
    }
    if (source == PreferenceSource::human && (!agreement || !(*agreement > kAgreementGate))) {
        throw ValidationError("human preference for '" + meme_id + "' does not pass the agreement gate");
    }
}

std::string preference_line(const PreferenceRecord &r) {
    nlohmann::json j;
    j["meme_id"] = r.meme_id;
    j["ordering"] = r.ordering;
    j["source"] = std::string(to_string(r.source));
    j["agreement"] = r.agreement ? nlohmann::json(*r.agreement) : nlohmann::json(nullptr);
    j["annotator_ids"] = r.annotator_ids;
    j["timestamp"] = r.timestamp;
    return j.dump();
}

PreferenceRecord parse_preference_line(std::string_view line) {
    PreferenceRecord r;
    try {
        const nlohmann::json j = nlohmann::json::parse(line);
        r.meme_id = j.at("meme_id").get<std::string>();
        r.ordering = j.at("ordering").get<std::vector<std::string>>();
        r.source = parse_source(j.at("source").get<std::string>());
        if (j.contains("agreement") && !j["agreement"].is_null()) {
            r.agreement = j["agreement"].get<double>();
        }
        if (j.contains("annotator_ids")) {
            r.annotator_ids = j["annotator_ids"].get<std::vector<std::string>>();
        }
        if (j.contains("timestamp")) {
            r.timestamp = j["timestamp"].get<std::string>();
        }
    } catch (const nlohmann::json::exception &e) {
        throw ValidationError(std::string("malformed preference record: ") + e.what());
    }
    return r;
}

void append_preference(const std::filesystem::path &path, const PreferenceRecord &r) {
    r.validate();
    append_durable(path, preference_line(r) + "\n");
}

std::vector<PreferenceRecord> load_preferences(const std::filesystem::path &path) {
    std::vector<PreferenceRecord> out;
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open preference store " + path.string());
    }
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            out.push_back(parse_preference_line(line));
        }
    }
    return out;
}

// ---- attention ranking ----

double jsd(const Vec &p_in, const Vec &q_in) {
    if (p_in.size() != q_in.size() || p_in.size() == 0) {
        throw ShapeError("jsd: distributions differ in length");
    }
    const double sp = p_in.sum(), sq = q_in.sum();
    if (!(sp > 0.0) || !(sq > 0.0) || (p_in.array() < 0.0).any() || (q_in.array() < 0.0).any()) {
        throw NumericError("jsd: inputs must be non-negative with positive mass");
    }
    const Vec p = p_in / sp, q = q_in / sq;
    const Vec m = 0.5 * (p + q);
    auto kl = [&](const Vec &a) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            if (a(i) > 0.0) {
                s += a(i) * std::log2(a(i) / m(i));
            }
        }
        return s;
    };
    return std::clamp(0.5 * kl(p) + 0.5 * kl(q), 0.0, 1.0);
}

double attention_alignment(const AttentionMap &candidate, const AttentionMap &prior) {
    if (candidate.areas() != prior.areas()) {
        throw ShapeError("attention_rank: candidate map has " + std::to_string(candidate.areas()) +
                         " areas but the prior has " + std::to_string(prior.areas()));
    }
    if (candidate.tokens() == 0 || prior.tokens() == 0) {
        throw ValidationError("attention_rank: empty attention map");
    }
    // Area distribution implied by the prior as a whole: pi_i ~ sum_j S_j S_ij.
    const Vec mixture = prior.token_level * prior.global.transpose();
    double total = 0.0;
    for (Eigen::Index j = 0; j < candidate.tokens(); ++j) {
        const Vec col = candidate.token_level.col(j);
        const Vec ref = j < prior.tokens() ? Vec(prior.token_level.col(j)) : mixture;
        total += 1.0 - jsd(col, ref);
    }
    return total / static_cast<double>(candidate.tokens());
}

std::vector<std::string> order_by_score(std::vector<std::pair<std::string, double>> scored) {
    std::sort(scored.begin(), scored.end(), [](const auto &a, const auto &b) {
        if (a.second != b.second) {
            return a.second < b.second;
        }
        return a.first > b.first; // smaller id ends up later, i.e. better
    });
    std::vector<std::string> out;
    for (auto &s : scored) {
        out.push_back(std::move(s.first));
    }
    return out;
}

PreferenceRecord attention_rank(const CandidateSet &set, const AttentionMap &prior) {
    set.validate();
    std::vector<std::pair<std::string, double>> scored;
    for (const Candidate &c : set.candidates) {
        scored.emplace_back(c.id, attention_alignment(c.map, prior));
    }
    PreferenceRecord r;
    r.meme_id = set.meme_id;
    r.source = PreferenceSource::attention;
    r.ordering = order_by_score(std::move(scored));
    return r;
}

PreferenceRecord fuse_rankings(const PreferenceRecord &human, const PreferenceRecord &attention, double human_weight) {
    if (!(human_weight >= 0.0 && human_weight <= 1.0)) {
        throw ValidationError("fuse_rankings: human weight must lie in [0, 1]");
    }
    if (human.meme_id != attention.meme_id) {
        throw ValidationError("fuse_rankings: records belong to different memes");
    }
    std::map<std::string, double> hp, ap;
    for (std::size_t i = 0; i < human.ordering.size(); ++i) {
        hp[human.ordering[i]] = static_cast<double>(i);
    }
    for (std::size_t i = 0; i < attention.ordering.size(); ++i) {
        ap[attention.ordering[i]] = static_cast<double>(i);
    }
    if (hp.size() != ap.size() || hp.size() != human.ordering.size() || ap.size() != attention.ordering.size() ||
        !std::equal(hp.begin(), hp.end(), ap.begin(), [](const auto &a, const auto &b) { return a.first == b.first; })) {
        throw ValidationError("fuse_rankings: candidate sets differ for '" + human.meme_id + "'");
    }
    std::vector<std::pair<std::string, double>> scored;
    for (const auto &[id, h] : hp) {
        scored.emplace_back(id, human_weight * h + (1.0 - human_weight) * ap[id]);
    }
    PreferenceRecord r;
    r.meme_id = human.meme_id;
    r.source = PreferenceSource::fused;
    r.ordering = order_by_score(std::move(scored));
    r.annotator_ids = human.annotator_ids;
    return r;
}

std::vector<std::pair<std::string, std::string>> ranking_pairs(const std::vector<std::string> &ordering) {
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t lo = 0; lo < ordering.size(); ++lo) {
        for (std::size_t hi = lo + 1; hi < ordering.size(); ++hi) {
            out.emplace_back(ordering[hi], ordering[lo]);
        }
    }
    return out;
}

// ---- agreement ----

double krippendorff_alpha(const std::vector<std::vector<std::optional<double>>> &ratings, AlphaLevel level) {
    if (ratings.size() < 2) {
        throw ValidationError("krippendorff_alpha: need at least two annotators");
    }
    const std::size_t items = ratings[0].size();
    for (const auto &row : ratings) {
        if (row.size() != items) {
            throw ShapeError("krippendorff_alpha: annotators rated different item counts");
        }
    }
    std::vector<double> values;
    for (const auto &row : ratings) {
        for (const auto &v : row) {
            if (v) {
                if (!std::isfinite(*v)) {
                    throw ValidationError("krippendorff_alpha: non-finite rating");
                }
                values.push_back(*v);
            }
        }
    }
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    const std::size_t k = values.size();
    auto index = [&](double v) {
        return static_cast<std::size_t>(std::lower_bound(values.begin(), values.end(), v) - values.begin());
    };

    Mat o = Mat::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    bool pairable = false;
    for (std::size_t u = 0; u < items; ++u) {
        std::vector<std::size_t> vs;
        for (const auto &row : ratings) {
            if (row[u]) {
                vs.push_back(index(*row[u]));
            }
        }
        if (vs.size() < 2) {
            continue;
        }
        pairable = true;
        const double w = 1.0 / static_cast<double>(vs.size() - 1);
        for (std::size_t a = 0; a < vs.size(); ++a) {
            for (std::size_t b = 0; b < vs.size(); ++b) {
                if (a != b) {
                    o(static_cast<Eigen::Index>(vs[a]), static_cast<Eigen::Index>(vs[b])) += w;
                }
            }
        }
    }
    if (!pairable) {
        throw ValidationError("krippendorff_alpha: no item was rated by two or more annotators");
    }
    const Vec n_c = o.rowwise().sum();
    const double n = n_c.sum();

    auto delta2 = [&](std::size_t c, std::size_t e) -> double {
        if (c == e) {
            return 0.0;
        }
        switch (level) {
        case AlphaLevel::nominal:
            return 1.0;
        case AlphaLevel::interval:
            return (values[c] - values[e]) * (values[c] - values[e]);
        case AlphaLevel::ordinal: {
            const std::size_t lo = std::min(c, e), hi = std::max(c, e);
            double s = 0.0;
            for (std::size_t g = lo; g <= hi; ++g) {
                s += n_c(static_cast<Eigen::Index>(g));
            }
            s -= 0.5 * (n_c(static_cast<Eigen::Index>(lo)) + n_c(static_cast<Eigen::Index>(hi)));
            return s * s;
        }
        }
        return 0.0;
    };

    double d_o = 0.0, d_e = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t e = 0; e < k; ++e) {
            const double d = delta2(c, e);
            d_o += o(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(e)) * d;
            d_e += n_c(static_cast<Eigen::Index>(c)) * n_c(static_cast<Eigen::Index>(e)) * d;
        }
    }
    if (d_e == 0.0) {
        // Every pairable rating is the same value: no disagreement is possible.
        return 1.0;
    }
    return 1.0 - (n - 1.0) * d_o / d_e;
}

// ---- reward model ----

RewardModel::RewardModel(const CaptionDecoder &base, std::uint64_t seed)
    : vocab_(base.vocab()), trunk_(base.trunk()) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.1 / std::sqrt(static_cast<double>(base.config().width)));
    Mat w(base.config().width, 1);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        w(i, 0) = dist(rng);
    }
    head_w_ = ad::Parameter("head_w", w);
    head_b_ = ad::Parameter("head_b", Mat::Zero(1, 1));
}

ad::ParamList RewardModel::params() {
    ad::ParamList ps = trunk_.params();
    ps.push_back(&head_w_);
    ps.push_back(&head_b_);
    return ps;
}

ad::Var RewardModel::score_var(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption) {
    if (caption.empty()) {
        throw ValidationError("reward model: empty caption");
    }
    ad::Var h = trunk_.hidden(tape, cond, caption);
    ad::Var pooled = ad::col_mean(ad::slice_rows(h, DecoderTrunk::bos_position(cond) + 1,
                                                 static_cast<Eigen::Index>(caption.size())));
    return ad::add(ad::matmul(pooled, tape.param(head_w_)), tape.param(head_b_));
}

double RewardModel::score(const Conditioning &cond, std::span<const int> caption) const {
    if (caption.empty()) {
        throw ValidationError("reward model: empty caption");
    }
    trunk_.check(cond, caption);
    DecoderTrunk::Cache cache = trunk_.start();
    trunk_.prime(cache, cond);
    RowVec acc = RowVec::Zero(trunk_.config().width);
    for (int id : caption) {
        acc += trunk_.step(cache, trunk_.embed_token(id));
    }
    acc /= static_cast<double>(caption.size());
    const double r = (acc * head_w_.value)(0, 0) + head_b_.value(0, 0);
    if (!std::isfinite(r)) {
        throw NumericError("reward model produced a non-finite score");
    }
    return r;
}

Blob RewardModel::to_blob() const {
    Blob b;
    b.kind = "reward-model";
    std::string joined;
    for (const std::string &t : vocab_.tokens()) {
        joined += t;
        joined += '\n';
    }
    b.meta["vocab"] = joined;
    trunk_.put(b, "trunk.");
    put_params(b, {const_cast<ad::Parameter *>(&head_w_), const_cast<ad::Parameter *>(&head_b_)}, "scalar_head.");
    return b;
}

RewardModel RewardModel::from_blob(const Blob &b) {
    if (b.kind != "reward-model") {
        throw Error("expected a reward-model blob, got '" + b.kind + "'");
    }
    RewardModel m;
    std::vector<std::string> toks;
    std::string cur;
    for (char c : b.meta_at("vocab")) {
        if (c == '\n') {
            toks.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    m.vocab_ = Vocabulary::from_tokens(std::move(toks));
    m.trunk_ = DecoderTrunk::from_blob(b, "trunk.");
    m.head_w_ = ad::Parameter("head_w", Mat::Zero(m.trunk_.config().width, 1));
    m.head_b_ = ad::Parameter("head_b", Mat::Zero(1, 1));
    get_params(b, {&m.head_w_, &m.head_b_}, "scalar_head.");
    return m;
}

double ranking_loss_from_margins(std::span<const double> margins) {
    if (margins.empty()) {
        throw ValidationError("pairwise_ranking_loss: no pairs");
    }
    double s = 0.0;
    for (double m : margins) {
        if (!std::isfinite(m)) {
            throw NumericError("pairwise_ranking_loss: non-finite reward margin");
        }
        // -log sigmoid(m) = log(1 + e^-m), computed stably
        s += m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
    }
    return s / static_cast<double>(margins.size());
}

ad::Var pairwise_ranking_loss_var(ad::Tape &tape, RewardModel &model, const RankingExample &ex) {
    if (ex.ordered.size() < 2) {
        throw ValidationError("pairwise_ranking_loss: need at least two ranked candidates");
    }
    std::vector<ad::Var> scores;
    for (const auto &c : ex.ordered) {
        scores.push_back(model.score_var(tape, ex.cond, c));
    }
    ad::Var total;
    int pairs = 0;
    for (std::size_t lo = 0; lo < scores.size(); ++lo) {
        for (std::size_t hi = lo + 1; hi < scores.size(); ++hi) {
            ad::Var t = ad::log_sigmoid(ad::sub(scores[hi], scores[lo]));
            total = total.valid() ? ad::add(total, t) : t;
            ++pairs;
        }
    }
    return ad::scale(total, -1.0 / pairs);
}

double pairwise_ranking_loss(RewardModel &model, const RankingExample &ex) {
    ad::Tape tape;
    ad::Var loss = pairwise_ranking_loss_var(tape, model, ex);
    const double v = loss.scalar();
    if (!std::isfinite(v)) {
        throw NumericError("pairwise_ranking_loss: non-finite loss");
    }
    tape.backward(loss);
    return v;
}

std::vector<double> train_reward(const std::vector<RankingExample> &data, RewardModel &model,
                                 const RewardTrainConfig &cfg) {
    if (data.empty()) {
        throw ValidationError("no usable preferences");
    }
    ad::ParamList params = model.params();
    ad::zero_grads(params);
    SgdMomentum opt(params, cfg.optim);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;
    const int bs = std::max(1, cfg.batch_size);
    std::vector<double> log;
    double running = -1.0;
    for (int step = 0; step < cfg.steps; ++step) {
        ad::Tape tape;
        ad::Var total;
        for (int b = 0; b < bs; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            ad::Var l = pairwise_ranking_loss_var(tape, model, data[order[cursor++]]);
            total = total.valid() ? ad::add(total, l) : l;
        }
        total = ad::scale(total, 1.0 / bs);
        const double v = total.scalar();
        if (!std::isfinite(v)) {
            throw NumericError("train_reward: non-finite loss at step " + std::to_string(step));
        }
        tape.backward(total);
        opt.step();
        log.push_back(v);
        running = running < 0.0 ? v : 0.9 * running + 0.1 * v;
        if (cfg.target_loss > 0.0 && running < cfg.target_loss) {
            break;
        }
    }
    return log;
}

std::vector<PreferenceRecord> usable_preferences(const std::vector<PreferenceRecord> &records) {
    std::vector<PreferenceRecord> out;
    for (const PreferenceRecord &r : records) {
        if (r.source == PreferenceSource::human && (!r.agreement || !(*r.agreement > kAgreementGate))) {
            continue;
        }
        out.push_back(r);
    }
    if (out.empty()) {
        throw ValidationError("no usable preferences");
    }
    return out;
}

double pairwise_accuracy(const RewardScorer &scorer, const std::vector<RankingExample> &data) {
    std::size_t correct = 0, total = 0;
    for (const RankingExample &ex : data) {
        std::vector<double> s;
        for (const auto &c : ex.ordered) {
            s.push_back(scorer.score(ex.cond, c));
        }
        for (std::size_t lo = 0; lo < s.size(); ++lo) {
            for (std::size_t hi = lo + 1; hi < s.size(); ++hi) {
                correct += s[hi] > s[lo] ? 1 : 0;
                ++total;
            }
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

} // namespace memecap
