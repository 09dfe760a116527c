#include "memecap/decoder.hpp"

#include "memecap/error.hpp"

#include <cmath>
#include <random>

namespace memecap {

namespace {

constexpr double kMasked = -1e9;
constexpr double kGeluC = 0.7978845608028654; // sqrt(2 / pi)

Mat gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64 &rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            m(r, c) = dist(rng);
        }
    }
    return m;
}

RowVec layer_norm(const RowVec &x, const Mat &g, const Mat &b) {
    const double mu = x.mean();
    const double var = (x.array() - mu).square().mean();
    const RowVec xhat = (x.array() - mu) / std::sqrt(var + 1e-5);
    return xhat.cwiseProduct(g.row(0)) + b.row(0);
}

RowVec gelu(const RowVec &x) {
    return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); });
}

RowVec log_softmax(const RowVec &z) {
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    return z.array() - lse;
}

} // namespace

// ---- vocabulary ----

Vocabulary::Vocabulary() : tokens_{"<unk>", "<bos>", "<eos>"} {
    for (int i = 0; i < num_special; ++i) {
        index_[tokens_[static_cast<std::size_t>(i)]] = i;
    }
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>> &token_lists) {
    Vocabulary v;
    for (const auto &list : token_lists) {
        for (const std::string &t : list) {
            if (!v.index_.count(t)) {
                v.index_[t] = v.size();
                v.tokens_.push_back(t);
            }
        }
    }
    return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    if (tokens.size() < num_special || tokens[0] != "<unk>" || tokens[1] != "<bos>" || tokens[2] != "<eos>") {
        throw ValidationError("vocabulary must start with <unk>, <bos>, <eos>");
    }
    v.tokens_.clear();
    v.index_.clear();
    for (std::string &t : tokens) {
        if (v.index_.count(t)) {
            throw ValidationError("vocabulary has duplicate token '" + t + "'");
        }
        v.index_[t] = v.size();
        v.tokens_.push_back(std::move(t));
    }
    return v;
}

int Vocabulary::id(const std::string &token) const {
    auto it = index_.find(token);
    return it == index_.end() ? unk : it->second;
}

const std::string &Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) {
        throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string> &tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const std::string &t : tokens) {
        ids.push_back(id(t));
    }
    return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    for (int i : ids) {
        if (i == eos) {
            break;
        }
        out.push_back(token(i));
    }
    return out;
}

// ---- config ----

void DecoderConfig::validate() const {
    if (vocab_size <= Vocabulary::num_special) {
        throw ValidationError("decoder: empty vocabulary");
    }
    if (width < 1 || layers < 1 || ffn_mult < 1 || image_dim < 1 || max_prefix < 0 || max_caption < 1) {
        throw ValidationError("decoder: invalid configuration");
    }
}

// ---- trunk ----

DecoderTrunk::DecoderTrunk(const DecoderConfig &cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg.seed);
    const int d = cfg.width, h = cfg.width * cfg.ffn_mult;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    tok_emb_ = ad::Parameter("tok_emb", gaussian(cfg.vocab_size, d, 0.5, rng));
    pos_emb_ = ad::Parameter("pos_emb", gaussian(cfg.positions(), d, 0.1, rng));
    img_w_ = ad::Parameter("img_w", gaussian(cfg.image_dim, d, 1.0 / std::sqrt(cfg.image_dim), rng));
    img_b_ = ad::Parameter("img_b", Mat::Zero(1, d));
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        Block b;
        b.ln1_g = ad::Parameter(p + "ln1_g", Mat::Ones(1, d));
        b.ln1_b = ad::Parameter(p + "ln1_b", Mat::Zero(1, d));
        b.wq = ad::Parameter(p + "wq", gaussian(d, d, s, rng));
        b.wk = ad::Parameter(p + "wk", gaussian(d, d, s, rng));
        b.wv = ad::Parameter(p + "wv", gaussian(d, d, s, rng));
        b.wo = ad::Parameter(p + "wo", gaussian(d, d, s / std::sqrt(2.0 * cfg.layers), rng));
        b.ln2_g = ad::Parameter(p + "ln2_g", Mat::Ones(1, d));
        b.ln2_b = ad::Parameter(p + "ln2_b", Mat::Zero(1, d));
        b.w1 = ad::Parameter(p + "w1", gaussian(d, h, s, rng));
        b.b1 = ad::Parameter(p + "b1", Mat::Zero(1, h));
        b.w2 = ad::Parameter(p + "w2", gaussian(h, d, 1.0 / std::sqrt(h) / std::sqrt(2.0 * cfg.layers), rng));
        b.b2 = ad::Parameter(p + "b2", Mat::Zero(1, d));
        blocks_.push_back(std::move(b));
    }
    lnf_g_ = ad::Parameter("lnf_g", Mat::Ones(1, d));
    lnf_b_ = ad::Parameter("lnf_b", Mat::Zero(1, d));
}

ad::ParamList DecoderTrunk::params() {
    ad::ParamList ps{&tok_emb_, &pos_emb_, &img_w_, &img_b_};
    for (Block &b : blocks_) {
        for (ad::Parameter *p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1,
                                 &b.w2, &b.b2}) {
            ps.push_back(p);
        }
    }
    ps.push_back(&lnf_g_);
    ps.push_back(&lnf_b_);
    return ps;
}

void DecoderTrunk::check(const Conditioning &cond, std::span<const int> caption) const {
    if (cond.image.size() != cfg_.image_dim) {
        throw ShapeError("decoder: image feature has width " + std::to_string(cond.image.size()) + ", expected " +
                         std::to_string(cfg_.image_dim));
    }
    if (static_cast<int>(cond.prefix.size()) > cfg_.max_prefix) {
        throw ValidationError("decoder: prefix of " + std::to_string(cond.prefix.size()) + " tokens exceeds " +
                              std::to_string(cfg_.max_prefix));
    }
    if (static_cast<int>(caption.size()) > cfg_.max_caption) {
        throw ValidationError("decoder: caption of " + std::to_string(caption.size()) + " tokens exceeds " +
                              std::to_string(cfg_.max_caption));
    }
    auto in_range = [&](int id) { return id >= 0 && id < cfg_.vocab_size; };
    for (int id : cond.prefix) {
        if (!in_range(id)) {
            throw ValidationError("decoder: prefix token id out of range");
        }
    }
    for (int id : caption) {
        if (!in_range(id)) {
            throw ValidationError("decoder: caption token id out of range");
        }
    }
}

ad::Var DecoderTrunk::hidden(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption) {
    using namespace ad;
    check(cond, caption);
    std::vector<int> ids(cond.prefix.begin(), cond.prefix.end());
    ids.push_back(Vocabulary::bos);
    ids.insert(ids.end(), caption.begin(), caption.end());
    const auto len = static_cast<Eigen::Index>(ids.size()) + 1;

    Var img = add_row(matmul(tape.constant(cond.image), tape.param(img_w_)), tape.param(img_b_));
    Var toks = gather_rows(tape.param(tok_emb_), ids);
    const Var parts[] = {img, toks};
    Var x = add(concat_rows(parts), slice_rows(tape.param(pos_emb_), 0, len));
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg_.width));
    for (Block &b : blocks_) {
        Var h = layer_norm_rows(x, tape.param(b.ln1_g), tape.param(b.ln1_b));
        Var q = matmul(h, tape.param(b.wq));
        Var k = matmul(h, tape.param(b.wk));
        Var v = matmul(h, tape.param(b.wv));
        Var att = softmax_rows(scale(matmul_nt(q, k), inv), true);
        x = add(x, matmul(matmul(att, v), tape.param(b.wo)));
        Var h2 = layer_norm_rows(x, tape.param(b.ln2_g), tape.param(b.ln2_b));
        Var f = gelu(add_row(matmul(h2, tape.param(b.w1)), tape.param(b.b1)));
        x = add(x, add_row(matmul(f, tape.param(b.w2)), tape.param(b.b2)));
    }
    return layer_norm_rows(x, tape.param(lnf_g_), tape.param(lnf_b_));
}

DecoderTrunk::Cache DecoderTrunk::start() const {
    Cache c;
    c.keys.assign(blocks_.size(), Mat(0, cfg_.width));
    c.values.assign(blocks_.size(), Mat(0, cfg_.width));
    return c;
}

RowVec DecoderTrunk::embed_image(const RowVec &image) const {
    if (image.size() != cfg_.image_dim) {
        throw ShapeError("decoder: image feature width mismatch");
    }
    return image * img_w_.value + img_b_.value;
}

RowVec DecoderTrunk::embed_token(int id) const {
    if (id < 0 || id >= cfg_.vocab_size) {
        throw ValidationError("decoder: token id out of range");
    }
    return tok_emb_.value.row(id);
}

RowVec DecoderTrunk::step(Cache &cache, const RowVec &embedded) const {
    if (cache.length >= cfg_.positions()) {
        throw ValidationError("decoder: sequence exceeds the position table");
    }
    RowVec x = embedded + pos_emb_.value.row(cache.length);
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg_.width));
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const Block &b = blocks_[l];
        const RowVec h = layer_norm(x, b.ln1_g.value, b.ln1_b.value);
        const RowVec q = h * b.wq.value;
        Mat &keys = cache.keys[l];
        Mat &values = cache.values[l];
        keys.conservativeResize(keys.rows() + 1, Eigen::NoChange);
        values.conservativeResize(values.rows() + 1, Eigen::NoChange);
        keys.row(keys.rows() - 1) = h * b.wk.value;
        values.row(values.rows() - 1) = h * b.wv.value;
        RowVec s = (q * keys.transpose()) * inv;
        s = (s.array() - s.maxCoeff()).exp();
        s /= s.sum();
        x += (s * values) * b.wo.value;
        const RowVec h2 = layer_norm(x, b.ln2_g.value, b.ln2_b.value);
        const RowVec f = gelu(h2 * b.w1.value + b.b1.value);
        x += f * b.w2.value + b.b2.value;
    }
    ++cache.length;
    return layer_norm(x, lnf_g_.value, lnf_b_.value);
}

RowVec DecoderTrunk::prime(Cache &cache, const Conditioning &cond) const {
    check(cond, {});
    step(cache, embed_image(cond.image));
    for (int id : cond.prefix) {
        step(cache, embed_token(id));
    }
    return step(cache, embed_token(Vocabulary::bos));
}

void DecoderTrunk::put(Blob &b, const std::string &prefix) const {
    b.meta[prefix + "vocab_size"] = std::to_string(cfg_.vocab_size);
    b.meta[prefix + "width"] = std::to_string(cfg_.width);
    b.meta[prefix + "layers"] = std::to_string(cfg_.layers);
    b.meta[prefix + "ffn_mult"] = std::to_string(cfg_.ffn_mult);
    b.meta[prefix + "image_dim"] = std::to_string(cfg_.image_dim);
    b.meta[prefix + "max_prefix"] = std::to_string(cfg_.max_prefix);
    b.meta[prefix + "max_caption"] = std::to_string(cfg_.max_caption);
    put_params(b, const_cast<DecoderTrunk *>(this)->params(), prefix);
}

DecoderTrunk DecoderTrunk::from_blob(const Blob &b, const std::string &prefix) {
    DecoderConfig cfg;
    cfg.vocab_size = std::stoi(b.meta_at(prefix + "vocab_size"));
    cfg.width = std::stoi(b.meta_at(prefix + "width"));
    cfg.layers = std::stoi(b.meta_at(prefix + "layers"));
    cfg.ffn_mult = std::stoi(b.meta_at(prefix + "ffn_mult"));
    cfg.image_dim = std::stoi(b.meta_at(prefix + "image_dim"));
    cfg.max_prefix = std::stoi(b.meta_at(prefix + "max_prefix"));
    cfg.max_caption = std::stoi(b.meta_at(prefix + "max_caption"));
    DecoderTrunk t(cfg);
    get_params(b, t.params(), prefix);
    return t;
}

// ---- caption decoder ----

CaptionDecoder::CaptionDecoder(Vocabulary vocab, DecoderConfig cfg) : vocab_(std::move(vocab)) {
    cfg.vocab_size = vocab_.size();
    trunk_ = DecoderTrunk(cfg);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    out_w_ = ad::Parameter("out_w", gaussian(cfg.width, cfg.vocab_size, 1.0 / std::sqrt(cfg.width), rng));
    out_b_ = ad::Parameter("out_b", Mat::Zero(1, cfg.vocab_size));
}

ad::ParamList CaptionDecoder::params() {
    ad::ParamList ps = trunk_.params();
    ps.push_back(&out_w_);
    ps.push_back(&out_b_);
    return ps;
}

RowVec CaptionDecoder::mask_row(int step) const {
    RowVec m = RowVec::Zero(vocab_.size());
    m(Vocabulary::unk) = kMasked;
    m(Vocabulary::bos) = kMasked;
    if (step == 0) {
        m(Vocabulary::eos) = kMasked;
    }
    return m;
}

void check_caption(const CaptionDecoder &dec, std::span<const int> caption) {
    if (caption.empty()) {
        throw ValidationError("caption is empty");
    }
    if (static_cast<int>(caption.size()) > dec.config().max_caption) {
        throw ValidationError("caption of " + std::to_string(caption.size()) + " tokens exceeds the maximum of " +
                              std::to_string(dec.config().max_caption));
    }
    for (int id : caption) {
        if (id < Vocabulary::num_special || id >= dec.vocab().size()) {
            throw ValidationError("caption contains a special or out-of-vocabulary token (id " + std::to_string(id) +
                                  ")");
        }
    }
}

ad::Var CaptionDecoder::logits(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption) {
    using namespace ad;
    check_caption(*this, caption);
    Var h = trunk_.hidden(tape, cond, caption);
    const auto rows = static_cast<Eigen::Index>(caption.size()) + 1;
    Var hc = slice_rows(h, DecoderTrunk::bos_position(cond), rows);
    Mat mask(rows, vocab_.size());
    for (Eigen::Index t = 0; t < rows; ++t) {
        mask.row(t) = mask_row(static_cast<int>(t));
    }
    return add(add_row(matmul(hc, tape.param(out_w_)), tape.param(out_b_)), tape.constant(std::move(mask)));
}

ad::Var CaptionDecoder::log_probs(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption) {
    return ad::log_softmax_rows(logits(tape, cond, caption));
}

ad::Var CaptionDecoder::sequence_log_prob(ad::Tape &tape, const Conditioning &cond, std::span<const int> caption) {
    ad::Var lp = log_probs(tape, cond, caption);
    std::vector<int> targets(caption.begin(), caption.end());
    targets.push_back(Vocabulary::eos);
    if (static_cast<int>(caption.size()) >= config().max_caption) {
        // Generation stops at the length cap without sampling EOS.
        lp = ad::slice_rows(lp, 0, static_cast<Eigen::Index>(caption.size()));
        targets.pop_back();
    }
    return ad::sum(ad::pick_per_row(lp, targets));
}

Mat CaptionDecoder::logits_cached(const Conditioning &cond, std::span<const int> caption) const {
    check_caption(*this, caption);
    trunk_.check(cond, caption);
    DecoderTrunk::Cache cache = trunk_.start();
    Mat out(static_cast<Eigen::Index>(caption.size()) + 1, vocab_.size());
    RowVec h = trunk_.prime(cache, cond);
    for (std::size_t t = 0; t <= caption.size(); ++t) {
        out.row(static_cast<Eigen::Index>(t)) = h * out_w_.value + out_b_.value + mask_row(static_cast<int>(t));
        if (t < caption.size()) {
            h = trunk_.step(cache, trunk_.embed_token(caption[t]));
        }
    }
    return out;
}

double CaptionDecoder::sequence_log_prob_cached(const Conditioning &cond, std::span<const int> caption,
                                                double prob_floor) const {
    const Mat z = logits_cached(cond, caption);
    const double floor_log = prob_floor > 0.0 ? std::log(prob_floor) : -std::numeric_limits<double>::infinity();
    double total = 0.0;
    const bool with_eos = static_cast<int>(caption.size()) < config().max_caption;
    const std::size_t steps = caption.size() + (with_eos ? 1 : 0);
    for (std::size_t t = 0; t < steps; ++t) {
        const int target = t < caption.size() ? caption[t] : Vocabulary::eos;
        double lp = log_softmax(z.row(static_cast<Eigen::Index>(t)))(target);
        if (lp < -700.0 && prob_floor <= 0.0) {
            throw NumericError("sequence log-probability: token '" + vocab_.token(target) +
                               "' has zero probability under the model");
        }
        total += std::max(lp, floor_log);
    }
    return total;
}

std::vector<int> CaptionDecoder::generate(const Conditioning &cond, const DecodeConfig &dc) const {
    if (vocab_.size() <= Vocabulary::num_special) {
        throw ValidationError("generate: empty vocabulary");
    }
    if (dc.temperature < 0.0 || !std::isfinite(dc.temperature)) {
        throw ValidationError("generate: temperature must be finite and >= 0");
    }
    std::mt19937_64 rng(dc.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    DecoderTrunk::Cache cache = trunk_.start();
    RowVec h = trunk_.prime(cache, cond);
    std::vector<int> out;
    for (int t = 0; t < config().max_caption; ++t) {
        const RowVec z = h * out_w_.value + out_b_.value + mask_row(t);
        int next = 0;
        if (dc.temperature == 0.0) {
            z.maxCoeff(&next);
        } else {
            const RowVec lp = log_softmax(z / dc.temperature);
            const double u = unif(rng);
            double acc = 0.0;
            next = static_cast<int>(lp.size()) - 1;
            for (Eigen::Index v = 0; v < lp.size(); ++v) {
                acc += std::exp(lp(v));
                if (u < acc) {
                    next = static_cast<int>(v);
                    break;
                }
            }
            while (z(next) <= kMasked / 2) { // rounding pushed u past the last unmasked entry
                --next;
            }
        }
        if (next == Vocabulary::eos) {
            break;
        }
        out.push_back(next);
        if (t + 1 < config().max_caption) {
            h = trunk_.step(cache, trunk_.embed_token(next));
        }
    }
    return out;
}

Blob CaptionDecoder::to_blob() const {
    Blob b;
    b.kind = "decoder";
    std::string joined;
    for (const std::string &t : vocab_.tokens()) {
        joined += t;
        joined += '\n';
    }
    b.meta["vocab"] = joined;
    trunk_.put(b, "trunk.");
    put_params(b, {const_cast<ad::Parameter *>(&out_w_), const_cast<ad::Parameter *>(&out_b_)}, "head.");
    return b;
}

namespace {
Vocabulary vocab_from_meta(const std::string &joined) {
    std::vector<std::string> toks;
    std::string cur;
    for (char c : joined) {
        if (c == '\n') {
            toks.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    return Vocabulary::from_tokens(std::move(toks));
}
} // namespace

CaptionDecoder CaptionDecoder::from_blob(const Blob &b) {
    if (b.kind != "decoder") {
        throw Error("expected a decoder blob, got '" + b.kind + "'");
    }
    CaptionDecoder d;
    d.vocab_ = vocab_from_meta(b.meta_at("vocab"));
    d.trunk_ = DecoderTrunk::from_blob(b, "trunk.");
    if (d.trunk_.config().vocab_size != d.vocab_.size()) {
        throw ShapeError("decoder blob: vocabulary size does not match the embedding table");
    }
    d.out_w_ = ad::Parameter("out_w", Mat::Zero(d.trunk_.config().width, d.vocab_.size()));
    d.out_b_ = ad::Parameter("out_b", Mat::Zero(1, d.vocab_.size()));
    get_params(b, {&d.out_w_, &d.out_b_}, "head.");
    return d;
}

} // namespace memecap
