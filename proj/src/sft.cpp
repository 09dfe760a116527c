#include "memecap/sft.hpp"

#include "memecap/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace memecap {

void SftWeights::validate() const {
    for (double v : {ori, g, t}) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ValidationError("SFT weights must be finite and non-negative");
        }
    }
}

std::pair<double, double> binary_softmax_pair(double a, double b) {
    // logistic form keeps both entries accurate for large |a - b|
    const double p = 1.0 / (1.0 + std::exp(b - a));
    const double q = 1.0 / (1.0 + std::exp(a - b));
    return {p, q};
}

double two_point_kl(double p, double q) {
    auto term = [](double x, double y) { return x == 0.0 ? 0.0 : x * std::log(x / y); };
    return term(p, q) + term(1.0 - p, 1.0 - q);
}

std::pair<double, double> kl_alignment_losses(const SimilarityPrior &prior, const SftWeights &w) {
    w.validate();
    if (prior.tokens.rows() != prior.pred_tokens.rows() || prior.tokens.cols() != prior.pred_tokens.cols()) {
        throw ShapeError("kl_alignment_losses: prior is " + std::to_string(prior.tokens.rows()) + "x" +
                         std::to_string(prior.tokens.cols()) + " but prediction is " +
                         std::to_string(prior.pred_tokens.rows()) + "x" + std::to_string(prior.pred_tokens.cols()));
    }
    if (!std::isfinite(prior.global) || !std::isfinite(prior.pred_global) || !prior.tokens.allFinite() ||
        !prior.pred_tokens.allFinite()) {
        throw NumericError("kl_alignment_losses: non-finite similarity");
    }
    // With q = 1 - p the two-point KL reduces to (2p - 1)(a - b) = tanh((a - b) / 2)(a - b).
    auto kl = [](double a, double b) {
        const double d = a - b;
        return std::tanh(0.5 * d) * d;
    };
    const double lg = w.g * kl(prior.global, prior.pred_global);
    double st = 0.0;
    for (Eigen::Index i = 0; i < prior.tokens.rows(); ++i) {
        for (Eigen::Index j = 0; j < prior.tokens.cols(); ++j) {
            st += kl(prior.tokens(i, j), prior.pred_tokens(i, j));
        }
    }
    return {lg, w.t * st};
}

ad::Var pair_kl_sum(const ad::Var &a, const ad::Var &b) {
    ad::Var d = ad::sub(a, b);
    return ad::sum(ad::mul(ad::tanh(ad::scale(d, 0.5)), d));
}

// ---------------------------------------------------------------------------

namespace {

Mat stack_areas(std::span<const AreaFeatures> subimages) {
    if (subimages.empty()) {
        throw ValidationError("no sub-image features");
    }
    Eigen::Index rows = 0;
    for (const AreaFeatures &a : subimages) {
        if (a.features.rows() != subimages[0].features.rows()) {
            throw ShapeError("sub-images have different area counts");
        }
        rows += a.features.rows();
    }
    Mat m(rows, subimages[0].features.cols());
    Eigen::Index r = 0;
    for (const AreaFeatures &a : subimages) {
        m.middleRows(r, a.features.rows()) = a.features;
        r += a.features.rows();
    }
    return m;
}

double cosine(const RowVec &a, const RowVec &b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) {
        throw NumericError("cosine similarity of a zero-norm vector");
    }
    return a.dot(b) / (na * nb);
}

/// (N x K*N) matrix averaging K stacked blocks of N rows.
Mat block_average(Eigen::Index n, int k) {
    Mat a = Mat::Zero(n, n * k);
    for (int b = 0; b < k; ++b) {
        a.block(0, b * n, n, n) = Mat::Identity(n, n) / k;
    }
    return a;
}

} // namespace

AlignView align_view(std::span<const AreaFeatures> subimages, const TokenFeatures &caption, const AlignParams &params) {
    AlignView v;
    AreaFeatures all;
    all.features = stack_areas(subimages);
    auto [mp, tp] = project(all, caption, params);
    v.areas = mp;
    v.sub_images = static_cast<int>(subimages.size());
    v.map = meme_attention(subimages, caption, params);

    const Mat energies = (mp * params.w_q.value) * (tp * params.w_k.value).transpose();
    Vec score = energies.rowwise().mean() / std::sqrt(static_cast<double>(params.d_k()));
    score = (score.array() - score.maxCoeff()).exp();
    score /= score.sum();
    v.pooled = score.transpose() * mp;

    const RowVec text = v.map.global * tp;
    v.global = cosine(mp.colwise().mean(), text);
    return v;
}

std::pair<double, Mat> predicted_similarity(const std::vector<std::string> &generated,
                                            const std::vector<std::string> &reference, const TextEncoder &enc,
                                            std::span<const AreaFeatures> subimages, const AlignParams &params) {
    if (generated.empty() || reference.empty()) {
        throw ValidationError("predicted_similarity: captions must be non-empty");
    }
    RowVec g = RowVec::Zero(enc.width()), r = RowVec::Zero(enc.width());
    for (const std::string &t : generated) {
        g += enc.embed(t);
    }
    for (const std::string &t : reference) {
        r += enc.embed(t);
    }
    g /= static_cast<double>(generated.size());
    r /= static_cast<double>(reference.size());
    const double scalar = cosine(g, r);
    const AttentionMap map = meme_attention(subimages, enc.encode(generated), params);
    return {scalar, map.token_level};
}

SftContext make_sft_context(const CaptionDecoder &dec, const EmbeddingTextEncoder &enc, AlignParams &align,
                            bool train_align) {
    SftContext ctx;
    const int d = enc.width();
    if (d != align.d()) {
        throw ShapeError("SFT context: text encoder width differs from the alignment width");
    }
    ctx.token_embeddings = Mat::Zero(dec.vocab().size(), d);
    for (int v = Vocabulary::num_special; v < dec.vocab().size(); ++v) {
        ctx.token_embeddings.row(v) = enc.embed(dec.vocab().token(v));
    }
    ctx.positions.resize(dec.config().max_caption, d);
    for (int j = 0; j < dec.config().max_caption; ++j) {
        ctx.positions.row(j) = enc.options().position_scale * position_signal(j, d);
    }
    ctx.align = &align;
    ctx.train_align = train_align;
    return ctx;
}

SftLossTerms sft_loss_var(ad::Tape &tape, std::span<const SftExample> batch, CaptionDecoder &dec, SftContext &ctx,
                          const SftWeights &w, ad::Parameter *trainable_weights) {
    using namespace ad;
    if (batch.empty()) {
        throw ValidationError("sft_loss: empty batch");
    }
    if (ctx.align == nullptr) {
        throw ValidationError("sft_loss: no alignment parameters");
    }
    w.validate();
    AlignParams &ap = *ctx.align;
    auto leaf = [&](ad::Parameter &p) { return ctx.train_align ? tape.param(p) : tape.constant(p.value); };
    Var w_m = leaf(ap.w_m), b_m = leaf(ap.b_m), w_t = leaf(ap.w_t), b_t = leaf(ap.b_t);
    Var w_q = leaf(ap.w_q), w_k = leaf(ap.w_k);
    Var emb = tape.constant(ctx.token_embeddings);
    const double inv_dk = 1.0 / std::sqrt(static_cast<double>(ap.d_k()));

    Var nll_sum, kl_g_sum, kl_t_sum;
    int tokens = 0;
    for (const SftExample &ex : batch) {
        const auto n = static_cast<Eigen::Index>(ex.caption.size());
        Var lp = dec.log_probs(tape, ex.cond, ex.caption);
        std::vector<int> targets(ex.caption.begin(), ex.caption.end());
        Var picked;
        if (static_cast<int>(n) < dec.config().max_caption) {
            targets.push_back(Vocabulary::eos);
            picked = pick_per_row(lp, targets);
        } else {
            picked = pick_per_row(slice_rows(lp, 0, n), targets);
        }
        tokens += static_cast<int>(targets.size());
        Var nll = neg(sum(picked));

        // Teacher-forced soft caption: expected text embedding at each position.
        Var probs = exp(slice_rows(lp, 0, n));
        Var soft = matmul(probs, emb);
        Var pooled = col_mean(soft);
        Var pred_global = cosine(pooled, tape.constant(ex.reference_pooled));

        Var feats = add(soft, tape.constant(ctx.positions.topRows(n)));
        Var tp = add_row(matmul_nt(feats, w_t), b_t);
        Mat areas = stack_areas(ex.subimages);
        if (areas.cols() != ap.d()) {
            throw ShapeError("sft_loss: area features do not match the alignment width");
        }
        const auto per_image = ex.subimages[0].features.rows();
        Var mp = add_row(matmul_nt(tape.constant(areas), w_m), b_m);
        Var sim = softmax_rows(scale(matmul_nt(matmul(mp, w_q), matmul(tp, w_k)), inv_dk));
        Var pred_tokens =
            matmul(tape.constant(block_average(per_image, static_cast<int>(ex.subimages.size()))), sim);
        if (ex.prior_tokens.rows() != pred_tokens.rows() || ex.prior_tokens.cols() != pred_tokens.cols()) {
            throw ShapeError("sft_loss: prior for '" + ex.id + "' does not match the predicted token-level shape");
        }
        Var kg = pair_kl_sum(tape.scalar(ex.prior_global), pred_global);
        Var kt = pair_kl_sum(tape.constant(ex.prior_tokens), pred_tokens);
        nll_sum = nll_sum.valid() ? add(nll_sum, nll) : nll;
        kl_g_sum = kl_g_sum.valid() ? add(kl_g_sum, kg) : kg;
        kl_t_sum = kl_t_sum.valid() ? add(kl_t_sum, kt) : kt;
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    SftLossTerms out;
    out.ori = scale(nll_sum, 1.0 / tokens);
    Var kg = scale(kl_g_sum, inv_b), kt = scale(kl_t_sum, inv_b);
    if (trainable_weights != nullptr) {
        Var lw = tape.param(*trainable_weights);
        out.l_g = mul(pick(lw, 0, 1), kg);
        out.l_t = mul(pick(lw, 0, 2), kt);
        out.total = add(add(mul(pick(lw, 0, 0), out.ori), out.l_g), out.l_t);
    } else {
        out.l_g = scale(kg, w.g);
        out.l_t = scale(kt, w.t);
        out.total = add(add(scale(out.ori, w.ori), out.l_g), out.l_t);
    }
    return out;
}

SftLossValues sft_loss(std::span<const SftExample> batch, CaptionDecoder &dec, SftContext &ctx, const SftWeights &w,
                       ad::Parameter *trainable_weights) {
    ad::Tape tape;
    SftLossTerms terms = sft_loss_var(tape, batch, dec, ctx, w, trainable_weights);
    SftLossValues v{terms.total.scalar(), terms.ori.scalar(), terms.l_g.scalar(), terms.l_t.scalar()};
    if (!std::isfinite(v.total)) {
        throw NumericError("sft_loss: non-finite loss");
    }
    tape.backward(terms.total);
    return v;
}

SftLossValues sft_evaluate(std::span<const SftExample> batch, CaptionDecoder &dec, SftContext &ctx,
                           const SftWeights &w) {
    ad::Tape tape;
    SftLossTerms terms = sft_loss_var(tape, batch, dec, ctx, w);
    return {terms.total.scalar(), terms.ori.scalar(), terms.l_g.scalar(), terms.l_t.scalar()};
}

std::string sft_log_line(const SftLogEntry &e) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["L_SFT"] = e.l_sft;
    j["L_ori"] = e.l_ori;
    j["L_g"] = e.l_g;
    j["L_t"] = e.l_t;
    return j.dump();
}

std::vector<SftLogEntry> train_sft(const std::vector<SftExample> &data, CaptionDecoder &dec, SftContext &ctx,
                                   SftWeights weights, const SftTrainConfig &cfg, const SftEpochHook &hook) {
    if (data.empty()) {
        throw ValidationError("train_sft: no training examples");
    }
    if (cfg.epochs < 1) {
        throw ValidationError("train_sft: epochs must be >= 1");
    }
    weights.validate();
    ad::ParamList params = dec.params();
    if (ctx.train_align) {
        for (ad::Parameter *p : ctx.align->params()) {
            params.push_back(p);
        }
    }
    ad::Parameter lambda("sft.lambda", (Mat(1, 3) << weights.ori, weights.g, weights.t).finished());
    if (cfg.trainable_weights) {
        params.push_back(&lambda);
    }
    ad::zero_grads(params);
    SgdMomentum opt(params, cfg.optim);

    auto evaluate_all = [&](int epoch) {
        SftLogEntry e;
        e.epoch = epoch;
        e.weights = weights;
        const SftLossValues v = sft_evaluate(data, dec, ctx, weights);
        e.l_sft = v.total;
        e.l_ori = v.ori;
        e.l_g = v.l_g;
        e.l_t = v.l_t;
        return e;
    };

    std::vector<SftLogEntry> log{evaluate_all(0)};
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t bs = static_cast<std::size_t>(std::max(1, cfg.batch_size));
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            std::vector<SftExample> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
                batch.push_back(data[order[i]]);
            }
            sft_loss(batch, dec, ctx, weights, cfg.trainable_weights ? &lambda : nullptr);
            opt.step();
            if (cfg.trainable_weights) {
                lambda.value = lambda.value.cwiseMax(0.0);
                weights = {lambda.value(0, 0), lambda.value(0, 1), lambda.value(0, 2)};
            }
        }
        log.push_back(evaluate_all(epoch));
        if (hook) {
            hook(log.back(), dec);
        }
    }
    return log;
}

} // namespace memecap
