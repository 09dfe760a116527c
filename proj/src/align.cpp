#include "memecap/align.hpp"

#include "memecap/error.hpp"
#include "memecap/optim.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace memecap {

namespace {

std::string shape(const Mat &m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

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

bool all_finite(const Mat &m) { return m.allFinite(); }

} // namespace

AlignParams AlignParams::init(int d, int d_k, double tau, std::uint64_t seed) {
    if (d < 1 || d_k < 1 || !(tau > 0.0)) {
        throw ValidationError("AlignParams: require d >= 1, d_k >= 1, tau > 0");
    }
    std::mt19937_64 rng(seed);
    AlignParams p;
    p.w_m = ad::Parameter("align.w_m", Mat::Identity(d, d) + gaussian(d, d, 0.1 / std::sqrt(d), rng));
    p.b_m = ad::Parameter("align.b_m", Mat::Zero(1, d));
    p.w_t = ad::Parameter("align.w_t", Mat::Identity(d, d) + gaussian(d, d, 0.1 / std::sqrt(d), rng));
    p.b_t = ad::Parameter("align.b_t", Mat::Zero(1, d));
    p.w_q = ad::Parameter("align.w_q", gaussian(d, d_k, 1.0 / std::sqrt(d), rng));
    p.w_k = ad::Parameter("align.w_k", gaussian(d, d_k, 1.0 / std::sqrt(d), rng));
    p.tau = tau;
    return p;
}

void AlignParams::validate() const {
    const int dd = d();
    auto check = [&](const ad::Parameter &p, Eigen::Index r, Eigen::Index c) {
        if (p.value.rows() != r || p.value.cols() != c) {
            throw ValidationError("AlignParams: " + p.name + " has shape " + shape(p.value) + ", expected " +
                                  std::to_string(r) + "x" + std::to_string(c));
        }
        if (!all_finite(p.value)) {
            throw ValidationError("AlignParams: " + p.name + " has non-finite entries");
        }
    };
    if (d_k() < 1) {
        throw ValidationError("AlignParams: d_k must be >= 1");
    }
    check(w_m, dd, dd);
    check(b_m, 1, dd);
    check(w_t, dd, dd);
    check(b_t, 1, dd);
    check(w_q, dd, d_k());
    check(w_k, dd, d_k());
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw ValidationError("AlignParams: temperature must be positive");
    }
}

Blob AlignParams::to_blob() const {
    Blob b;
    b.kind = "align-params";
    std::ostringstream ts;
    ts.precision(17);
    ts << tau;
    b.meta["tau"] = ts.str();
    for (const ad::Parameter *p : {&w_m, &b_m, &w_t, &b_t, &w_q, &w_k}) {
        b.tensors.emplace_back(p->name, p->value);
    }
    return b;
}

AlignParams AlignParams::from_blob(const Blob &b) {
    if (b.kind != "align-params") {
        throw Error("expected an align-params blob, got '" + b.kind + "'");
    }
    AlignParams p;
    p.w_m = ad::Parameter("align.w_m", b.tensor("align.w_m"));
    p.b_m = ad::Parameter("align.b_m", b.tensor("align.b_m"));
    p.w_t = ad::Parameter("align.w_t", b.tensor("align.w_t"));
    p.b_t = ad::Parameter("align.b_t", b.tensor("align.b_t"));
    p.w_q = ad::Parameter("align.w_q", b.tensor("align.w_q"));
    p.w_k = ad::Parameter("align.w_k", b.tensor("align.w_k"));
    p.tau = std::stod(b.meta_at("tau"));
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------

std::pair<Mat, Mat> project(const AreaFeatures &areas, const TokenFeatures &tokens, const AlignParams &params) {
    const int d = params.d();
    if (areas.features.cols() != d || tokens.features.cols() != d) {
        throw ShapeError("project: area features " + shape(areas.features) + " and token features " +
                         shape(tokens.features) + " must both have width " + std::to_string(d));
    }
    Mat m = areas.features * params.w_m.value.transpose();
    m.rowwise() += params.b_m.value.row(0);
    Mat t = tokens.features * params.w_t.value.transpose();
    t.rowwise() += params.b_t.value.row(0);
    return {std::move(m), std::move(t)};
}

AttentionMap attention_similarity(const Mat &m_proj, const Mat &t_proj, const AlignParams &params) {
    if (m_proj.cols() != t_proj.cols() || m_proj.cols() != params.w_q.value.rows()) {
        throw ShapeError("attention_similarity: projections " + shape(m_proj) + " and " + shape(t_proj) +
                         " do not match W_Q " + shape(params.w_q.value));
    }
    if (t_proj.rows() == 0) {
        throw ValidationError("attention_similarity: caption has no tokens");
    }
    if (m_proj.rows() == 0) {
        throw ValidationError("attention_similarity: no image areas");
    }
    AttentionMap out;
    out.energies = (m_proj * params.w_q.value) * (t_proj * params.w_k.value).transpose();
    if (!out.energies.allFinite()) {
        throw NumericError("attention_similarity: non-finite attention energy");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(params.d_k()));
    out.token_level.resize(out.energies.rows(), out.energies.cols());
    for (Eigen::Index i = 0; i < out.energies.rows(); ++i) {
        const RowVec z = out.energies.row(i) * scale;
        const double m = z.maxCoeff();
        RowVec e = (z.array() - m).exp();
        out.token_level.row(i) = e / e.sum();
    }
    out.global = out.token_level.colwise().mean();
    return out;
}

AttentionMap combine_subimage_maps(std::span<const AttentionMap> maps) {
    if (maps.empty()) {
        throw ValidationError("combine_subimage_maps: no maps");
    }
    const Eigen::Index n = maps[0].tokens();
    const Eigen::Index areas = maps[0].areas();
    AttentionMap out;
    out.token_level = Mat::Zero(areas, n);
    out.energies = Mat::Zero(areas, n);
    double total = 0.0;
    for (const AttentionMap &m : maps) {
        if (m.tokens() != n || m.areas() != areas) {
            throw ShapeError("combine_subimage_maps: sub-image maps differ in shape (" + shape(m.token_level) +
                             " vs " + shape(maps[0].token_level) + ")");
        }
        const double w = static_cast<double>(m.areas());
        out.token_level += w * m.token_level;
        out.energies += w * m.energies;
        total += w;
    }
    out.token_level /= total;
    out.energies /= total;
    out.global = out.token_level.colwise().mean();
    return out;
}

AttentionMap meme_attention(std::span<const AreaFeatures> subimages, const TokenFeatures &caption,
                            const AlignParams &params) {
    std::vector<AttentionMap> maps;
    for (const AreaFeatures &a : subimages) {
        auto [m, t] = project(a, caption, params);
        maps.push_back(attention_similarity(m, t, params));
    }
    return combine_subimage_maps(maps);
}

double contrastive_loss(std::span<const double> scores, std::size_t positive_index, double tau) {
    if (!(tau > 0.0)) {
        throw ValidationError("contrastive_loss: temperature must be positive");
    }
    if (scores.size() < 2) {
        throw ValidationError("contrastive_loss: need at least two candidates");
    }
    if (positive_index >= scores.size()) {
        throw ValidationError("contrastive_loss: positive index out of range");
    }
    double m = -std::numeric_limits<double>::infinity();
    for (double s : scores) {
        m = std::max(m, s / tau);
    }
    double z = 0.0;
    for (double s : scores) {
        z += std::exp(s / tau - m);
    }
    const double loss = -(scores[positive_index] / tau - m - std::log(z));
    return std::max(0.0, loss);
}

// ---------------------------------------------------------------------------

ad::Var align_batch_loss_var(ad::Tape &tape, std::span<const MemeFeatures> batch, AlignParams &params,
                             const AlignLossOptions &opt) {
    if (batch.size() < 2) {
        throw ValidationError("align_batch_loss: a batch needs at least two memes for in-batch negatives");
    }
    params.validate();
    const int d = params.d();
    const auto b = static_cast<Eigen::Index>(batch.size());

    // Stack every area of every meme, and every caption token of every meme.
    Eigen::Index total_areas = 0, total_tokens = 0;
    for (const MemeFeatures &m : batch) {
        if (m.subimages.empty()) {
            throw ValidationError("align_batch_loss: meme '" + m.id + "' has no sub-image features");
        }
        for (const AreaFeatures &a : m.subimages) {
            if (a.features.cols() != d) {
                throw ShapeError("align_batch_loss: area features " + shape(a.features) + " for '" + m.id +
                                 "' do not have width " + std::to_string(d));
            }
            total_areas += a.features.rows();
        }
        if (m.caption.features.cols() != d || m.caption.features.rows() == 0) {
            throw ShapeError("align_batch_loss: caption features " + shape(m.caption.features) + " for '" + m.id +
                             "' do not have width " + std::to_string(d));
        }
        total_tokens += m.caption.features.rows();
    }
    Mat areas(total_areas, d), tokens(total_tokens, d);
    Mat owner = Mat::Zero(total_tokens, b); // token -> meme indicator
    std::vector<int> own_col;
    own_col.reserve(static_cast<std::size_t>(total_areas));
    Eigen::Index ra = 0, rt = 0;
    for (Eigen::Index k = 0; k < b; ++k) {
        const MemeFeatures &m = batch[static_cast<std::size_t>(k)];
        for (const AreaFeatures &a : m.subimages) {
            areas.middleRows(ra, a.features.rows()) = a.features;
            ra += a.features.rows();
            own_col.insert(own_col.end(), static_cast<std::size_t>(a.features.rows()), static_cast<int>(k));
        }
        const Eigen::Index n = m.caption.features.rows();
        tokens.middleRows(rt, n) = m.caption.features;
        owner.block(rt, k, n, 1).setOnes();
        rt += n;
    }

    using namespace ad;
    Var w_m = tape.param(params.w_m), b_m = tape.param(params.b_m);
    Var w_t = tape.param(params.w_t), b_t = tape.param(params.b_t);
    Var w_q = tape.param(params.w_q), w_k = tape.param(params.w_k);
    Var m_proj = add_row(matmul_nt(tape.constant(areas), w_m), b_m);
    Var t_proj = add_row(matmul_nt(tape.constant(tokens), w_t), b_t);
    Var energies = matmul_nt(matmul(m_proj, w_q), matmul(t_proj, w_k));
    Var sim = softmax_rows(scale(energies, 1.0 / std::sqrt(static_cast<double>(params.d_k()))));
    Var ind = tape.constant(owner);
    const double inv_tau = 1.0 / params.tau;

    Var per_area; // total_areas x 1 log-probabilities of the positive set
    if (opt.scope == CandidateScope::tokens) {
        Var probs = exp(log_softmax_rows(scale(sim, inv_tau)));
        per_area = log(pick_per_row(matmul(probs, ind), own_col));
    } else {
        Var caption_scores = matmul(sim, ind);
        per_area = pick_per_row(log_softmax_rows(scale(caption_scores, inv_tau)), own_col);
    }
    return scale(sum(per_area), -1.0 / static_cast<double>(total_areas));
}

double align_batch_loss(std::span<const MemeFeatures> batch, AlignParams &params, const AlignLossOptions &opt) {
    ad::Tape tape;
    ad::Var loss = align_batch_loss_var(tape, batch, params, opt);
    const double v = loss.scalar();
    if (!std::isfinite(v)) {
        throw NumericError("align_batch_loss: non-finite loss");
    }
    tape.backward(loss);
    return v;
}

std::vector<double> train_align(std::vector<MemeFeatures> data, AlignParams &params, const AlignTrainConfig &cfg) {
    if (data.size() < 2) {
        throw ValidationError("train_align: need at least two memes");
    }
    const std::size_t bs = static_cast<std::size_t>(std::max(2, cfg.batch_size));
    SgdMomentum opt(params.params(), {cfg.learning_rate, cfg.momentum, 1.0});
    ad::zero_grads(params.params());
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> log;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();) {
            std::size_t end = std::min(order.size(), start + bs);
            if (order.size() - end == 1) {
                end = order.size(); // never leave a single meme for the last batch
            }
            std::vector<MemeFeatures> batch;
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(data[order[i]]);
            }
            total += align_batch_loss(batch, params, cfg.loss);
            opt.step();
            ++batches;
            start = end;
        }
        log.push_back(total / batches);
    }
    return log;
}

// ---------------------------------------------------------------------------

Image render_heatmap(std::span<const AttentionMap> maps, const Image &image, const std::vector<RoiBox> &rois,
                     std::size_t token_index, const HeatmapOptions &opt) {
    if (maps.empty()) {
        throw ValidationError("export_heatmap: no attention maps");
    }
    if (maps.size() != 1 && maps.size() != rois.size()) {
        throw ValidationError("export_heatmap: need one map per ROI or a single shared map");
    }
    const Eigen::Index cells = static_cast<Eigen::Index>(opt.grid) * opt.grid;
    for (const AttentionMap &m : maps) {
        if (token_index >= static_cast<std::size_t>(m.tokens())) {
            throw ValidationError("export_heatmap: token index " + std::to_string(token_index) +
                                  " out of range for a caption of " + std::to_string(m.tokens()) + " tokens");
        }
        if (m.areas() < cells) {
            throw ShapeError("export_heatmap: map has fewer areas than the patch grid");
        }
    }
    const auto col = static_cast<Eigen::Index>(token_index);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t r = 0; r < rois.size(); ++r) {
        const AttentionMap &m = maps[maps.size() == 1 ? 0 : r];
        for (Eigen::Index a = 0; a < cells; ++a) {
            lo = std::min(lo, m.token_level(a, col));
            hi = std::max(hi, m.token_level(a, col));
        }
    }
    const double range = hi - lo;
    Image out = image;
    for (std::size_t r = 0; r < rois.size(); ++r) {
        const AttentionMap &m = maps[maps.size() == 1 ? 0 : r];
        const RoiBox &roi = rois[r];
        const int w = roi.x1 - roi.x0, h = roi.y1 - roi.y0;
        for (int py = 0; py < opt.grid; ++py) {
            for (int px = 0; px < opt.grid; ++px) {
                const double v = range > 0.0 ? (m.token_level(py * opt.grid + px, col) - lo) / range : 0.0;
                const double a = opt.opacity * v;
                const int y0 = roi.y0 + py * h / opt.grid, y1 = roi.y0 + (py + 1) * h / opt.grid;
                const int x0 = roi.x0 + px * w / opt.grid, x1 = roi.x0 + (px + 1) * w / opt.grid;
                for (int y = y0; y < y1; ++y) {
                    for (int x = x0; x < x1; ++x) {
                        for (int c = 0; c < 3; ++c) {
                            const double blended = (1.0 - a) * image.at(x, y, c) + a * opt.tint[c];
                            out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(std::clamp(blended, 0.0, 255.0)));
                        }
                    }
                }
            }
        }
    }
    return out;
}

void export_heatmap(const std::filesystem::path &out, std::span<const AttentionMap> maps, const Image &image,
                    const std::vector<RoiBox> &rois, std::size_t token_index, const HeatmapOptions &opt) {
    write_ppm(out, render_heatmap(maps, image, rois, token_index, opt));
}

std::string attention_line(const std::string &meme_id, const AttentionMap &map, const std::vector<std::string> &tokens) {
    nlohmann::json j;
    j["id"] = meme_id;
    j["tokens"] = tokens;
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < map.token_level.rows(); ++i) {
        std::vector<double> r(map.token_level.row(i).data(), map.token_level.row(i).data() + 0);
        r.clear();
        for (Eigen::Index k = 0; k < map.token_level.cols(); ++k) {
            r.push_back(map.token_level(i, k));
        }
        rows.push_back(r);
    }
    j["token_level"] = rows;
    std::vector<double> g;
    for (Eigen::Index k = 0; k < map.global.size(); ++k) {
        g.push_back(map.global(k));
    }
    j["global"] = g;
    return j.dump();
}

} // namespace memecap
