#include "memecap/encode.hpp"

#include "memecap/error.hpp"
#include "memecap/tokenize.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace memecap {

namespace {

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

std::string join_lines(const std::vector<std::string> &v) {
    std::string out;
    for (const auto &s : v) {
        out += s;
        out += '\n';
    }
    return out;
}

std::vector<std::string> split_lines(const std::string &s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string line;
    while (std::getline(in, line)) {
        out.push_back(line);
    }
    return out;
}

} // namespace

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------

PatchMeanEncoder::PatchMeanEncoder(int grid, int d, std::uint64_t seed) : grid_(grid) {
    if (grid < 1 || d < 1) {
        throw ValidationError("PatchMeanEncoder: grid and width must be positive");
    }
    std::mt19937_64 rng(seed);
    weight_ = ad::Parameter("visual.weight", gaussian(3, d, 1.0, rng));
    bias_ = ad::Parameter("visual.bias", gaussian(1, d, 0.5, rng));
}

PatchMeanEncoder::PatchMeanEncoder(int grid, Mat weight, Mat bias) : grid_(grid) {
    if (weight.rows() != 3 || bias.rows() != 1 || bias.cols() != weight.cols()) {
        throw ShapeError("PatchMeanEncoder: weight must be 3 x d and bias 1 x d");
    }
    weight_ = ad::Parameter("visual.weight", std::move(weight));
    bias_ = ad::Parameter("visual.bias", std::move(bias));
}

Mat PatchMeanEncoder::patch_means(const Image &img) const {
    if (img.empty()) {
        throw ValidationError("encode_image_areas: empty sub-image");
    }
    if (img.width < grid_ || img.height < grid_) {
        throw ValidationError("encode_image_areas: " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                              " image is smaller than the " + std::to_string(grid_) + "x" + std::to_string(grid_) +
                              " patch grid");
    }
    Mat means(grid_ * grid_, 3);
    for (int py = 0; py < grid_; ++py) {
        const int y0 = py * img.height / grid_, y1 = (py + 1) * img.height / grid_;
        for (int px = 0; px < grid_; ++px) {
            const int x0 = px * img.width / grid_, x1 = (px + 1) * img.width / grid_;
            double s[3] = {0, 0, 0};
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) {
                    for (int c = 0; c < 3; ++c) {
                        s[c] += img.at(x, y, c);
                    }
                }
            }
            const double n = static_cast<double>(x1 - x0) * (y1 - y0) * 255.0;
            for (int c = 0; c < 3; ++c) {
                means(py * grid_ + px, c) = s[c] / n;
            }
        }
    }
    return means;
}

AreaFeatures PatchMeanEncoder::encode(const Image &subimage, int source_index) const {
    Mat f = patch_means(subimage) * weight_.value;
    f.rowwise() += bias_.value.row(0);
    return {std::move(f), source_index};
}

Blob PatchMeanEncoder::to_blob() const {
    Blob b;
    b.kind = "visual-encoder";
    b.meta["grid"] = std::to_string(grid_);
    b.tensors.emplace_back(weight_.name, weight_.value);
    b.tensors.emplace_back(bias_.name, bias_.value);
    return b;
}

PatchMeanEncoder PatchMeanEncoder::from_blob(const Blob &b) {
    if (b.kind != "visual-encoder") {
        throw Error("expected a visual-encoder blob, got '" + b.kind + "'");
    }
    return PatchMeanEncoder(std::stoi(b.meta_at("grid")), b.tensor("visual.weight"), b.tensor("visual.bias"));
}

// ---------------------------------------------------------------------------

RowVec position_signal(int pos, int d) {
    RowVec p(d);
    for (int i = 0; i < d; ++i) {
        const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
        p(i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
    return p;
}

EmbeddingTextEncoder::EmbeddingTextEncoder(std::vector<std::string> vocabulary, Options opt)
    : vocab_(std::move(vocabulary)), opt_(opt) {
    if (opt_.d < 1 || opt_.unknown_buckets < 0) {
        throw ValidationError("EmbeddingTextEncoder: invalid options");
    }
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
        if (!index_.emplace(vocab_[i], static_cast<int>(i)).second) {
            throw ValidationError("EmbeddingTextEncoder: duplicate vocabulary entry '" + vocab_[i] + "'");
        }
    }
    std::mt19937_64 rng(opt_.seed);
    const auto rows = static_cast<Eigen::Index>(vocab_.size()) + opt_.unknown_buckets;
    embedding_ = ad::Parameter("text.embedding", gaussian(rows, opt_.d, 1.0, rng));
}

int EmbeddingTextEncoder::row_of(const std::string &token) const {
    auto it = index_.find(token);
    if (it != index_.end()) {
        return it->second;
    }
    if (opt_.closed_vocabulary || opt_.unknown_buckets == 0) {
        throw ValidationError("token '" + token + "' is not in the encoder vocabulary");
    }
    return static_cast<int>(vocab_.size()) + static_cast<int>(fnv1a(token) % opt_.unknown_buckets);
}

RowVec EmbeddingTextEncoder::embed(const std::string &token) const { return embedding_.value.row(row_of(token)); }

TokenFeatures EmbeddingTextEncoder::encode(const std::vector<std::string> &tokens) const {
    if (tokens.empty()) {
        throw ValidationError("encode_caption: empty token list");
    }
    if (tokens.size() > static_cast<std::size_t>(kMaxSequenceLength)) {
        throw ValidationError("encode_caption: " + std::to_string(tokens.size()) + " tokens exceed the limit of " +
                              std::to_string(kMaxSequenceLength));
    }
    TokenFeatures out;
    out.tokens = tokens;
    out.features.resize(static_cast<Eigen::Index>(tokens.size()), opt_.d);
    for (std::size_t j = 0; j < tokens.size(); ++j) {
        out.features.row(static_cast<Eigen::Index>(j)) =
            embed(tokens[j]) + opt_.position_scale * position_signal(static_cast<int>(j), opt_.d);
    }
    return out;
}

Blob EmbeddingTextEncoder::to_blob() const {
    Blob b;
    b.kind = "text-encoder";
    b.meta["vocabulary"] = join_lines(vocab_);
    b.meta["unknown_buckets"] = std::to_string(opt_.unknown_buckets);
    b.meta["closed_vocabulary"] = opt_.closed_vocabulary ? "1" : "0";
    std::ostringstream ps;
    ps.precision(17);
    ps << opt_.position_scale;
    b.meta["position_scale"] = ps.str();
    b.tensors.emplace_back(embedding_.name, embedding_.value);
    return b;
}

EmbeddingTextEncoder EmbeddingTextEncoder::from_blob(const Blob &b) {
    if (b.kind != "text-encoder") {
        throw Error("expected a text-encoder blob, got '" + b.kind + "'");
    }
    Options opt;
    const Mat &emb = b.tensor("text.embedding");
    opt.d = static_cast<int>(emb.cols());
    opt.unknown_buckets = std::stoi(b.meta_at("unknown_buckets"));
    opt.closed_vocabulary = b.meta_at("closed_vocabulary") == "1";
    opt.position_scale = std::stod(b.meta_at("position_scale"));
    EmbeddingTextEncoder enc(split_lines(b.meta_at("vocabulary")), opt);
    if (emb.rows() != enc.embedding_.value.rows()) {
        throw ShapeError("text-encoder blob: embedding rows do not match vocabulary");
    }
    enc.embedding_.value = emb;
    return enc;
}

// ---------------------------------------------------------------------------

AreaFeatures encode_with_variants(const VisualEncoder &enc, const Image &original, const std::vector<Image> &variants,
                                  int source_index, VariantCombine mode) {
    AreaFeatures base = enc.encode(original, source_index);
    if (variants.empty()) {
        return base;
    }
    if (mode == VariantCombine::average) {
        Mat acc = base.features;
        for (const Image &v : variants) {
            acc += enc.encode(v, source_index).features;
        }
        acc /= static_cast<double>(variants.size() + 1);
        return {std::move(acc), source_index};
    }
    std::vector<Mat> parts{base.features};
    Eigen::Index rows = base.features.rows();
    for (const Image &v : variants) {
        parts.push_back(enc.encode(v, source_index).features);
        rows += parts.back().rows();
    }
    Mat out(rows, base.features.cols());
    Eigen::Index off = 0;
    for (const Mat &p : parts) {
        out.middleRows(off, p.rows()) = p;
        off += p.rows();
    }
    return {std::move(out), source_index};
}

std::string assemble_chain_of_humor(const ChainOfHumor &c) {
    const std::pair<const char *, const std::string *> slots[] = {{"concept", &c.concept_name},
                                                                  {"emotion", &c.emotion},
                                                                  {"event", &c.event},
                                                                  {"consequence", &c.consequence},
                                                                  {"humor device", &c.humor_device}};
    std::string out;
    for (const auto &[label, value] : slots) {
        if (value->empty()) {
            throw ValidationError(std::string("chain-of-humor field '") + label + "' is empty");
        }
        if (!out.empty()) {
            out += " ; ";
        }
        out += label;
        out += " : ";
        out += *value;
    }
    return out;
}

} // namespace memecap
