#include "memecap/corpus.hpp"

#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace memecap {

using nlohmann::json;

std::string_view to_string(Structure s) { return s == Structure::single ? "single" : "multi"; }

std::string_view to_string(Sentiment s) {
    switch (s) {
    case Sentiment::self_praise:
        return "self_praise";
    case Sentiment::praise_others:
        return "praise_others";
    case Sentiment::self_mockery:
        return "self_mockery";
    case Sentiment::mock_others:
        return "mock_others";
    }
    return "?";
}

std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

Structure parse_structure(std::string_view s) {
    if (s == "single") {
        return Structure::single;
    }
    if (s == "multi") {
        return Structure::multi;
    }
    throw ValidationError("unknown structure label '" + std::string(s) + "'");
}

Sentiment parse_sentiment(std::string_view s) {
    for (Sentiment v : kSentiments) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw ValidationError("unknown sentiment label '" + std::string(s) + "'");
}

Split parse_split(std::string_view s) {
    if (s == "train") {
        return Split::train;
    }
    if (s == "test") {
        return Split::test;
    }
    throw ValidationError("unknown split label '" + std::string(s) + "'");
}

bool overlaps(const RoiBox &a, const RoiBox &b) {
    return std::max(a.x0, b.x0) < std::min(a.x1, b.x1) && std::max(a.y0, b.y0) < std::min(a.y1, b.y1);
}

double iou(const RoiBox &a, const RoiBox &b) {
    const long iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const long ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const long inter = iw * ih;
    const long uni = a.area() + b.area() - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

void validate_record(const MemeRecord &r, int w, int h) {
    auto fail = [&](const std::string &msg) { throw ValidationError("record '" + r.id + "': " + msg); };
    if (r.id.empty()) {
        throw ValidationError("record with empty id");
    }
    if (r.caption_tokens.empty()) {
        fail("caption has no tokens");
    }
    if (r.rois.empty()) {
        fail("no ROIs");
    }
    if (r.structure == Structure::single && r.rois.size() != 1) {
        fail("structure 'single' requires exactly one ROI, found " + std::to_string(r.rois.size()));
    }
    if (r.structure == Structure::multi && r.rois.size() < 2) {
        fail("structure 'multi' requires at least two ROIs");
    }
    for (std::size_t i = 0; i < r.rois.size(); ++i) {
        const RoiBox &b = r.rois[i];
        if (b.index != static_cast<int>(i)) {
            fail("ROI ordinals must be 0..n-1 in order");
        }
        if (!(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= w && 0 <= b.y0 && b.y0 < b.y1 && b.y1 <= h)) {
            fail("ROI " + std::to_string(i) + " lies outside the " + std::to_string(w) + "x" + std::to_string(h) +
                 " image");
        }
    }
    for (std::size_t i = 0; i < r.rois.size(); ++i) {
        for (std::size_t j = i + 1; j < r.rois.size(); ++j) {
            if (overlaps(r.rois[i], r.rois[j])) {
                fail("ROIs " + std::to_string(i) + " and " + std::to_string(j) + " overlap");
            }
        }
    }
    if (!r.humor.empty() && r.humor.size() != r.rois.size()) {
        fail("humor descriptions must be given for every ROI");
    }
}

// ---------------------------------------------------------------------------
// manifest

std::string manifest_line(const MemeRecord &r) {
    json j;
    j["id"] = r.id;
    j["image_path"] = r.image_path;
    j["structure"] = to_string(r.structure);
    j["sentiment"] = to_string(r.sentiment);
    j["caption"] = r.caption;
    json rois = json::array();
    for (const RoiBox &b : r.rois) {
        rois.push_back({b.x0, b.y0, b.x1, b.y1});
    }
    j["rois"] = rois;
    j["split"] = to_string(r.split);
    if (!r.humor.empty()) {
        json hs = json::array();
        for (const ChainOfHumor &c : r.humor) {
            hs.push_back({{"concept", c.concept_name},
                          {"emotion", c.emotion},
                          {"event", c.event},
                          {"consequence", c.consequence},
                          {"humor_device", c.humor_device}});
        }
        j["humor"] = hs;
    }
    return j.dump();
}

MemeRecord parse_manifest_line(std::string_view line, const Tokenizer &tok) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error &e) {
        throw ValidationError(std::string("malformed manifest line: ") + e.what());
    }
    MemeRecord r;
    try {
        r.id = j.at("id").get<std::string>();
    } catch (const json::exception &) {
        throw ValidationError("manifest line without an 'id'");
    }
    try {
        r.image_path = j.at("image_path").get<std::string>();
        r.structure = parse_structure(j.at("structure").get<std::string>());
        r.sentiment = parse_sentiment(j.at("sentiment").get<std::string>());
        r.caption = j.at("caption").get<std::string>();
        r.split = parse_split(j.value("split", std::string("train")));
        int idx = 0;
        for (const json &b : j.at("rois")) {
            if (!b.is_array() || b.size() != 4) {
                throw ValidationError("ROI must be [x0,y0,x1,y1]");
            }
            r.rois.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>(), idx++});
        }
        if (j.contains("humor")) {
            for (const json &c : j.at("humor")) {
                r.humor.push_back({c.at("concept").get<std::string>(), c.at("emotion").get<std::string>(),
                                   c.at("event").get<std::string>(), c.at("consequence").get<std::string>(),
                                   c.at("humor_device").get<std::string>()});
            }
        }
    } catch (const ValidationError &e) {
        throw ValidationError("record '" + r.id + "': " + e.what());
    } catch (const json::exception &e) {
        throw ValidationError("record '" + r.id + "': " + e.what());
    }
    r.caption_tokens = tok(r.caption);
    return r;
}

std::filesystem::path resolve_image(const std::filesystem::path &manifest_path, const MemeRecord &r) {
    std::filesystem::path p(r.image_path);
    if (p.is_absolute()) {
        return p;
    }
    return manifest_path.parent_path() / p;
}

std::vector<MemeRecord> load_manifest(const std::filesystem::path &path, const Tokenizer &tok) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open manifest " + path.string());
    }
    std::vector<MemeRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        MemeRecord r = parse_manifest_line(line, tok);
        const auto img = resolve_image(path, r);
        if (!std::filesystem::exists(img)) {
            throw LoadError(r.id, "record '" + r.id + "': image file " + img.string() + " not found");
        }
        const auto [w, h] = ppm_size(img);
        validate_record(r, w, h);
        for (const MemeRecord &prev : out) {
            if (prev.id == r.id) {
                throw ValidationError("duplicate record id '" + r.id + "'");
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::string manifest_text(const std::vector<MemeRecord> &records) {
    std::string out;
    for (const MemeRecord &r : records) {
        out += manifest_line(r);
        out += '\n';
    }
    return out;
}

void save_manifest(const std::filesystem::path &path, const std::vector<MemeRecord> &records) {
    write_file(path, manifest_text(records));
}

// ---------------------------------------------------------------------------
// segmentation

namespace {

struct Run {
    int start = 0;
    int end = 0; // exclusive
    bool flat = false;
    int length() const { return end - start; }
};

struct Region {
    int x0, y0, x1, y1;
};

// Pixel statistics of a line (row if horizontal, column otherwise) restricted to the region.
struct LineStats {
    std::array<double, 3> mean{};
    double sum = 0.0, sumsq = 0.0;
    long n = 0;
};

LineStats line_stats(const Image &img, const Region &reg, bool rows, int k) {
    LineStats s;
    std::array<double, 3> csum{};
    const int a = rows ? reg.x0 : reg.y0;
    const int b = rows ? reg.x1 : reg.y1;
    for (int t = a; t < b; ++t) {
        const int x = rows ? t : k;
        const int y = rows ? k : t;
        for (int c = 0; c < 3; ++c) {
            const double v = img.at(x, y, c);
            csum[c] += v;
            s.sum += v;
            s.sumsq += v * v;
        }
    }
    const int len = b - a;
    s.n = static_cast<long>(len) * 3;
    for (int c = 0; c < 3; ++c) {
        s.mean[c] = csum[c] / len;
    }
    return s;
}

double stddev(double sum, double sumsq, long n) {
    const double m = sum / static_cast<double>(n);
    return std::sqrt(std::max(0.0, sumsq / static_cast<double>(n) - m * m));
}

// Partitions the region's extent along one axis into maximal flat runs
// (uniform colour across the band) and non-flat stretches.
std::vector<Run> partition_lines(const Image &img, const Region &reg, bool rows, double thr) {
    const int lo = rows ? reg.y0 : reg.x0;
    const int hi = rows ? reg.y1 : reg.x1;
    std::vector<Run> runs;
    double run_sum = 0.0, run_sumsq = 0.0;
    long run_n = 0;
    std::array<double, 3> run_color{};
    for (int k = lo; k < hi; ++k) {
        const LineStats s = line_stats(img, reg, rows, k);
        const bool flat = stddev(s.sum, s.sumsq, s.n) < thr;
        bool extends = false;
        if (flat && !runs.empty() && runs.back().flat && runs.back().end == k) {
            bool same = true;
            for (int c = 0; c < 3; ++c) {
                same = same && std::abs(s.mean[c] - run_color[c]) < thr;
            }
            extends = same && stddev(run_sum + s.sum, run_sumsq + s.sumsq, run_n + s.n) < thr;
        } else if (!flat && !runs.empty() && !runs.back().flat && runs.back().end == k) {
            extends = true;
        }
        if (extends) {
            runs.back().end = k + 1;
            run_sum += s.sum;
            run_sumsq += s.sumsq;
            run_n += s.n;
        } else {
            runs.push_back({k, k + 1, flat});
            run_sum = s.sum;
            run_sumsq = s.sumsq;
            run_n = s.n;
            run_color = s.mean;
        }
    }
    return runs;
}

// Separator bands: interior flat runs at least min_thickness thick and
// strictly thinner than both neighbouring runs.
std::vector<Run> find_separators(const std::vector<Run> &runs, int min_thickness) {
    std::vector<Run> seps;
    for (std::size_t i = 1; i + 1 < runs.size(); ++i) {
        const Run &r = runs[i];
        if (r.flat && r.length() >= min_thickness && r.length() < runs[i - 1].length() &&
            r.length() < runs[i + 1].length()) {
            seps.push_back(r);
        }
    }
    return seps;
}

void split_region(const Image &img, const Region &reg, bool rows_first, int depth, double thr,
                  const SegmentConfig &cfg, std::vector<Region> &out) {
    for (int attempt = 0; attempt < 2; ++attempt) {
        const bool rows = (attempt == 0) == rows_first;
        const auto runs = partition_lines(img, reg, rows, thr);
        const auto seps = find_separators(runs, cfg.min_thickness);
        if (seps.empty()) {
            if (depth > 0) {
                break; // the parent already tried the other axis
            }
            continue;
        }
        const int lo = rows ? reg.y0 : reg.x0;
        const int hi = rows ? reg.y1 : reg.x1;
        int cursor = lo;
        std::vector<std::pair<int, int>> spans;
        for (const Run &s : seps) {
            spans.emplace_back(cursor, s.start);
            cursor = s.end;
        }
        spans.emplace_back(cursor, hi);
        for (const auto &[a, b] : spans) {
            if (b <= a) {
                throw SegmentationError("segmentation produced a zero-area panel");
            }
            Region child = rows ? Region{reg.x0, a, reg.x1, b} : Region{a, reg.y0, b, reg.y1};
            if (depth >= 6) {
                out.push_back(child);
            } else {
                split_region(img, child, !rows, depth + 1, thr, cfg, out);
            }
        }
        return;
    }
    out.push_back(reg);
}

} // namespace

std::vector<RoiBox> segment_subimages(const Image &image, SegmentMode mode,
                                      const std::optional<std::vector<RoiBox>> &manual_rois,
                                      const SegmentConfig &cfg) {
    if (image.empty()) {
        throw ValidationError("segment_subimages: empty image");
    }
    if (mode == SegmentMode::manual) {
        if (!manual_rois) {
            throw ValidationError("manual segmentation requires an ROI list");
        }
        const auto &rois = *manual_rois;
        for (std::size_t i = 0; i < rois.size(); ++i) {
            const RoiBox &b = rois[i];
            if (!(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= image.width && 0 <= b.y0 && b.y0 < b.y1 &&
                  b.y1 <= image.height)) {
                throw ValidationError("manual ROI " + std::to_string(i) + " lies outside the image");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (overlaps(rois[i], rois[j])) {
                    throw ValidationError("manual ROIs " + std::to_string(j) + " and " + std::to_string(i) +
                                          " overlap");
                }
            }
        }
        return rois;
    }

    const auto [lo, hi] = std::minmax_element(image.rgb.begin(), image.rgb.end());
    const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
    const double thr = cfg.relative_threshold * range;

    std::vector<Region> regions;
    split_region(image, Region{0, 0, image.width, image.height}, true, 0, thr, cfg, regions);
    std::sort(regions.begin(), regions.end(), [](const Region &a, const Region &b) {
        return a.y0 != b.y0 ? a.y0 < b.y0 : a.x0 < b.x0;
    });
    std::vector<RoiBox> out;
    for (const Region &r : regions) {
        if (r.x1 <= r.x0 || r.y1 <= r.y0) {
            throw SegmentationError("segmentation produced a zero-area panel");
        }
        out.push_back({r.x0, r.y0, r.x1, r.y1, static_cast<int>(out.size())});
    }
    return out;
}

// ---------------------------------------------------------------------------
// statistics

namespace {

TokenStats token_stats(const std::vector<const MemeRecord *> &rs) {
    TokenStats t;
    t.count = rs.size();
    t.min = std::numeric_limits<int>::max();
    t.max = 0;
    double sum = 0.0;
    for (const MemeRecord *r : rs) {
        const int n = static_cast<int>(r->caption_tokens.size());
        sum += n;
        t.min = std::min(t.min, n);
        t.max = std::max(t.max, n);
    }
    t.avg = sum / static_cast<double>(rs.size());
    return t;
}

} // namespace

CorpusStats compute_stats(const std::vector<MemeRecord> &records) {
    if (records.empty()) {
        throw ValidationError("compute_stats: empty record list");
    }
    CorpusStats s;
    s.count_total = records.size();
    std::vector<const MemeRecord *> all;
    std::array<std::vector<const MemeRecord *>, 4> by_sent;
    std::size_t singles = 0;
    for (const MemeRecord &r : records) {
        all.push_back(&r);
        by_sent[static_cast<int>(r.sentiment)].push_back(&r);
        singles += r.structure == Structure::single ? 1 : 0;
    }
    const double n = static_cast<double>(records.size());
    s.fraction_single = static_cast<double>(singles) / n;
    s.fraction_multi = static_cast<double>(records.size() - singles) / n;
    s.tokens = token_stats(all);
    for (int k = 0; k < 4; ++k) {
        s.fraction_per_sentiment[k] = static_cast<double>(by_sent[k].size()) / n;
        if (!by_sent[k].empty()) {
            s.tokens_per_sentiment[k] = token_stats(by_sent[k]);
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// balancing

namespace {

// Largest-remainder apportionment of m items over fractions.
template <std::size_t K> std::array<int, K> apportion(int m, const std::array<double, K> &f) {
    std::array<int, K> out{};
    std::array<double, K> rem{};
    int used = 0;
    for (std::size_t i = 0; i < K; ++i) {
        const double exact = m * f[i];
        out[i] = static_cast<int>(std::floor(exact + 1e-9));
        rem[i] = exact - out[i];
        used += out[i];
    }
    std::array<std::size_t, K> order{};
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; used < m && k < K; ++k) {
        if (f[order[k]] > 0) {
            ++out[order[k]];
            ++used;
        }
    }
    return out;
}

// Max-flow over source -> structure -> (structure, sentiment) cell -> sentiment -> sink.
// Returns cell quotas if the margins can be met within the available counts.
std::optional<std::array<std::array<int, 4>, 2>> fill_quotas(const std::array<int, 2> &sm, const std::array<int, 4> &em,
                                                            const std::array<std::array<int, 4>, 2> &avail) {
    // nodes: 0 source, 1-2 structure, 3-6 sentiment, 7 sink
    constexpr int kN = 8;
    std::array<std::array<int, kN>, kN> cap{};
    for (int s = 0; s < 2; ++s) {
        cap[0][1 + s] = sm[s];
        for (int e = 0; e < 4; ++e) {
            cap[1 + s][3 + e] = avail[s][e];
        }
    }
    for (int e = 0; e < 4; ++e) {
        cap[3 + e][7] = em[e];
    }
    const auto original = cap;
    int flow = 0;
    while (true) {
        std::array<int, kN> prev;
        prev.fill(-1);
        prev[0] = 0;
        std::vector<int> q{0};
        for (std::size_t h = 0; h < q.size() && prev[7] < 0; ++h) {
            const int u = q[h];
            for (int v = 0; v < kN; ++v) {
                if (prev[v] < 0 && cap[u][v] > 0) {
                    prev[v] = u;
                    q.push_back(v);
                }
            }
        }
        if (prev[7] < 0) {
            break;
        }
        int aug = std::numeric_limits<int>::max();
        for (int v = 7; v != 0; v = prev[v]) {
            aug = std::min(aug, cap[prev[v]][v]);
        }
        for (int v = 7; v != 0; v = prev[v]) {
            cap[prev[v]][v] -= aug;
            cap[v][prev[v]] += aug;
        }
        flow += aug;
    }
    const int need = sm[0] + sm[1];
    if (flow != need) {
        return std::nullopt;
    }
    std::array<std::array<int, 4>, 2> q{};
    for (int s = 0; s < 2; ++s) {
        for (int e = 0; e < 4; ++e) {
            q[s][e] = original[1 + s][3 + e] - cap[1 + s][3 + e];
        }
    }
    return q;
}

} // namespace

std::vector<MemeRecord> balance_downsample(const std::vector<MemeRecord> &records, const BalanceTargets &targets,
                                          std::uint64_t seed) {
    auto check_sum = [](auto &arr, const char *axis) {
        double s = 0.0;
        for (double v : arr) {
            if (v < 0.0) {
                throw ValidationError(std::string("negative target fraction on ") + axis);
            }
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) {
            throw ValidationError(std::string("target fractions for ") + axis + " must sum to 1");
        }
    };
    check_sum(targets.structure, "structure");
    check_sum(targets.sentiment, "sentiment");

    std::array<std::array<std::vector<std::size_t>, 4>, 2> cells;
    for (std::size_t i = 0; i < records.size(); ++i) {
        cells[static_cast<int>(records[i].structure)][static_cast<int>(records[i].sentiment)].push_back(i);
    }
    std::array<std::array<int, 4>, 2> avail{};
    std::array<int, 2> s_avail{};
    std::array<int, 4> e_avail{};
    for (int s = 0; s < 2; ++s) {
        for (int e = 0; e < 4; ++e) {
            avail[s][e] = static_cast<int>(cells[s][e].size());
            s_avail[s] += avail[s][e];
            e_avail[e] += avail[s][e];
        }
    }
    std::string missing;
    for (int s = 0; s < 2; ++s) {
        if (targets.structure[s] > 0 && s_avail[s] == 0) {
            missing += std::string(missing.empty() ? "" : ", ") + std::string(to_string(static_cast<Structure>(s)));
        }
    }
    for (int e = 0; e < 4; ++e) {
        if (targets.sentiment[e] > 0 && e_avail[e] == 0) {
            missing += std::string(missing.empty() ? "" : ", ") + std::string(to_string(static_cast<Sentiment>(e)));
        }
    }
    if (!missing.empty()) {
        throw ValidationError("balance_downsample: requested categories absent from input: " + missing);
    }

    // Prefer sizes whose quotas are exact integers on both axes; fall back to rounded quotas.
    auto exact = [](int m, const auto &fractions) {
        for (double f : fractions) {
            const double q = f * m;
            if (std::abs(q - std::round(q)) > 1e-9) {
                return false;
            }
        }
        return true;
    };
    for (int pass = 0; pass < 2; ++pass) {
        for (int m = static_cast<int>(records.size()); m >= 1; --m) {
            if (pass == 0 && !(exact(m, targets.structure) && exact(m, targets.sentiment))) {
                continue;
            }
            const auto sm = apportion(m, targets.structure);
            const auto em = apportion(m, targets.sentiment);
            const auto quotas = fill_quotas(sm, em, avail);
            if (!quotas) {
                continue;
            }
            std::mt19937_64 rng(seed);
            std::vector<bool> keep(records.size(), false);
            for (int s = 0; s < 2; ++s) {
                for (int e = 0; e < 4; ++e) {
                    std::vector<std::size_t> idx = cells[s][e];
                    std::shuffle(idx.begin(), idx.end(), rng);
                    for (int k = 0; k < (*quotas)[s][e]; ++k) {
                        keep[idx[static_cast<std::size_t>(k)]] = true;
                    }
                }
            }
            std::vector<MemeRecord> out;
            for (std::size_t i = 0; i < records.size(); ++i) {
                if (keep[i]) {
                    out.push_back(records[i]);
                }
            }
            return out;
        }
    }
    throw ValidationError("balance_downsample: no non-empty subset meets the targets");
}

} // namespace memecap
