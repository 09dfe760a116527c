#include "memecap/metrics.hpp"

#include "memecap/error.hpp"
#include "memecap/tokenize.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace memecap {

namespace {

using NgramCounts = std::map<Tokens, int>;

NgramCounts ngrams(const Tokens &t, int n) {
    NgramCounts out;
    if (static_cast<int>(t.size()) < n) {
        return out;
    }
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
        ++out[Tokens(t.begin() + static_cast<long>(i), t.begin() + static_cast<long>(i) + n)];
    }
    return out;
}

} // namespace

double bleu(const Tokens &candidate, const std::vector<Tokens> &references, int max_n, bool *empty_candidate) {
    if (empty_candidate) {
        *empty_candidate = candidate.empty();
    }
    if (references.empty()) {
        throw ValidationError("bleu: no references");
    }
    for (const Tokens &r : references) {
        if (r.empty()) {
            throw ValidationError("bleu: empty reference");
        }
    }
    if (max_n < 1) {
        throw ValidationError("bleu: max_n must be >= 1");
    }
    if (candidate.empty()) {
        return 0.0;
    }
    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        const NgramCounts cand = ngrams(candidate, n);
        NgramCounts max_ref;
        for (const Tokens &r : references) {
            for (const auto &[g, c] : ngrams(r, n)) {
                max_ref[g] = std::max(max_ref[g], c);
            }
        }
        int clipped = 0, total = 0;
        for (const auto &[g, c] : cand) {
            total += c;
            auto it = max_ref.find(g);
            clipped += it == max_ref.end() ? 0 : std::min(c, it->second);
        }
        double p;
        if (clipped > 0) {
            p = static_cast<double>(clipped) / total;
        } else if (n >= 2) {
            p = 1.0 / (total + 1.0);
        } else {
            return 0.0;
        }
        log_sum += std::log(p);
    }
    const double c = static_cast<double>(candidate.size());
    // closest reference length, shorter one on ties
    double r = static_cast<double>(references[0].size());
    for (const Tokens &ref : references) {
        const double len = static_cast<double>(ref.size());
        if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) {
            r = len;
        }
    }
    const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
    return bp * std::exp(log_sum / max_n);
}

std::size_t lcs_length(const Tokens &a, const Tokens &b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l(const Tokens &candidate, const Tokens &reference, double beta) {
    if (candidate.empty() || reference.empty()) {
        throw ValidationError("rouge_l: empty token list");
    }
    const double l = static_cast<double>(lcs_length(candidate, reference));
    if (l == 0.0) {
        return 0.0;
    }
    const double p = l / static_cast<double>(candidate.size());
    const double r = l / static_cast<double>(reference.size());
    const double b2 = beta * beta;
    return (1.0 + b2) * p * r / (r + b2 * p);
}

std::vector<double> cider(const std::vector<Tokens> &candidates, const std::vector<std::vector<Tokens>> &references) {
    if (candidates.size() != references.size()) {
        throw ValidationError("cider: candidate and reference lists differ in length");
    }
    const std::size_t n_docs = references.size();
    if (n_docs < 2) {
        throw ValidationError("cider: need at least two memes for document frequencies");
    }
    std::vector<double> scores(n_docs, 0.0);
    for (int n = 1; n <= 4; ++n) {
        std::map<Tokens, int> df;
        for (const auto &refs : references) {
            std::set<Tokens> seen;
            for (const Tokens &r : refs) {
                for (const auto &[g, c] : ngrams(r, n)) {
                    seen.insert(g);
                }
            }
            for (const Tokens &g : seen) {
                ++df[g];
            }
        }
        auto vec = [&](const Tokens &t) {
            std::map<Tokens, double> v;
            const NgramCounts counts = ngrams(t, n);
            double total = 0.0;
            for (const auto &[g, c] : counts) {
                total += c;
            }
            for (const auto &[g, c] : counts) {
                auto it = df.find(g);
                const double d = it == df.end() ? 1.0 : std::max(1.0, static_cast<double>(it->second));
                v[g] = (c / total) * std::log(static_cast<double>(n_docs) / d);
            }
            return v;
        };
        auto norm = [](const std::map<Tokens, double> &v) {
            double s = 0.0;
            for (const auto &[g, x] : v) {
                s += x * x;
            }
            return std::sqrt(s);
        };
        for (std::size_t m = 0; m < n_docs; ++m) {
            if (references[m].empty()) {
                throw ValidationError("cider: meme without references");
            }
            const auto cv = vec(candidates[m]);
            const double cn = norm(cv);
            double acc = 0.0;
            for (const Tokens &r : references[m]) {
                const auto rv = vec(r);
                const double rn = norm(rv);
                if (cn == 0.0 || rn == 0.0) {
                    continue;
                }
                double dot = 0.0;
                for (const auto &[g, x] : cv) {
                    auto it = rv.find(g);
                    if (it != rv.end()) {
                        dot += x * it->second;
                    }
                }
                acc += dot / (cn * rn);
            }
            scores[m] += acc / static_cast<double>(references[m].size());
        }
    }
    for (double &s : scores) {
        s = s / 4.0 * 10.0;
    }
    return scores;
}

namespace {

// Maximum-match exact alignment minimizing chunk count.
struct ChunkSearch {
    const Tokens &cand;
    const Tokens &ref;
    std::vector<int> align; // candidate index -> reference index or -1
    std::vector<bool> used;
    std::map<std::string, int> need;      // matches still required per word
    std::map<std::string, int> remaining; // candidate occurrences not yet visited per word
    int best = std::numeric_limits<int>::max();

    int chunks_so_far(std::size_t upto) const {
        int chunks = 0;
        int prev_c = -2, prev_r = -2;
        for (std::size_t i = 0; i < upto; ++i) {
            if (align[i] < 0) {
                continue;
            }
            if (!(static_cast<int>(i) == prev_c + 1 && align[i] == prev_r + 1)) {
                ++chunks;
            }
            prev_c = static_cast<int>(i);
            prev_r = align[i];
        }
        return chunks;
    }

    void run(std::size_t i) {
        const int so_far = chunks_so_far(i);
        if (so_far >= best) {
            return;
        }
        if (i == cand.size()) {
            best = so_far;
            return;
        }
        const std::string &w = cand[i];
        --remaining[w];
        if (need[w] > 0) {
            --need[w];
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (!used[j] && ref[j] == w) {
                    used[j] = true;
                    align[i] = static_cast<int>(j);
                    run(i + 1);
                    align[i] = -1;
                    used[j] = false;
                }
            }
            ++need[w];
        }
        if (remaining[w] >= need[w]) { // can still reach the maximum without matching here
            run(i + 1);
        }
        ++remaining[w];
    }
};

} // namespace

double meteor(const Tokens &candidate, const Tokens &reference) {
    if (candidate.empty() || reference.empty()) {
        throw ValidationError("meteor: empty token list");
    }
    std::map<std::string, int> cc, rc;
    for (const auto &t : candidate) {
        ++cc[t];
    }
    for (const auto &t : reference) {
        ++rc[t];
    }
    ChunkSearch s{candidate, reference, std::vector<int>(candidate.size(), -1),
                  std::vector<bool>(reference.size(), false), {}, {}};
    int m = 0;
    for (const auto &[w, c] : cc) {
        auto it = rc.find(w);
        const int k = it == rc.end() ? 0 : std::min(c, it->second);
        s.need[w] = k;
        s.remaining[w] = c;
        m += k;
    }
    if (m == 0) {
        return 0.0;
    }
    s.run(0);
    const double p = static_cast<double>(m) / static_cast<double>(candidate.size());
    const double r = static_cast<double>(m) / static_cast<double>(reference.size());
    const double alpha = 0.9;
    const double fmean = p * r / (alpha * p + (1.0 - alpha) * r);
    const double frag = static_cast<double>(s.best) / m;
    return fmean * (1.0 - 0.5 * frag * frag * frag);
}

ScaledRubric rubric_scale(const RubricScores &raw) {
    for (int v : {raw.informativeness, raw.relevance, raw.creativity, raw.humor}) {
        if (v < 1 || v > 5) {
            throw ValidationError("rubric score " + std::to_string(v) + " outside 1..5");
        }
    }
    return {raw.informativeness * 20, raw.relevance * 20, raw.creativity * 20, raw.humor * 20};
}

Composite composite_score(const std::optional<std::array<double, 4>> &human, const std::array<double, 4> &automatic) {
    auto check = [](const std::array<double, 4> &v) {
        for (double x : v) {
            if (!(x >= 0.0 && x <= 100.0)) {
                throw ValidationError("composite_score: value outside [0, 100]");
            }
        }
    };
    auto mean = [](const std::array<double, 4> &v) { return (v[0] + v[1] + v[2] + v[3]) / 4.0; };
    check(automatic);
    Composite c;
    c.maverage = mean(automatic);
    if (human) {
        check(*human);
        c.haverage = mean(*human);
        c.average = (*c.haverage + c.maverage) / 2.0;
    }
    return c;
}

double round_half_up(double x, int digits) {
    const double scale = std::pow(10.0, digits);
    const double y = x * scale;
    return std::floor(y + 0.5 + std::abs(y) * 1e-12) / scale;
}

// ---- reports ----

namespace {

std::string fixed2(double v) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(2) << round_half_up(v);
    return ss.str();
}

nlohmann::ordered_json summary_json(const ReportSummary &s) {
    nlohmann::ordered_json j;
    j["summary"] = s.label;
    j["count"] = s.count;
    const char *hn[] = {"Info", "Rele", "Crea", "Humo"};
    const char *an[] = {"BLEU", "ROUGE", "CIDEr", "METEOR"};
    for (int i = 0; i < 4; ++i) {
        j[hn[i]] = s.human ? nlohmann::ordered_json(round_half_up((*s.human)[static_cast<std::size_t>(i)]))
                           : nlohmann::ordered_json(nullptr);
    }
    j["HAverage"] = s.composite.haverage ? nlohmann::ordered_json(round_half_up(*s.composite.haverage))
                                         : nlohmann::ordered_json(nullptr);
    for (int i = 0; i < 4; ++i) {
        j[an[i]] = round_half_up(s.automatic[static_cast<std::size_t>(i)]);
    }
    j["MAverage"] = round_half_up(s.composite.maverage);
    j["Average"] = s.composite.average ? nlohmann::ordered_json(round_half_up(*s.composite.average))
                                       : nlohmann::ordered_json(nullptr);
    j["meteor_variant"] = "exact-match only";
    return j;
}

} // namespace

std::string EvaluationReport::to_lines() const {
    std::string out;
    for (const MemeScores &m : memes) {
        nlohmann::ordered_json j;
        j["id"] = m.id;
        j["structure"] = m.structure;
        j["candidate"] = join_tokens(m.candidate);
        j["bleu"] = m.bleu;
        j["rouge_l"] = m.rouge_l;
        j["cider"] = m.cider;
        j["meteor"] = m.meteor;
        if (m.empty_candidate) {
            j["warning"] = "empty candidate";
        }
        if (m.rubric) {
            j["rubric"] = *m.rubric;
        }
        out += j.dump() + "\n";
    }
    for (const ReportSummary &s : summaries) {
        nlohmann::ordered_json j = summary_json(s);
        j["config_hash"] = config_hash;
        out += j.dump() + "\n";
    }
    return out;
}

std::string EvaluationReport::to_csv() const {
    std::ostringstream ss;
    ss << "group,count,Info,Rele,Crea,Humo,HAverage,BLEU,ROUGE,CIDEr,METEOR,MAverage,Average\n";
    for (const ReportSummary &s : summaries) {
        ss << s.label << ',' << s.count;
        for (int i = 0; i < 4; ++i) {
            ss << ',' << (s.human ? fixed2((*s.human)[static_cast<std::size_t>(i)]) : "");
        }
        ss << ',' << (s.composite.haverage ? fixed2(*s.composite.haverage) : "");
        for (double v : s.automatic) {
            ss << ',' << fixed2(v);
        }
        ss << ',' << fixed2(s.composite.maverage) << ',' << (s.composite.average ? fixed2(*s.composite.average) : "")
           << '\n';
    }
    return ss.str();
}

EvaluationReport evaluate_captions(const std::vector<std::string> &ids, const std::vector<std::string> &structures,
                                   const std::vector<Tokens> &candidates, const std::vector<Tokens> &references,
                                   const std::vector<std::optional<std::array<double, 4>>> &rubric,
                                   const std::string &config_hash) {
    const std::size_t n = ids.size();
    if (structures.size() != n || candidates.size() != n || references.size() != n || rubric.size() != n) {
        throw ValidationError("evaluate: input lists differ in length");
    }
    EvaluationReport rep;
    rep.config_hash = config_hash;
    std::vector<std::vector<Tokens>> refs;
    for (const Tokens &r : references) {
        refs.push_back({r});
    }
    const std::vector<double> ci = cider(candidates, refs);
    for (std::size_t i = 0; i < n; ++i) {
        MemeScores m;
        m.id = ids[i];
        m.structure = structures[i];
        m.candidate = candidates[i];
        m.bleu = bleu(candidates[i], {references[i]}, 4, &m.empty_candidate);
        if (!m.empty_candidate) {
            m.rouge_l = rouge_l(candidates[i], references[i]);
            m.meteor = meteor(candidates[i], references[i]);
        }
        m.cider = ci[i];
        m.rubric = rubric[i];
        rep.memes.push_back(std::move(m));
    }
    for (const std::string group : {"all", "single", "multi"}) {
        ReportSummary s;
        s.label = group;
        std::array<double, 4> hs{};
        std::size_t rated = 0;
        for (const MemeScores &m : rep.memes) {
            if (group != "all" && m.structure != group) {
                continue;
            }
            ++s.count;
            s.automatic[0] += m.bleu * 100.0;
            s.automatic[1] += m.rouge_l * 100.0;
            s.automatic[2] += m.cider * 10.0;
            s.automatic[3] += m.meteor * 100.0;
            if (m.rubric) {
                for (std::size_t k = 0; k < 4; ++k) {
                    hs[k] += (*m.rubric)[k];
                }
                ++rated;
            }
        }
        if (s.count == 0) {
            continue;
        }
        for (double &v : s.automatic) {
            v /= static_cast<double>(s.count);
        }
        if (rated > 0) {
            for (double &v : hs) {
                v /= static_cast<double>(rated);
            }
            s.human = hs;
        }
        s.composite = composite_score(s.human, s.automatic);
        rep.summaries.push_back(s);
    }
    return rep;
}

} // namespace memecap
