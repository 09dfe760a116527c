#include "memecap/annotate.hpp"

#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace memecap {

const std::vector<RubricCriterion> &rubric_criteria() {
    static const std::vector<RubricCriterion> kCriteria = {
    {"Informativeness",
     {"Score 1 - Not Informative: The meme caption is completely uninformative, lacking relevant content that provides context or clarity to the image.",
      "Score 2 - Slightly Informative: The meme caption is slightly informative, offering minimal context or clarification that marginally enhances the image.",
      "Score 3 - Moderately Informative: The meme caption is moderately informative, providing a fair amount of context or clarification that adds some meaning to the image.",
      "Score 4 - Very Informative: The meme caption is very informative, delivering substantial context or clarification that greatly enhances the understanding of the image.",
      "Score 5 - Exceptionally Informative: The meme caption is exceptionally informative, presenting comprehensive context or clarification that significantly enriches the image and user experience."}},
    {"Relevance",
     {"Score 1 - Not Relevant: The meme caption is completely unrelated to the image, failing to add any meaningful context or humor related to the image.",
      "Score 2 - Slightly Relevant: The meme caption is slightly relevant, providing little context or humor that connects with the image.",
      "Score 3 - Moderately Relevant: The meme caption is moderately relevant, offering a moderate connection to the image with some contextual humor or meaning.",
      "Score 4 - Very Relevant: The meme caption is very relevant, adding significant context or humor that strongly connects with the image.",
      "Score 5 - Exceptionally Relevant: The meme caption is exceptionally relevant, perfectly complementing the image with highly pertinent context or humor, enhancing the overall impact."}},
    {"Creativity",
     {"Score 1 - Not Creative: The caption is completely uncreative, lacking originality and wit.",
      "Score 2 - Slightly Creative: The caption is slightly creative, offering basic and predictable humor.",
      "Score 3 - Moderately Creative: The caption is moderately creative, presenting a conventional yet slightly innovative twist.",
      "Score 4 - Very Creative: The caption is very creative, featuring a unique and clever idea or joke.",
      "Score 5 - Exceptionally Creative: The caption is exceptionally creative, displaying high originality and a sharp, memorable wit."}},
    {"Humorous",
     {"Score 1 - Not Humorous: The caption is completely not humorous, failing to evoke any laughter or amusement.",
      "Score 2 - Slightly Humorous: The caption is slightly humorous, eliciting a mild smile or light chuckle at best.",
      "Score 3 - Moderately Humorous: The caption is moderately humorous, generating a genuine laugh or amusement with its content.",
      "Score 4 - Very Humorous: The caption is very humorous, provoking strong laughter and enjoyment with its clever humor.",
      "Score 5 - Exceptionally Humorous: The caption is exceptionally humorous, delivering a memorable and hilarious experience that leaves a lasting impression of amusement."}},
    };
    return kCriteria;
}

namespace {

using nlohmann::json;

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream ss;
    ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return ss.str();
}

std::string task_id(std::size_t n) {
    std::ostringstream ss;
    ss << 't' << std::setw(5) << std::setfill('0') << n;
    return ss.str();
}

std::vector<AnnotationTask> build_tasks(const std::vector<QueueSet> &sets, bool rubric) {
    std::vector<AnnotationTask> tasks;
    for (const QueueSet &s : sets) {
        for (std::size_t i = 0; i < s.candidate_ids.size(); ++i) {
            for (std::size_t j = i + 1; j < s.candidate_ids.size(); ++j) {
                AnnotationTask t;
                t.id = task_id(tasks.size() + 1);
                t.kind = TaskKind::pair;
                t.meme_id = s.meme_id;
                t.candidate_ids = {s.candidate_ids[i], s.candidate_ids[j]};
                t.captions = {s.captions[i], s.captions[j]};
                tasks.push_back(std::move(t));
            }
        }
        if (rubric) {
            for (std::size_t i = 0; i < s.candidate_ids.size(); ++i) {
                AnnotationTask t;
                t.id = task_id(tasks.size() + 1);
                t.kind = TaskKind::rubric;
                t.meme_id = s.meme_id;
                t.candidate_ids = {s.candidate_ids[i]};
                t.captions = {s.captions[i]};
                tasks.push_back(std::move(t));
            }
        }
    }
    return tasks;
}

void check_set(const QueueSet &s) {
    if (s.candidate_ids.size() != s.captions.size()) {
        throw ValidationError("queue set '" + s.meme_id + "': ids and captions differ in count");
    }
    if (s.candidate_ids.size() < 2) {
        throw ValidationError("queue set '" + s.meme_id + "' needs at least two candidates");
    }
    std::set<std::string> ids(s.candidate_ids.begin(), s.candidate_ids.end());
    std::set<std::string> caps(s.captions.begin(), s.captions.end());
    if (ids.size() != s.candidate_ids.size() || caps.size() != s.captions.size()) {
        throw ValidationError("queue set '" + s.meme_id + "' has repeated candidates");
    }
}

} // namespace

std::string task_json(const AnnotationTask &t) {
    json j;
    j["task_id"] = t.id;
    j["kind"] = t.kind == TaskKind::pair ? "pair" : "rubric";
    j["meme_id"] = t.meme_id;
    j["image"] = "/memes/" + t.meme_id + "/image";
    j["candidate_ids"] = t.candidate_ids;
    j["captions"] = t.captions;
    if (t.kind == TaskKind::rubric) {
        json crit = json::array();
        for (const RubricCriterion &c : rubric_criteria()) {
            crit.push_back({{"name", c.name}, {"levels", c.levels}});
        }
        j["criteria"] = crit;
    }
    return j.dump();
}

std::string response_line(const AnnotationResponse &r) {
    json j;
    j["task_id"] = r.task_id;
    j["annotator"] = r.annotator;
    if (r.winner) {
        j["winner"] = *r.winner == 0 ? "first" : "second";
    }
    if (r.rubric) {
        j["rubric"] = *r.rubric;
    }
    j["timestamp"] = r.timestamp;
    return j.dump();
}

AnnotationResponse parse_response(std::string_view body) {
    AnnotationResponse r;
    json j;
    try {
        j = json::parse(body);
    } catch (const json::exception &e) {
        throw ValidationError(std::string("response is not valid structured text: ") + e.what());
    }
    if (!j.is_object()) {
        throw ValidationError("response must be an object");
    }
    try {
        r.task_id = j.at("task_id").get<std::string>();
        r.annotator = j.at("annotator").get<std::string>();
        if (j.contains("winner")) {
            const std::string w = j["winner"].get<std::string>();
            if (w != "first" && w != "second") {
                throw ValidationError("winner must be 'first' or 'second'");
            }
            r.winner = w == "first" ? 0 : 1;
        }
        if (j.contains("rubric")) {
            const auto v = j["rubric"].get<std::vector<int>>();
            if (v.size() != 4) {
                throw ValidationError("rubric needs exactly four scores");
            }
            r.rubric = std::array<int, 4>{v[0], v[1], v[2], v[3]};
        }
        if (j.contains("timestamp")) {
            r.timestamp = j["timestamp"].get<std::string>();
        }
    } catch (const json::exception &e) {
        throw ValidationError(std::string("malformed response: ") + e.what());
    }
    return r;
}

std::vector<QueueSet> sample_sets(const std::vector<QueueSet> &sets, const QueueConfig &cfg) {
    if (!(cfg.fraction > 0.0 && cfg.fraction <= 1.0)) {
        throw ValidationError("annotation fraction must lie in (0, 1]");
    }
    if (sets.empty()) {
        return {};
    }
    const auto want = static_cast<std::size_t>(std::ceil(cfg.fraction * static_cast<double>(sets.size()) - 1e-9));
    std::vector<std::size_t> idx(sets.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(want, idx.size()));
    std::sort(idx.begin(), idx.end());
    std::vector<QueueSet> out;
    for (std::size_t i : idx) {
        out.push_back(sets[i]);
    }
    return out;
}

AnnotationService::AnnotationService(std::filesystem::path dir, std::vector<std::string> annotators,
                                     const std::vector<QueueSet> &sets, const QueueConfig &cfg, int min_annotators,
                                     Clock clock)
    : dir_(std::move(dir)), annotators_(std::move(annotators)), min_annotators_(min_annotators),
      clock_(clock ? std::move(clock) : Clock(utc_now)) {
    if (annotators_.empty()) {
        throw ValidationError("annotation service needs at least one registered annotator");
    }
    if (min_annotators_ < 2) {
        throw ValidationError("min_annotators must be >= 2");
    }
    std::filesystem::create_directories(dir_);
    const auto queue_path = dir_ / "queue.json";
    bool rubric = cfg.rubric_tasks;
    if (std::filesystem::exists(queue_path)) {
        const json q = json::parse(read_file(queue_path));
        rubric = q.at("rubric_tasks").get<bool>();
        for (const json &s : q.at("sets")) {
            sets_.push_back({s.at("meme_id").get<std::string>(), s.at("candidate_ids").get<std::vector<std::string>>(),
                             s.at("captions").get<std::vector<std::string>>()});
        }
    } else {
        for (const QueueSet &s : sets) {
            check_set(s);
        }
        sets_ = sample_sets(sets, cfg);
        json q;
        q["rubric_tasks"] = rubric;
        q["fraction"] = cfg.fraction;
        q["seed"] = cfg.seed;
        q["sets"] = json::array();
        for (const QueueSet &s : sets_) {
            q["sets"].push_back({{"meme_id", s.meme_id}, {"candidate_ids", s.candidate_ids}, {"captions", s.captions}});
        }
        write_file(queue_path, q.dump() + "\n");
    }
    tasks_ = build_tasks(sets_, rubric);
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
        task_index_[tasks_[i].id] = i;
    }
    replay();
}

void AnnotationService::replay() {
    for (const char *name : {"served.jsonl", "responses.jsonl"}) {
        std::ifstream in(dir_ / name);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) {
                continue;
            }
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception &) {
                continue; // torn final line from a crash before acknowledgment
            }
            if (std::string(name) == "served.jsonl") {
                served_.insert({j.at("task_id").get<std::string>(), j.at("annotator").get<std::string>()});
            } else {
                AnnotationResponse r = parse_response(line);
                responses_[{r.task_id, r.annotator}] = r;
            }
        }
    }
}

bool AnnotationService::has_annotator(const std::string &a) const {
    return std::find(annotators_.begin(), annotators_.end(), a) != annotators_.end();
}

void AnnotationService::check_annotator(const std::string &a) const {
    if (!has_annotator(a)) {
        throw NotFoundError("unknown annotator '" + a + "'");
    }
}

const AnnotationTask &AnnotationService::task(const std::string &id) const {
    auto it = task_index_.find(id);
    if (it == task_index_.end()) {
        throw NotFoundError("unknown task '" + id + "'");
    }
    return tasks_[it->second];
}

std::optional<AnnotationTask> AnnotationService::next_task(const std::string &annotator) {
    std::lock_guard<std::mutex> lock(mu_);
    check_annotator(annotator);
    for (const AnnotationTask &t : tasks_) {
        const auto key = std::make_pair(t.id, annotator);
        if (served_.count(key) || responses_.count(key)) {
            continue;
        }
        append_durable(dir_ / "served.jsonl", json({{"task_id", t.id}, {"annotator", annotator}}).dump() + "\n");
        served_.insert(key);
        return t;
    }
    return std::nullopt;
}

void AnnotationService::submit(AnnotationResponse r) {
    std::lock_guard<std::mutex> lock(mu_);
    check_annotator(r.annotator);
    const AnnotationTask &t = task(r.task_id);
    if (t.kind == TaskKind::pair) {
        if (!r.winner || r.rubric) {
            throw ValidationError("pair task '" + t.id + "' needs exactly a winner");
        }
    } else {
        if (!r.rubric || r.winner) {
            throw ValidationError("rubric task '" + t.id + "' needs exactly four rubric scores");
        }
        for (int v : *r.rubric) {
            if (v < 1 || v > 5) {
                throw ValidationError("rubric score " + std::to_string(v) + " outside 1..5");
            }
        }
    }
    const auto key = std::make_pair(r.task_id, r.annotator);
    if (responses_.count(key)) {
        throw ConflictError("annotator '" + r.annotator + "' already answered task '" + r.task_id + "'");
    }
    if (r.timestamp.empty()) {
        r.timestamp = clock_();
    }
    append_durable(dir_ / "responses.jsonl", response_line(r) + "\n");
    responses_[key] = std::move(r);
}

std::optional<AnnotationResponse> AnnotationService::response(const std::string &task_id,
                                                              const std::string &annotator) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = responses_.find({task_id, annotator});
    if (it == responses_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::size_t AnnotationService::complete_annotators(const QueueSet &set, std::vector<std::string> *who) const {
    std::size_t n = 0;
    for (const std::string &a : annotators_) {
        bool all = true, any = false;
        for (const AnnotationTask &t : tasks_) {
            if (t.meme_id != set.meme_id || t.kind != TaskKind::pair) {
                continue;
            }
            any = true;
            if (!responses_.count({t.id, a})) {
                all = false;
                break;
            }
        }
        if (all && any) {
            ++n;
            if (who) {
                who->push_back(a);
            }
        }
    }
    return n;
}

std::vector<PreferenceRecord> AnnotationService::export_preferences() const {
    std::lock_guard<std::mutex> lock(mu_); // snapshot under the lock
    std::vector<PreferenceRecord> out;
    for (const QueueSet &set : sets_) {
        std::vector<std::string> who;
        if (complete_annotators(set, &who) < static_cast<std::size_t>(min_annotators_)) {
            continue;
        }
        // Per-annotator pair wins are that annotator's Borda points.
        std::vector<std::vector<std::optional<double>>> wins(who.size(),
                                                              std::vector<std::optional<double>>(set.candidate_ids.size(), 0.0));
        std::string latest;
        for (std::size_t a = 0; a < who.size(); ++a) {
            for (const AnnotationTask &t : tasks_) {
                if (t.meme_id != set.meme_id || t.kind != TaskKind::pair) {
                    continue;
                }
                const AnnotationResponse &r = responses_.at({t.id, who[a]});
                latest = std::max(latest, r.timestamp);
                const std::string &winner = t.candidate_ids[static_cast<std::size_t>(*r.winner)];
                const auto pos = static_cast<std::size_t>(
                    std::find(set.candidate_ids.begin(), set.candidate_ids.end(), winner) - set.candidate_ids.begin());
                *wins[a][pos] += 1.0;
            }
        }
        const double alpha = krippendorff_alpha(wins, AlphaLevel::ordinal);
        if (!(alpha > kAgreementGate)) {
            continue;
        }
        std::vector<std::pair<std::string, double>> scored;
        for (std::size_t c = 0; c < set.candidate_ids.size(); ++c) {
            double total = 0.0;
            for (const auto &row : wins) {
                total += *row[c];
            }
            scored.emplace_back(set.candidate_ids[c], total);
        }
        PreferenceRecord rec;
        rec.meme_id = set.meme_id;
        rec.ordering = order_by_score(std::move(scored));
        rec.source = PreferenceSource::human;
        rec.agreement = alpha;
        rec.annotator_ids = who;
        rec.timestamp = latest;
        if (!(*rec.agreement > kAgreementGate)) {
            throw Error("export invariant violated: agreement at or below the gate");
        }
        out.push_back(std::move(rec));
    }
    return out;
}

Progress AnnotationService::progress() const {
    std::lock_guard<std::mutex> lock(mu_);
    Progress p;
    p.completed = responses_.size();
    const std::size_t total = tasks_.size() * annotators_.size();
    p.remaining = total - std::min(total, p.completed);
    for (const QueueSet &set : sets_) {
        const std::size_t n = complete_annotators(set, nullptr);
        if (n > 0 && n < static_cast<std::size_t>(min_annotators_)) {
            ++p.pending_sets;
        }
    }
    return p;
}

} // namespace memecap
