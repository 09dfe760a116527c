#pragma once

// Annotation queue: pairwise preference and rubric tasks over sampled
// candidate sets, durable response log, and export of agreed human rankings.

#include "memecap/reward.hpp"

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace memecap {

/// Rubric criteria with their five level descriptions.
struct RubricCriterion {
    std::string name;
    std::array<std::string, 5> levels; // "Score 1 - ..." through "Score 5 - ..."
};
const std::vector<RubricCriterion> &rubric_criteria();

enum class TaskKind { pair, rubric };

struct AnnotationTask {
    std::string id;
    TaskKind kind = TaskKind::pair;
    std::string meme_id;
    std::vector<std::string> candidate_ids; // two for pair tasks, one for rubric tasks
    std::vector<std::string> captions;
};

struct AnnotationResponse {
    std::string task_id;
    std::string annotator;
    std::optional<int> winner; // 0 = first, 1 = second
    std::optional<std::array<int, 4>> rubric;
    std::string timestamp;
};

std::string task_json(const AnnotationTask &t);
std::string response_line(const AnnotationResponse &r);
/// Accepts {"task_id", "annotator", "winner": "first"|"second"} or {"rubric": [4 ints]}.
AnnotationResponse parse_response(std::string_view body);

struct QueueConfig {
    double fraction = 0.01;
    std::uint64_t seed = 17;
    bool rubric_tasks = false;
};

/// Candidate set as the service sees it: captions only.
struct QueueSet {
    std::string meme_id;
    std::vector<std::string> candidate_ids;
    std::vector<std::string> captions;
};

/// ceil(fraction * sets) sets chosen with a seeded shuffle, kept in input order.
std::vector<QueueSet> sample_sets(const std::vector<QueueSet> &sets, const QueueConfig &cfg);

struct Progress {
    std::size_t completed = 0;
    std::size_t remaining = 0;
    std::size_t pending_sets = 0; // some but fewer than min_annotators complete responses
};

class AnnotationService {
  public:
    using Clock = std::function<std::string()>;

    /// Opens (or creates) the store in dir. The queue is written on first
    /// creation from sets; an existing queue and response log are replayed.
    AnnotationService(std::filesystem::path dir, std::vector<std::string> annotators,
                      const std::vector<QueueSet> &sets, const QueueConfig &cfg, int min_annotators = 3,
                      Clock clock = {});

    /// Oldest task neither served to nor answered by the annotator; marks it served.
    std::optional<AnnotationTask> next_task(const std::string &annotator);
    /// Durable append, then acknowledgment. Throws ConflictError / ValidationError / NotFoundError.
    void submit(AnnotationResponse r);
    std::optional<AnnotationResponse> response(const std::string &task_id, const std::string &annotator) const;

    std::vector<PreferenceRecord> export_preferences() const;
    Progress progress() const;

    const std::vector<AnnotationTask> &tasks() const { return tasks_; }
    bool has_annotator(const std::string &a) const;

  private:
    void replay();
    void check_annotator(const std::string &a) const;
    const AnnotationTask &task(const std::string &id) const;
    std::size_t complete_annotators(const QueueSet &set, std::vector<std::string> *who) const;

    std::filesystem::path dir_;
    std::vector<std::string> annotators_;
    int min_annotators_;
    Clock clock_;
    std::vector<QueueSet> sets_;
    std::vector<AnnotationTask> tasks_;
    std::map<std::string, std::size_t> task_index_;
    std::map<std::pair<std::string, std::string>, AnnotationResponse> responses_; // (task, annotator)
    std::set<std::pair<std::string, std::string>> served_;
    mutable std::mutex mu_;
};

} // namespace memecap
