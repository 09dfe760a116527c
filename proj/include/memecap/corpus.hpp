#pragma once

// Meme corpus: records, manifest I/O, sub-image segmentation, statistics and
// category balancing.

#include "memecap/image.hpp"
#include "memecap/tokenize.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace memecap {

enum class Structure { single, multi };
enum class Sentiment { self_praise, praise_others, self_mockery, mock_others };
enum class Split { train, test };

inline constexpr std::array<Sentiment, 4> kSentiments = {Sentiment::self_praise, Sentiment::praise_others,
                                                         Sentiment::self_mockery, Sentiment::mock_others};

std::string_view to_string(Structure s);
std::string_view to_string(Sentiment s);
std::string_view to_string(Split s);
/// Throw ValidationError for unknown labels.
Structure parse_structure(std::string_view s);
Sentiment parse_sentiment(std::string_view s);
Split parse_split(std::string_view s);

struct RoiBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int index = 0;

    long area() const { return static_cast<long>(x1 - x0) * (y1 - y0); }
    bool operator==(const RoiBox &) const = default;
};

bool overlaps(const RoiBox &a, const RoiBox &b);
double iou(const RoiBox &a, const RoiBox &b);

/// Structured description of one sub-image; fills the decoder's conditioning prefix.
struct ChainOfHumor {
    std::string concept_name;
    std::string emotion;
    std::string event;
    std::string consequence;
    std::string humor_device;

    bool operator==(const ChainOfHumor &) const = default;
};

struct MemeRecord {
    std::string id;
    std::string image_path; // as written in the manifest, relative to it
    Structure structure = Structure::single;
    Sentiment sentiment = Sentiment::self_praise;
    std::string caption;
    std::vector<std::string> caption_tokens;
    std::vector<RoiBox> rois;
    Split split = Split::train;
    /// Optional, one entry per ROI when present.
    std::vector<ChainOfHumor> humor;

    bool operator==(const MemeRecord &) const = default;
};

/// Checks every MemeRecord/RoiBox invariant against the image size.
void validate_record(const MemeRecord &r, int image_width, int image_height);

/// One manifest line (no trailing newline). Keys are emitted in sorted order.
std::string manifest_line(const MemeRecord &r);
MemeRecord parse_manifest_line(std::string_view line, const Tokenizer &tok = basic_tokenize);

/// Loads and validates a line-delimited manifest. Image paths resolve
/// relative to the manifest's directory.
std::vector<MemeRecord> load_manifest(const std::filesystem::path &path, const Tokenizer &tok = basic_tokenize);
void save_manifest(const std::filesystem::path &path, const std::vector<MemeRecord> &records);
std::string manifest_text(const std::vector<MemeRecord> &records);

std::filesystem::path resolve_image(const std::filesystem::path &manifest_path, const MemeRecord &r);

// ---- segmentation ----

enum class SegmentMode { automatic, manual };

struct SegmentConfig {
    /// A band qualifies when its pixel std-dev is below this fraction of the image's dynamic range.
    double relative_threshold = 0.02;
    int min_thickness = 3;
};

std::vector<RoiBox> segment_subimages(const Image &image, SegmentMode mode,
                                      const std::optional<std::vector<RoiBox>> &manual_rois = std::nullopt,
                                      const SegmentConfig &cfg = {});

// ---- statistics ----

struct TokenStats {
    double avg = 0.0;
    int max = 0;
    int min = 0;
    std::size_t count = 0;
};

struct CorpusStats {
    std::size_t count_total = 0;
    double fraction_single = 0.0;
    double fraction_multi = 0.0;
    std::array<double, 4> fraction_per_sentiment{};
    TokenStats tokens;
    /// Absent for categories with no records.
    std::array<std::optional<TokenStats>, 4> tokens_per_sentiment;
};

CorpusStats compute_stats(const std::vector<MemeRecord> &records);

// ---- balancing ----

struct BalanceTargets {
    std::array<double, 2> structure{0.5, 0.5}; // single, multi
    std::array<double, 4> sentiment{0.25, 0.25, 0.25, 0.25};
};

/// Largest subset whose structure and sentiment marginals hit the targets.
/// Sizes where every quota is a whole number are tried first; only if none is
/// feasible do largest-remainder rounded quotas apply. Which records fill a
/// cell is drawn with `seed`. Output keeps input order.
std::vector<MemeRecord> balance_downsample(const std::vector<MemeRecord> &records, const BalanceTargets &targets,
                                          std::uint64_t seed);

} // namespace memecap
