#pragma once

#include "memecap/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace memecap {

struct AugmentOp {
    enum class Kind { crop, rotate, identity };

    Kind kind = Kind::identity;
    /// Fractions of width/height: x0, y0, x1, y1 (crop only).
    std::array<double, 4> crop{0.0, 0.0, 1.0, 1.0};
    /// Clockwise degrees, one of 0/90/180/270 (rotate only).
    int angle = 0;

    static AugmentOp identity() { return {}; }
    static AugmentOp make_crop(double x0, double y0, double x1, double y1);
    static AugmentOp make_rotate(int degrees);

    std::string describe() const;
};

/// Lossless clockwise rotation by a right angle.
Image rotate_right_angle(const Image &img, int degrees);

/// One output per op, in op order. The input is never modified.
std::vector<Image> augment_image(const Image &subimage, const std::vector<AugmentOp> &ops);

/// Seeded op list: a mix of mild crops and right-angle rotations.
std::vector<AugmentOp> plan_augmentations(int count, std::uint64_t seed);

class Paraphraser {
  public:
    virtual ~Paraphraser() = default;
    virtual std::string name() const = 0;
    virtual std::string paraphrase(std::string_view text) const = 0;
};

class IdentityParaphraser final : public Paraphraser {
  public:
    std::string name() const override { return "identity"; }
    std::string paraphrase(std::string_view text) const override { return std::string(text); }
};

/// Word-for-word substitution from a `source<TAB>target` table. Leading and
/// trailing ASCII punctuation around a word is preserved.
class SynonymTableParaphraser final : public Paraphraser {
  public:
    explicit SynonymTableParaphraser(std::map<std::string, std::string> table) : table_(std::move(table)) {}
    static SynonymTableParaphraser from_file(const std::filesystem::path &path);
    static SynonymTableParaphraser from_text(std::string_view tsv);

    std::string name() const override { return "synonym-table"; }
    std::string paraphrase(std::string_view text) const override;
    const std::map<std::string, std::string> &table() const { return table_; }

  private:
    std::map<std::string, std::string> table_;
};

std::string augment_text(std::string_view caption, const Paraphraser &paraphraser);

} // namespace memecap
