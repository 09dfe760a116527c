#pragma once

// Procedural stand-in corpus: noisy colour panels separated by white bands,
// template captions and per-panel chain-of-humor slots.

#include "memecap/corpus.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

namespace memecap {

struct SynthImage {
    Image image;
    std::vector<RoiBox> rois; // planted geometry, sorted by (y0, x0)
};

inline constexpr int kSeparatorThickness = 5;

/// Single-panel images are one noisy panel; multi-panel images use a 1x2,
/// 2x1, 1x3 or 2x2 layout with white separators.
SynthImage draw_meme_image(Structure s, std::mt19937_64 &rng);

/// Writes images/<id>.ppm and manifest.jsonl under dir. Structures alternate,
/// sentiments cycle every two records and every fifth record is a test record.
std::vector<MemeRecord> generate_synthetic_corpus(const std::filesystem::path &dir, int size, std::uint64_t seed);

} // namespace memecap
