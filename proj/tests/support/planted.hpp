#pragma once

// Ranking data with a planted preference: better captions contain more
// copies of a marker token. Used by the reward tests and the acceptance run.

#include "toy_sft.hpp"

#include "memecap/reward.hpp"

#include <algorithm>
#include <random>
#include <string>
#include <vector>

namespace planted {

inline const std::string kMarker = "cat";

/// One example per conditioning; candidate i carries i markers, worst to best.
inline std::vector<memecap::RankingExample> ranking_data(const memecap::CaptionDecoder &dec,
                                                         const std::vector<memecap::SftExample> &conds, int per_cond,
                                                         std::uint64_t seed) {
    using namespace memecap;
    std::mt19937_64 rng(seed);
    const int marker = dec.vocab().id(kMarker);
    std::vector<int> filler;
    for (int v = Vocabulary::num_special; v < dec.vocab().size(); ++v) {
        if (v != marker) {
            filler.push_back(v);
        }
    }
    std::uniform_int_distribution<std::size_t> pick(0, filler.size() - 1);
    std::vector<RankingExample> out;
    for (const SftExample &c : conds) {
        for (int r = 0; r < per_cond; ++r) {
            RankingExample ex;
            ex.meme_id = c.id + "/" + std::to_string(r);
            ex.cond = c.cond;
            for (int markers = 0; markers < 4; ++markers) {
                std::vector<int> cap(6);
                for (int &t : cap) {
                    t = filler[pick(rng)];
                }
                std::vector<std::size_t> slots = {0, 1, 2, 3, 4, 5};
                std::shuffle(slots.begin(), slots.end(), rng);
                for (int m = 0; m < markers; ++m) {
                    cap[slots[static_cast<std::size_t>(m)]] = marker;
                }
                ex.ordered.push_back(cap);
            }
            out.push_back(std::move(ex));
        }
    }
    return out;
}

} // namespace planted
