#pragma once

#include "memecap/align.hpp"
#include "memecap/encode.hpp"

#include <random>
#include <string>
#include <vector>

namespace gen {

inline memecap::Mat randn(Eigen::Index r, Eigen::Index c, std::mt19937_64 &rng, double s = 1.0) {
    std::normal_distribution<double> n(0.0, s);
    memecap::Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = n(rng);
    }
    return m;
}

inline int uniform(std::mt19937_64 &rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline memecap::TokenFeatures tokens(int n, int d, std::mt19937_64 &rng) {
    memecap::TokenFeatures t;
    t.features = randn(n, d, rng);
    for (int i = 0; i < n; ++i) {
        t.tokens.push_back("t" + std::to_string(i));
    }
    return t;
}

/// One meme with `subs` sub-images of `areas` rows each and an n-token caption.
inline memecap::MemeFeatures meme(const std::string &id, int subs, int areas, int n, int d, std::mt19937_64 &rng) {
    memecap::MemeFeatures m;
    m.id = id;
    for (int s = 0; s < subs; ++s) {
        m.subimages.push_back({randn(areas, d, rng), s});
    }
    m.caption = tokens(n, d, rng);
    return m;
}

} // namespace gen
