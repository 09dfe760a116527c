#pragma once

// Krippendorff's alpha two ways: from its pairwise definition, and from an
// explicit coincidence matrix over the observed values.

#include "memecap/reward.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <vector>

namespace oracle {

using Ratings = std::vector<std::vector<std::optional<double>>>;

// Pairwise form: alpha = 1 - (n - 1) * sum_u sum_{i != j in u} d2 / (m_u - 1) / sum_{i != j over all} d2.
inline double alpha_by_pairs(const Ratings &r, memecap::AlphaLevel level) {
    std::vector<std::vector<double>> units;
    for (std::size_t u = 0; u < r[0].size(); ++u) {
        std::vector<double> vs;
        for (const auto &row : r) {
            if (row[u]) {
                vs.push_back(*row[u]);
            }
        }
        if (vs.size() >= 2) {
            units.push_back(vs);
        }
    }
    std::vector<double> all;
    for (const auto &u : units) {
        all.insert(all.end(), u.begin(), u.end());
    }
    std::map<double, double> count;
    for (double v : all) {
        count[v] += 1.0;
    }
    auto d2 = [&](double a, double b) {
        if (a == b) {
            return 0.0;
        }
        switch (level) {
        case memecap::AlphaLevel::nominal:
            return 1.0;
        case memecap::AlphaLevel::interval:
            return (a - b) * (a - b);
        case memecap::AlphaLevel::ordinal: {
            const double lo = std::min(a, b), hi = std::max(a, b);
            double s = 0.0;
            for (const auto &[v, c] : count) {
                if (v >= lo && v <= hi) {
                    s += c;
                }
            }
            s -= 0.5 * (count[lo] + count[hi]);
            return s * s;
        }
        }
        return 0.0;
    };
    double within = 0.0;
    for (const auto &u : units) {
        double s = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            for (std::size_t j = 0; j < u.size(); ++j) {
                if (i != j) {
                    s += d2(u[i], u[j]);
                }
            }
        }
        within += s / static_cast<double>(u.size() - 1);
    }
    double between = 0.0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        for (std::size_t j = 0; j < all.size(); ++j) {
            if (i != j) {
                between += d2(all[i], all[j]);
            }
        }
    }
    const double n = static_cast<double>(all.size());
    return 1.0 - (n - 1.0) * within / between;
}

/// Coincidence matrix o[c][k] = sum_u (pairs (c, k) in u) / (m_u - 1);
/// alpha = 1 - (n - 1) * sum o_ck d_ck / sum n_c n_k d_ck.
inline double alpha_by_coincidence(const Ratings &r, memecap::AlphaLevel level) {
    std::vector<double> values;
    for (const auto &row : r) {
        for (const auto &v : row) {
            if (v && std::find(values.begin(), values.end(), *v) == values.end()) {
                values.push_back(*v);
            }
        }
    }
    std::sort(values.begin(), values.end());
    const std::size_t k = values.size();
    auto index = [&](double v) { return static_cast<std::size_t>(std::find(values.begin(), values.end(), v) - values.begin()); };
    std::vector<std::vector<double>> o(k, std::vector<double>(k, 0.0));
    for (std::size_t u = 0; u < r[0].size(); ++u) {
        std::vector<std::size_t> in;
        for (const auto &row : r) {
            if (row[u]) {
                in.push_back(index(*row[u]));
            }
        }
        if (in.size() < 2) {
            continue;
        }
        for (std::size_t i = 0; i < in.size(); ++i) {
            for (std::size_t j = 0; j < in.size(); ++j) {
                if (i != j) {
                    o[in[i]][in[j]] += 1.0 / static_cast<double>(in.size() - 1);
                }
            }
        }
    }
    std::vector<double> nc(k, 0.0);
    double n = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t j = 0; j < k; ++j) {
            nc[c] += o[c][j];
        }
        n += nc[c];
    }
    auto delta = [&](std::size_t c, std::size_t j) {
        switch (level) {
        case memecap::AlphaLevel::nominal:
            return c == j ? 0.0 : 1.0;
        case memecap::AlphaLevel::interval:
            return (values[c] - values[j]) * (values[c] - values[j]);
        case memecap::AlphaLevel::ordinal: {
            const std::size_t lo = std::min(c, j), hi = std::max(c, j);
            double s = 0.0;
            for (std::size_t g = lo; g <= hi; ++g) {
                s += nc[g];
            }
            s -= 0.5 * (nc[lo] + nc[hi]);
            return s * s;
        }
        }
        return 0.0;
    };
    double observed = 0.0, expected = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t j = 0; j < k; ++j) {
            observed += o[c][j] * delta(c, j);
            expected += nc[c] * nc[j] * delta(c, j);
        }
    }
    return 1.0 - (n - 1.0) * observed / expected;
}

} // namespace oracle
