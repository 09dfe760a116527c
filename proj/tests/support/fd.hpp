#pragma once

// Central finite differences against the tape's analytic gradients.

#include "memecap/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

namespace fd {

struct Result {
    double rel_error = 0.0; // ||analytic - numeric|| / max(||analytic||, ||numeric||)
    double max_abs = 0.0;
    double analytic_norm = 0.0;
    std::size_t checked = 0;
};

/// `loss` must evaluate the objective from the current parameter values
/// (it may also accumulate grads; those are ignored); `analytic` must accumulate the gradient into the
/// (already zeroed) grads. At most `max_coords` coordinates are probed.
inline Result check(const memecap::ad::ParamList &params, const std::function<double()> &loss,
                    const std::function<void()> &analytic, std::size_t max_coords = 200, std::uint64_t seed = 1,
                    double eps = 1e-5) {
    memecap::ad::zero_grads(params);
    analytic();
    std::vector<memecap::Mat> grads;
    for (const memecap::ad::Parameter *p : params) {
        grads.push_back(p->grad);
    }
    struct Coord {
        std::size_t p;
        Eigen::Index i;
    };
    std::vector<Coord> coords;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (Eigen::Index i = 0; i < params[p]->value.size(); ++i) {
            coords.push_back({p, i});
        }
    }
    if (coords.size() > max_coords) {
        std::mt19937_64 rng(seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(max_coords);
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    Result r;
    for (const Coord &c : coords) {
        double &v = params[c.p]->value.data()[c.i];
        const double keep = v;
        v = keep + eps;
        const double up = loss();
        v = keep - eps;
        const double down = loss();
        v = keep;
        const double num = (up - down) / (2.0 * eps);
        const double ana = grads[c.p].data()[c.i];
        diff2 += (ana - num) * (ana - num);
        a2 += ana * ana;
        n2 += num * num;
        r.max_abs = std::max(r.max_abs, std::abs(ana - num));
    }
    r.checked = coords.size();
    r.analytic_norm = std::sqrt(a2);
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    r.rel_error = std::sqrt(diff2) / denom;
    return r;
}

} // namespace fd
