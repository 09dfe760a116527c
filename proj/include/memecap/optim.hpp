#pragma once

#include "memecap/autograd.hpp"

#include <vector>

namespace memecap {

struct OptimConfig {
    double learning_rate = 0.05;
    double momentum = 0.9;
    /// Global gradient-norm clip; <= 0 disables clipping.
    double clip_norm = 1.0;
};

/// Gradient descent with heavy-ball momentum: v <- mu v + g; p <- p - lr v.
class SgdMomentum {
  public:
    SgdMomentum(ad::ParamList params, OptimConfig cfg);

    /// Applies one update from the accumulated grads, then zeroes them.
    /// Pass ascend = true to climb the objective instead.
    void step(bool ascend = false);
    const OptimConfig &config() const { return cfg_; }
    const ad::ParamList &params() const { return params_; }

  private:
    ad::ParamList params_;
    OptimConfig cfg_;
    std::vector<Mat> velocity_;
};

double grad_norm(const ad::ParamList &params);

} // namespace memecap
