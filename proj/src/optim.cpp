#include "memecap/optim.hpp"

#include <cmath>

namespace memecap {

double grad_norm(const ad::ParamList &params) {
    double s = 0.0;
    for (const ad::Parameter *p : params) {
        s += p->grad.squaredNorm();
    }
    return std::sqrt(s);
}

SgdMomentum::SgdMomentum(ad::ParamList params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    velocity_.reserve(params_.size());
    for (const ad::Parameter *p : params_) {
        velocity_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
}

void SgdMomentum::step(bool ascend) {
    double factor = 1.0;
    if (cfg_.clip_norm > 0.0) {
        const double n = grad_norm(params_);
        if (n > cfg_.clip_norm) {
            factor = cfg_.clip_norm / n;
        }
    }
    const double sign = ascend ? -1.0 : 1.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ad::Parameter *p = params_[i];
        velocity_[i] = cfg_.momentum * velocity_[i] + factor * p->grad;
        p->value -= sign * cfg_.learning_rate * velocity_[i];
        p->zero_grad();
    }
}

} // namespace memecap
