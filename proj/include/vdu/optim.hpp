#pragma once

#include <cmath>
#include <optional>

#include <Eigen/Dense>

#include "vdu/diffgraph.hpp"

namespace vdu {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(Eigen::Index d, AdamConfig cfg) : cfg_(cfg), m_(Eigen::VectorXd::Zero(d)), v_(Eigen::VectorXd::Zero(d)) {}

  void step(ParamVector& params, const GradVector& grad) {
    ++steps_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad.values;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.values.cwiseAbs2();
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    params.values.array() -= cfg_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
  }

  long steps() const { return steps_; }
  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  AdamConfig cfg_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  long steps_ = 0;
};

/// Rescales grad in place so its L2 norm is at most max_norm. Returns the norm before clipping.
inline double clip_grad_norm(GradVector& grad, std::optional<double> max_norm) {
  const double norm = grad.values.norm();
  if (max_norm && norm > *max_norm) grad.values *= *max_norm / norm;
  return norm;
}

}  // namespace vdu
