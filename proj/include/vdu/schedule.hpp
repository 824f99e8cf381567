#pragma once

// Discrete DDPM noise schedules and the per-timestep quantities derived from them.
//
// Timesteps are 1-based everywhere in the public interface: t in {1..T}.
// beta_t is the per-step variance increment, alpha_t = 1 - beta_t and
// alpha_bar_t = prod_{j<=t} alpha_j. posterior_var and loss_weight are only
// meaningful for t >= 2 and read as 0 at t = 1.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vdu/errors.hpp"

namespace vdu {

enum class ScheduleKind { linear, cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

/// Parameters sufficient to rebuild a schedule bit-identically.
struct ScheduleParams {
  ScheduleKind kind = ScheduleKind::linear;
  int T = 100;
  double beta_start = 1e-4;  // linear only
  double beta_end = 2e-2;    // linear only

  bool operator==(const ScheduleParams&) const = default;
};

class NoiseSchedule {
 public:
  /// Builds every derived vector from a complete beta sequence.
  NoiseSchedule(ScheduleParams params, std::vector<double> beta) : params_(params), beta_(std::move(beta)) {
    const int T = static_cast<int>(beta_.size());
    alpha_.resize(T);
    alpha_bar_.resize(T);
    posterior_var_.assign(T, 0.0);
    loss_weight_.assign(T, 0.0);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) throw ConfigError("beta must lie in (0,1)");
      alpha_[i] = 1.0 - beta_[i];
      prod *= alpha_[i];
      alpha_bar_[i] = prod;
    }
    for (int i = 1; i < T; ++i) {
      const double one_minus_prev = 1.0 - alpha_bar_[i - 1];
      posterior_var_[i] = beta_[i] * one_minus_prev / (1.0 - alpha_bar_[i]);
      loss_weight_[i] = beta_[i] / (alpha_[i] * one_minus_prev);
    }
  }

  int T() const { return static_cast<int>(beta_.size()); }
  const ScheduleParams& params() const { return params_; }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return alpha_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  /// alpha_bar_{t-1}, with alpha_bar_0 = 1.
  double alpha_bar_prev(int t) const { return t == 1 ? 1.0 : alpha_bar_[index(t - 1)]; }
  double posterior_var(int t) const { return posterior_var_[index(t)]; }
  double loss_weight(int t) const { return loss_weight_[index(t)]; }

  const std::vector<double>& betas() const { return beta_; }

 private:
  std::size_t index(int t) const {
    if (t < 1 || t > T()) throw ConfigError("timestep " + std::to_string(t) + " outside 1.." + std::to_string(T()));
    return static_cast<std::size_t>(t - 1);
  }

  ScheduleParams params_;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
  std::vector<double> posterior_var_;
  std::vector<double> loss_weight_;
};

inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw ConfigError("schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
    throw ConfigError("linear schedule needs 0 < beta_start <= beta_end < 1");
  std::vector<double> beta(T);
  for (int i = 0; i < T; ++i)
    beta[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
  return NoiseSchedule({ScheduleKind::linear, T, beta_start, beta_end}, std::move(beta));
}

/// Cosine alpha_bar profile with offset s = 0.008; betas clipped to at most 0.999.
inline NoiseSchedule make_cosine_schedule(int T) {
  if (T < 2) throw ConfigError("schedule needs T >= 2");
  constexpr double s = 0.008;
  auto f = [&](double t) {
    const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> beta(T);
  for (int t = 1; t <= T; ++t) beta[t - 1] = std::min(1.0 - f(t) / f(t - 1), 0.999);
  return NoiseSchedule({ScheduleKind::cosine, T, 0.0, 0.0}, std::move(beta));
}

inline NoiseSchedule make_schedule(const ScheduleParams& p) {
  return p.kind == ScheduleKind::linear ? make_linear_schedule(p.T, p.beta_start, p.beta_end)
                                        : make_cosine_schedule(p.T);
}

}  // namespace vdu
