#pragma once

// Variational diffusion unlearning.
//
// The loss mixes two terms with gamma in [0, 1]:
//
//   L(theta) = (1 - gamma) * A(theta) + gamma * B(theta)
//   A = -sum_{t=2..T} w_t E_{x0 ~ D_f, eps}[ |eps - eps_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t)|^2 ]
//   B = sum_i (theta_i - mu*_i)^2 / (2 sigma*_i^2)
//
// with w_t = (1 - a_t) / (a_t (1 - ab_{t-1})). A (plasticity inducer) raises the
// denoising error on the forget set; B (stability regularizer) keeps theta near
// the pre-training posterior. A is unbounded below, so runs are short and the
// gradient norm may be clipped.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vdu/checkpoints.hpp"
#include "vdu/denoiser.hpp"
#include "vdu/diffgraph.hpp"
#include "vdu/diffusion.hpp"
#include "vdu/optim.hpp"
#include "vdu/rng.hpp"
#include "vdu/schedule.hpp"
#include "vdu/training.hpp"

namespace vdu {

/// Largest T for which the full sum over t is evaluated per batch.
inline constexpr int kFullSumMaxT = 512;
inline constexpr int kDefaultTSubsample = 32;

struct VduConfig {
  double gamma = 0.5;
  double eta = 1e-4;
  int epochs = 5;
  int batch_size = 128;
  std::optional<int> t_subsample;  // nullopt: every t in 2..T
  std::optional<double> grad_clip = 10.0;
  bool nan_guard = true;
  std::uint64_t seed = 0;

  void validate(int T) const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (!(eta > 0.0)) throw ConfigError("eta must be positive");
    if (epochs < 1 || epochs > 1000) throw ConfigError("epochs must be in 1..1000");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    if (t_subsample) {
      if (*t_subsample < 1) throw ConfigError("t_subsample must be >= 1");
    } else if (T > kFullSumMaxT) {
      throw ConfigError("summing over all timesteps is limited to T <= " + std::to_string(kFullSumMaxT));
    }
  }
};

/// The default sampling policy for a given T: the full sum up to kFullSumMaxT, otherwise 32 timesteps.
inline std::optional<int> default_t_subsample(int T) {
  return T <= kFullSumMaxT ? std::nullopt : std::optional<int>(kDefaultTSubsample);
}

/// Uniform subset of {2..T} without replacement, or all of it. Sorted ascending.
inline std::vector<int> draw_t_set(Rng& rng, int T, std::optional<int> subsample) {
  std::vector<int> all(static_cast<std::size_t>(T - 1));
  std::iota(all.begin(), all.end(), 2);
  if (!subsample || *subsample >= T - 1) return all;
  const auto k = static_cast<std::size_t>(*subsample);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<int>(i), T - 2));
    std::swap(all[i], all[j]);
  }
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

/// Inputs of one term-A estimate: the timesteps and one eps row per (t, sample) pair,
/// t-major (all samples for t_set[0] first).
struct PlasticityDraws {
  std::vector<int> t_set;
  Eigen::MatrixXd eps;
};

inline PlasticityDraws draw_plasticity(Rng& rng, const std::vector<int>& t_set, Eigen::Index batch, Eigen::Index dim) {
  PlasticityDraws d{t_set, normal_matrix(rng, static_cast<Eigen::Index>(t_set.size()) * batch, dim)};
  return d;
}

inline void check_t_set(const NoiseSchedule& s, const std::vector<int>& t_set) {
  if (t_set.empty()) throw ConfigError("t_set is empty");
  for (int t : t_set)
    if (t < 2 || t > s.T()) throw ConfigError("t_set entries must lie in 2..T");
}

/// Term A recorded into g: -sum_{t in t_set} kappa w_t mean_batch |eps - eps_theta|^2, kappa = (T-1)/|t_set|.
inline diffgraph::Var plasticity_inducer(diffgraph::Graph& g, const NoisePredictor& predictor, const NoiseSchedule& s,
                                         const Eigen::MatrixXd& x0, const PlasticityDraws& draws) {
  if (x0.rows() == 0) throw ConfigError("forget batch is empty");
  check_t_set(s, draws.t_set);
  const Eigen::Index n = x0.rows();
  const auto m = static_cast<Eigen::Index>(draws.t_set.size());
  if (draws.eps.rows() != n * m || draws.eps.cols() != x0.cols()) throw ConfigError("plasticity draws have the wrong shape");
  const double kappa = static_cast<double>(s.T() - 1) / static_cast<double>(m);
  NoiseDraws flat;
  flat.eps = draws.eps;
  flat.ts.reserve(static_cast<std::size_t>(n * m));
  Eigen::MatrixXd x0_rep(n * m, x0.cols());
  Eigen::VectorXd w(n * m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const int t = draws.t_set[static_cast<std::size_t>(j)];
    x0_rep.middleRows(j * n, n) = x0;
    w.segment(j * n, n).setConstant(-kappa * s.loss_weight(t) / static_cast<double>(n));
    flat.ts.insert(flat.ts.end(), static_cast<std::size_t>(n), t);
  }
  return noise_matching_loss(g, predictor, s, x0_rep, flat, w);
}

/// Term A value for explicit timesteps; eps drawn from rng.
inline double plasticity_inducer(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& params,
                                 const Eigen::MatrixXd& x0, const std::vector<int>& t_set, Rng& rng) {
  check_params(arch, params);
  if (x0.rows() == 0) throw ConfigError("forget batch is empty");
  check_t_set(s, t_set);
  auto draws = draw_plasticity(rng, t_set, x0.rows(), x0.cols());
  auto predictor = mlp_predictor(arch);
  return diffgraph::evaluate(params, [&](diffgraph::Graph& g) { return plasticity_inducer(g, predictor, s, x0, draws); });
}

inline void check_stats(const ParamPosteriorStats& stats, Eigen::Index d) {
  if (stats.mu_star.size() != d || stats.sigma_star.size() != d)
    throw ConfigError("posterior statistics length does not match the parameter count");
}

/// Term B recorded into g.
inline diffgraph::Var stability_regularizer(diffgraph::Graph& g, const ParamPosteriorStats& stats) {
  auto theta = g.parameters();
  check_stats(stats, g.value(theta).cols());
  Eigen::VectorXd col_w = (2.0 * stats.sigma_star.cwiseAbs2()).cwiseInverse();
  return g.squared_error(theta, g.constant(stats.mu_star.transpose()), std::nullopt, std::move(col_w));
}

inline double stability_regularizer(const ParamVector& params, const ParamPosteriorStats& stats) {
  check_stats(stats, params.size());
  return diffgraph::evaluate(params, [&](diffgraph::Graph& g) { return stability_regularizer(g, stats); });
}

struct VduLoss {
  double a = 0.0;      // term A, unscaled (0 when gamma == 1 and A is skipped)
  double b = 0.0;      // term B, unscaled
  double total = 0.0;  // (1 - gamma) a + gamma b
  GradVector grad;
};

/// Loss and gradient for explicit draws. A is not evaluated when gamma == 1.
inline VduLoss vdu_loss_and_grad(const NoiseSchedule& s, const NoisePredictor& predictor, const ParamVector& params,
                                 const Eigen::MatrixXd& x0, const ParamPosteriorStats& stats, double gamma,
                                 const PlasticityDraws& draws) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  VduLoss out;
  diffgraph::Graph g(params.values);
  auto b = stability_regularizer(g, stats);
  out.b = g.scalar(b);
  diffgraph::Var total;
  if (gamma == 1.0) {
    total = b;
  } else {
    auto a = plasticity_inducer(g, predictor, s, x0, draws);
    out.a = g.scalar(a);
    total = g.add(g.scale(a, 1.0 - gamma), g.scale(b, gamma));
  }
  out.total = g.scalar(total);
  out.grad.values = g.backward(total);
  return out;
}

/// VDU loss value for one batch with draws from rng (t_set per config.t_subsample, then eps).
inline double vdu_loss(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& params,
                       const Eigen::MatrixXd& x0, const ParamPosteriorStats& stats, const VduConfig& config, Rng& rng) {
  config.validate(s.T());
  check_params(arch, params);
  auto t_set = draw_t_set(rng, s.T(), config.t_subsample);
  auto draws = draw_plasticity(rng, t_set, x0.rows(), x0.cols());
  return vdu_loss_and_grad(s, mlp_predictor(arch), params, x0, stats, config.gamma, draws).total;
}

struct UnlearnRunRecord {
  std::vector<double> loss_a;  // per-epoch means over minibatches
  std::vector<double> loss_b;
  std::vector<double> loss_total;
  std::vector<double> param_distance;  // |theta - mu*| at the end of each epoch
  double wall_seconds = 0.0;
  ParamVector theta_u;
};

/// Starts at theta_star and runs config.epochs passes over shuffled minibatches of the forget set,
/// one Adam step per minibatch on the VDU loss, with optional gradient-norm clipping.
inline UnlearnRunRecord unlearn(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& theta_star,
                                const Eigen::MatrixXd& forget, const ParamPosteriorStats& stats, const VduConfig& config) {
  config.validate(s.T());
  check_params(arch, theta_star);
  check_stats(stats, theta_star.size());
  if (forget.rows() == 0) throw ConfigError("forget set is empty");
  if (forget.cols() != arch.input_dim) throw ConfigError("forget set width does not match the architecture");
  const auto start = std::chrono::steady_clock::now();

  UnlearnRunRecord rec;
  rec.theta_u = theta_star;
  Rng rng(config.seed);
  Adam opt(theta_star.size(), AdamConfig{config.eta});
  const auto predictor = mlp_predictor(arch);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(forget.rows()));
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    double sa = 0.0, sb = 0.0, st = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      Eigen::MatrixXd batch = gather_rows(forget, order, b, std::min(order.size(), b + bs));
      auto t_set = draw_t_set(rng, s.T(), config.t_subsample);
      auto draws = draw_plasticity(rng, t_set, batch.rows(), batch.cols());
      auto loss = vdu_loss_and_grad(s, predictor, rec.theta_u, batch, stats, config.gamma, draws);
      if (config.nan_guard && (!std::isfinite(loss.total) || !loss.grad.values.allFinite()))
        throw NumericalError("non-finite VDU loss or gradient at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches) + " (A=" + std::to_string(loss.a) + ", B=" + std::to_string(loss.b) +
                             "); lower eta, enable grad_clip or use fewer epochs");
      clip_grad_norm(loss.grad, config.grad_clip);
      opt.step(rec.theta_u, loss.grad);
      sa += loss.a;
      sb += loss.b;
      st += loss.total;
      ++batches;
    }
    rec.loss_a.push_back(sa / batches);
    rec.loss_b.push_back(sb / batches);
    rec.loss_total.push_back(st / batches);
    rec.param_distance.push_back((rec.theta_u.values - stats.mu_star).norm());
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

/// Reference baseline: plain DDPM training on the retain set starting from theta_star.
inline ParamVector finetune_with_retain(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& theta_star,
                                        const Eigen::MatrixXd& retain, int epochs, double eta, int batch_size = 128,
                                        std::uint64_t seed = 0) {
  if (retain.rows() == 0) throw ConfigError("retain set is empty");
  if (epochs == 0) return theta_star;
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch_size;
  cfg.lr = eta;
  cfg.seed = seed;
  DdpmTrainer trainer(s, arch, theta_star, retain, cfg);
  trainer.run();
  return trainer.params();
}

}  // namespace vdu
