#pragma once

// DDPM forward process, the Gaussian posterior q(x_{t-1} | x_t, x_0), the
// model reverse kernel p_theta(x_{t-1} | x_t), their KL, the simple
// noise-matching training loss and the ancestral sampler.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "vdu/denoiser.hpp"
#include "vdu/diffgraph.hpp"
#include "vdu/errors.hpp"
#include "vdu/rng.hpp"
#include "vdu/schedule.hpp"

namespace vdu {

struct PosteriorParams {
  Eigen::VectorXd mean;
  double var = 0.0;
};

/// Records a noise prediction for a batch of noisy points into a graph.
using NoisePredictor =
    std::function<diffgraph::Var(diffgraph::Graph&, diffgraph::Var x_t, const std::vector<int>& ts)>;

inline NoisePredictor mlp_predictor(const DenoiserArch& arch) {
  return [arch](diffgraph::Graph& g, diffgraph::Var x_t, const std::vector<int>& ts) {
    return predict_noise(g, arch, x_t, embed_times(ts, arch.embed_dim, arch.max_period));
  };
}

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
inline Eigen::VectorXd forward_noise(const NoiseSchedule& s, const Eigen::VectorXd& x0, int t, const Eigen::VectorXd& eps) {
  if (x0.size() != eps.size()) throw ConfigError("forward_noise: x0 and eps lengths differ");
  const double ab = s.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

/// Row-wise forward_noise with one timestep per row.
inline Eigen::MatrixXd forward_noise_batch(const NoiseSchedule& s, const Eigen::MatrixXd& x0, const std::vector<int>& ts,
                                           const Eigen::MatrixXd& eps) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw ConfigError("forward_noise: shape mismatch");
  if (static_cast<Eigen::Index>(ts.size()) != x0.rows()) throw ConfigError("forward_noise: one timestep per row");
  Eigen::MatrixXd xt(x0.rows(), x0.cols());
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    const double ab = s.alpha_bar(ts[r]);
    xt.row(r) = std::sqrt(ab) * x0.row(r) + std::sqrt(1.0 - ab) * eps.row(r);
  }
  return xt;
}

inline void require_posterior_t(const NoiseSchedule& s, int t) {
  if (t < 2 || t > s.T()) throw ConfigError("posterior needs 2 <= t <= T");
}

/// Mean from (x_t, x_0): (sqrt(a_t)(1 - ab_{t-1}) x_t + sqrt(ab_{t-1})(1 - a_t) x_0) / (1 - ab_t).
inline PosteriorParams true_posterior(const NoiseSchedule& s, const Eigen::VectorXd& x_t, const Eigen::VectorXd& x0, int t) {
  require_posterior_t(s, t);
  if (x_t.size() != x0.size()) throw ConfigError("true_posterior: length mismatch");
  const double a = s.alpha(t), ab = s.alpha_bar(t), ab_prev = s.alpha_bar_prev(t);
  Eigen::VectorXd mean = (std::sqrt(a) * (1.0 - ab_prev) * x_t + std::sqrt(ab_prev) * (1.0 - a) * x0) / (1.0 - ab);
  return {std::move(mean), s.posterior_var(t)};
}

/// Same posterior written through the noise: x_t / sqrt(a_t) - (1 - a_t) / (sqrt(1 - ab_t) sqrt(a_t)) eps.
inline PosteriorParams posterior_from_noise(const NoiseSchedule& s, const Eigen::VectorXd& x_t, const Eigen::VectorXd& eps,
                                            int t) {
  require_posterior_t(s, t);
  if (x_t.size() != eps.size()) throw ConfigError("posterior_from_noise: length mismatch");
  const double a = s.alpha(t), ab = s.alpha_bar(t);
  Eigen::VectorXd mean = x_t / std::sqrt(a) - (1.0 - a) / (std::sqrt(1.0 - ab) * std::sqrt(a)) * eps;
  return {std::move(mean), s.posterior_var(t)};
}

inline PosteriorParams model_posterior(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& params,
                                       const Eigen::VectorXd& x_t, int t) {
  require_posterior_t(s, t);
  return posterior_from_noise(s, x_t, predict_noise(arch, params, x_t, t, s.T()), t);
}

/// KL(q || p_theta) for isotropic Gaussians sharing variance sigma_q^2(t): |mu_q - mu_theta|^2 / (2 sigma_q^2(t)).
inline double kl_posteriors(const NoiseSchedule& s, const PosteriorParams& q, const PosteriorParams& p, int t) {
  require_posterior_t(s, t);
  if (q.mean.size() != p.mean.size()) throw ConfigError("kl_posteriors: mean lengths differ");
  const double v = s.posterior_var(t);
  const double tol = 1e-12 * v;
  if (std::abs(q.var - v) > tol || std::abs(p.var - v) > tol)
    throw ConfigError("kl_posteriors: both variances must equal sigma_q^2(t)");
  return (q.mean - p.mean).squaredNorm() / (2.0 * v);
}

/// Per-sample draws for the noise-matching loss.
struct NoiseDraws {
  std::vector<int> ts;
  Eigen::MatrixXd eps;
};

/// For each row: t ~ U{t_min..T}, then eps ~ N(0, I). Draw order is row-major, t before eps.
inline NoiseDraws draw_noise(Rng& rng, Eigen::Index rows, Eigen::Index dim, int T, int t_min = 1) {
  NoiseDraws d;
  d.ts.resize(static_cast<std::size_t>(rows));
  d.eps.resize(rows, dim);
  for (Eigen::Index r = 0; r < rows; ++r) {
    d.ts[static_cast<std::size_t>(r)] = uniform_int(rng, t_min, T);
    for (Eigen::Index c = 0; c < dim; ++c) d.eps(r, c) = standard_normal(rng);
  }
  return d;
}

/// sum_r row_w[r] |eps_r - eps_theta(x_t,r, t_r)|^2 recorded into g.
inline diffgraph::Var noise_matching_loss(diffgraph::Graph& g, const NoisePredictor& predictor, const NoiseSchedule& s,
                                          const Eigen::MatrixXd& x0, const NoiseDraws& draws,
                                          const Eigen::VectorXd& row_weights) {
  auto xt = g.constant(forward_noise_batch(s, x0, draws.ts, draws.eps));
  auto eps_hat = predictor(g, xt, draws.ts);
  return g.squared_error(g.constant(draws.eps), eps_hat, row_weights);
}

/// Mean over the batch of |eps - eps_theta(x_t, t)|^2 for explicit draws.
inline diffgraph::Var ddpm_loss(diffgraph::Graph& g, const NoisePredictor& predictor, const NoiseSchedule& s,
                                const Eigen::MatrixXd& x0, const NoiseDraws& draws) {
  if (x0.rows() == 0) throw ConfigError("ddpm loss needs a nonempty batch");
  Eigen::VectorXd w = Eigen::VectorXd::Constant(x0.rows(), 1.0 / static_cast<double>(x0.rows()));
  return noise_matching_loss(g, predictor, s, x0, draws, w);
}

/// Simple DDPM training loss with fresh draws from rng; value only.
inline double ddpm_train_loss(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& params,
                              const Eigen::MatrixXd& x0, Rng& rng) {
  if (x0.rows() == 0) throw ConfigError("ddpm loss needs a nonempty batch");
  check_params(arch, params);
  auto draws = draw_noise(rng, x0.rows(), x0.cols(), s.T());
  auto predictor = mlp_predictor(arch);
  return diffgraph::evaluate(params, [&](diffgraph::Graph& g) { return ddpm_loss(g, predictor, s, x0, draws); });
}

inline diffgraph::LossAndGrad ddpm_train_loss_and_grad(const NoiseSchedule& s, const DenoiserArch& arch,
                                                       const ParamVector& params, const Eigen::MatrixXd& x0, Rng& rng) {
  if (x0.rows() == 0) throw ConfigError("ddpm loss needs a nonempty batch");
  check_params(arch, params);
  auto draws = draw_noise(rng, x0.rows(), x0.cols(), s.T());
  auto predictor = mlp_predictor(arch);
  return diffgraph::grad(params, [&](diffgraph::Graph& g) { return ddpm_loss(g, predictor, s, x0, draws); });
}

/// Ancestral sampling. Chain i draws all of its noise from Rng(derive_seed(seed, i)):
/// x_T ~ N(0, I), then x_{t-1} = mu_theta(x_t, t) + sigma_q(t) z for t = T..2, and
/// x_0 = mu_theta(x_1, 1) without noise. Returns one sample per row.
inline Eigen::MatrixXd sample(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& params,
                              Eigen::Index n_samples, std::uint64_t seed) {
  check_params(arch, params);
  const Eigen::Index dim = arch.input_dim;
  std::vector<Rng> chains;
  chains.reserve(static_cast<std::size_t>(n_samples));
  for (Eigen::Index i = 0; i < n_samples; ++i) chains.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(i)));

  Eigen::MatrixXd x(n_samples, dim);
  for (Eigen::Index i = 0; i < n_samples; ++i)
    for (Eigen::Index c = 0; c < dim; ++c) x(i, c) = standard_normal(chains[static_cast<std::size_t>(i)]);

  const auto layout = arch.layout();
  for (int t = s.T(); t >= 1; --t) {
    diffgraph::Graph g(params.values);
    Eigen::MatrixXd emb = embed_time(t, arch.embed_dim, arch.max_period).transpose().replicate(n_samples, 1);
    auto eps_hat = diffgraph::mlp(g, layout, g.concat(g.constant(x), g.constant(emb)));
    const double a = s.alpha(t), ab = s.alpha_bar(t);
    x = (x - (1.0 - a) / std::sqrt(1.0 - ab) * g.value(eps_hat)) / std::sqrt(a);
    if (t > 1) {
      const double sigma = std::sqrt(s.posterior_var(t));
      for (Eigen::Index i = 0; i < n_samples; ++i)
        for (Eigen::Index c = 0; c < dim; ++c) x(i, c) += sigma * standard_normal(chains[static_cast<std::size_t>(i)]);
    }
  }
  return x;
}

/// Monte-Carlo estimate of E_q[KL(q(x_{t-1}|x_t,x_0) || p_theta(x_{t-1}|x_t))] for t = 2..T,
/// averaged over the rows of x0 with one eps draw per (row, t). Entry k holds t = k + 2.
inline std::vector<double> kl_terms(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& params,
                                    const Eigen::MatrixXd& x0, Rng& rng) {
  std::vector<double> out;
  for (int t = 2; t <= s.T(); ++t) {
    double acc = 0.0;
    for (Eigen::Index r = 0; r < x0.rows(); ++r) {
      Eigen::VectorXd eps(x0.cols());
      for (Eigen::Index c = 0; c < x0.cols(); ++c) eps(c) = standard_normal(rng);
      Eigen::VectorXd x0r = x0.row(r).transpose();
      Eigen::VectorXd xt = forward_noise(s, x0r, t, eps);
      acc += kl_posteriors(s, true_posterior(s, xt, x0r, t), model_posterior(s, arch, params, xt, t), t);
    }
    out.push_back(acc / static_cast<double>(x0.rows()));
  }
  return out;
}

}  // namespace vdu
