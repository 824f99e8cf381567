#pragma once

// The noise-prediction network eps_theta(x_t, t): an MLP over [x_t | embed(t)]
// with SiLU activations and a linear output of the same width as x_t.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vdu/diffgraph.hpp"
#include "vdu/errors.hpp"
#include "vdu/rng.hpp"

namespace vdu {

enum class Activation { silu };

inline std::string to_string(Activation) { return "silu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "silu") return Activation::silu;
  throw ConfigError("unsupported activation '" + s + "'");
}

struct DenoiserArch {
  int input_dim = 2;
  std::vector<int> hidden_dims = {128, 128};
  int embed_dim = 32;
  double max_period = 10000.0;
  Activation activation = Activation::silu;

  bool operator==(const DenoiserArch&) const = default;

  diffgraph::MlpLayout layout() const {
    if (input_dim <= 0) throw ConfigError("input_dim must be positive");
    if (embed_dim <= 0 || embed_dim % 2 != 0) throw ConfigError("embed_dim must be even and positive");
    std::vector<Eigen::Index> widths{input_dim + embed_dim};
    for (int h : hidden_dims) widths.push_back(h);
    widths.push_back(input_dim);
    return diffgraph::MlpLayout::make(widths);
  }

  Eigen::Index num_params() const { return layout().num_params; }
};

/// Interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...] with w_k = max_period^(-k/(embed_dim/2)).
inline Eigen::VectorXd embed_time(int t, int embed_dim, double max_period) {
  if (t < 1) throw ConfigError("timestep must be >= 1");
  if (embed_dim <= 0 || embed_dim % 2 != 0) throw ConfigError("embed_dim must be even and positive");
  const int half = embed_dim / 2;
  Eigen::VectorXd e(embed_dim);
  for (int k = 0; k < half; ++k) {
    const double freq = std::pow(max_period, -static_cast<double>(k) / half);
    e(2 * k) = std::sin(t * freq);
    e(2 * k + 1) = std::cos(t * freq);
  }
  return e;
}

/// One embedding row per timestep.
inline Eigen::MatrixXd embed_times(const std::vector<int>& ts, int embed_dim, double max_period) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(ts.size()), embed_dim);
  for (std::size_t i = 0; i < ts.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = embed_time(ts[i], embed_dim, max_period).transpose();
  return m;
}

/// Records eps_theta for a batch (rows of x) into g.
inline diffgraph::Var predict_noise(diffgraph::Graph& g, const DenoiserArch& arch, diffgraph::Var x,
                                    const Eigen::MatrixXd& t_embed) {
  if (g.value(x).cols() != arch.input_dim) throw ConfigError("x_t width does not match the architecture");
  if (t_embed.cols() != arch.embed_dim || t_embed.rows() != g.value(x).rows())
    throw ConfigError("time embedding shape does not match the batch");
  auto input = g.concat(x, g.constant(t_embed));
  return diffgraph::mlp(g, arch.layout(), input);
}

inline void check_params(const DenoiserArch& arch, const ParamVector& params) {
  if (params.size() != arch.num_params())
    throw ConfigError("parameter vector has length " + std::to_string(params.size()) + ", architecture needs " +
                      std::to_string(arch.num_params()));
}

/// Network evaluation with a precomputed embedding vector.
inline Eigen::VectorXd forward(const DenoiserArch& arch, const ParamVector& params, const Eigen::VectorXd& input,
                               const Eigen::VectorXd& t_embed) {
  check_params(arch, params);
  if (input.size() != arch.input_dim) throw ConfigError("input dimension mismatch");
  diffgraph::Graph g(params.values);
  auto out = predict_noise(g, arch, g.constant(input.transpose()), t_embed.transpose());
  return g.value(out).row(0).transpose();
}

/// eps_theta for a batch: x is n x input_dim, ts holds one timestep per row, each in 1..T.
inline Eigen::MatrixXd predict_noise_batch(const DenoiserArch& arch, const ParamVector& params, const Eigen::MatrixXd& x,
                                           const std::vector<int>& ts, int T) {
  check_params(arch, params);
  if (static_cast<Eigen::Index>(ts.size()) != x.rows()) throw ConfigError("one timestep per row required");
  for (int t : ts)
    if (t < 1 || t > T) throw ConfigError("timestep outside 1..T");
  diffgraph::Graph g(params.values);
  auto out = predict_noise(g, arch, g.constant(x), embed_times(ts, arch.embed_dim, arch.max_period));
  return g.value(out);
}

inline Eigen::VectorXd predict_noise(const DenoiserArch& arch, const ParamVector& params, const Eigen::VectorXd& x_t,
                                     int t, int T) {
  if (x_t.size() != arch.input_dim) throw ConfigError("x_t dimension mismatch");
  return predict_noise_batch(arch, params, x_t.transpose(), {t}, T).row(0).transpose();
}

/// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, so weight std is 1/sqrt(3 fan_in).
inline ParamVector init_params(const DenoiserArch& arch, std::uint64_t seed) {
  const auto layout = arch.layout();
  ParamVector p{Eigen::VectorXd(layout.num_params)};
  Rng rng(seed);
  for (const auto& slot : layout.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(slot.in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < slot.size(); ++i) p.values(slot.offset + i) = dist(rng);
  }
  return p;
}

}  // namespace vdu
