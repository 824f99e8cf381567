#pragma once

// Unlearning metrics: forget-class counting with a classifier, PUL, and the
// Frechet distance between Gaussian fits of two sample sets (the desk-scale
// analogue of u-FID).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "vdu/data.hpp"
#include "vdu/diffgraph.hpp"
#include "vdu/diffusion.hpp"
#include "vdu/errors.hpp"
#include "vdu/optim.hpp"
#include "vdu/rng.hpp"
#include "vdu/schedule.hpp"
#include "vdu/training.hpp"

namespace vdu {

/// Assigns the label of the nearest mode center. Exact distance ties go to the lowest label.
struct NearestModeClassifier {
  std::vector<Eigen::VectorXd> centers;  // sorted by label
  std::vector<int> labels;

  static NearestModeClassifier from_spec(const MixtureSpec& spec) {
    std::vector<std::size_t> idx(spec.modes.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return spec.modes[a].label < spec.modes[b].label; });
    NearestModeClassifier c;
    for (auto i : idx) {
      c.centers.emplace_back(spec.modes[i].center);
      c.labels.push_back(spec.modes[i].label);
    }
    return c;
  }
};

/// MLP trained with squared error against one-hot targets; predicts the argmax output.
struct TrainedClassifier {
  diffgraph::MlpLayout layout;
  ParamVector params;
  std::vector<int> labels;  // output column k predicts labels[k]
  Eigen::Index input_dim = 0;
};

using ClassifierModel = std::variant<NearestModeClassifier, TrainedClassifier>;

inline Eigen::Index classifier_input_dim(const ClassifierModel& c) {
  if (const auto* nm = std::get_if<NearestModeClassifier>(&c)) return nm->centers.empty() ? 0 : nm->centers.front().size();
  return std::get<TrainedClassifier>(c).input_dim;
}

/// Hidden activations of the last hidden layer, one row per input row.
inline Eigen::MatrixXd classifier_features(const TrainedClassifier& c, const Eigen::MatrixXd& x) {
  diffgraph::Graph g(c.params.values);
  auto h = g.constant(x);
  for (std::size_t i = 0; i + 1 < c.layout.layers.size(); ++i) h = g.silu(g.affine(h, c.layout.layers[i]));
  return g.value(h);
}

/// One label per row of x.
inline std::vector<int> classify_batch(const ClassifierModel& c, const Eigen::MatrixXd& x) {
  if (x.cols() != classifier_input_dim(c)) throw ConfigError("classifier input dimension mismatch");
  if (!x.allFinite()) throw NumericalError("cannot classify non-finite input");
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  if (const auto* nm = std::get_if<NearestModeClassifier>(&c)) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      std::size_t best = 0;
      double best_d = (x.row(r).transpose() - nm->centers[0]).squaredNorm();
      for (std::size_t k = 1; k < nm->centers.size(); ++k) {
        const double d = (x.row(r).transpose() - nm->centers[k]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      out[static_cast<std::size_t>(r)] = nm->labels[best];
    }
    return out;
  }
  const auto& tc = std::get<TrainedClassifier>(c);
  diffgraph::Graph g(tc.params.values);
  const Eigen::MatrixXd& scores = g.value(diffgraph::mlp(g, tc.layout, g.constant(x)));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Eigen::Index k = 0;
    scores.row(r).maxCoeff(&k);
    out[static_cast<std::size_t>(r)] = tc.labels[static_cast<std::size_t>(k)];
  }
  return out;
}

inline int classify(const ClassifierModel& c, const Eigen::VectorXd& x) { return classify_batch(c, x.transpose()).front(); }

struct ClassifierTrainConfig {
  std::vector<int> hidden_dims = {128};
  int epochs = 20;
  int batch_size = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Supervised classifier for image data; squared error to one-hot targets.
inline TrainedClassifier train_classifier(const LabeledDataset& ds, const ClassifierTrainConfig& cfg) {
  if (ds.size() == 0) throw ConfigError("classifier training set is empty");
  TrainedClassifier c;
  const std::set<int> distinct(ds.labels.begin(), ds.labels.end());
  c.labels.assign(distinct.begin(), distinct.end());
  c.input_dim = ds.dim();
  std::vector<Eigen::Index> widths{ds.dim()};
  for (int h : cfg.hidden_dims) widths.push_back(h);
  widths.push_back(static_cast<Eigen::Index>(c.labels.size()));
  c.layout = diffgraph::MlpLayout::make(widths);

  Rng rng(cfg.seed);
  c.params.values.resize(c.layout.num_params);
  for (const auto& slot : c.layout.layers) {
    std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(double(slot.in)), 1.0 / std::sqrt(double(slot.in)));
    for (Eigen::Index i = 0; i < slot.size(); ++i) c.params.values(slot.offset + i) = dist(rng);
  }
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(ds.size(), static_cast<Eigen::Index>(c.labels.size()));
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const auto it = std::find(c.labels.begin(), c.labels.end(), ds.labels[static_cast<std::size_t>(i)]);
    onehot(i, it - c.labels.begin()) = 1.0;
  }
  Adam opt(c.params.size(), AdamConfig{cfg.lr});
  std::vector<Eigen::Index> order(static_cast<std::size_t>(ds.size()));
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t end = std::min(order.size(), b + bs);
      Eigen::MatrixXd xb = gather_rows(ds.x, order, b, end);
      Eigen::MatrixXd yb = gather_rows(onehot, order, b, end);
      auto lg = diffgraph::grad(c.params, [&](diffgraph::Graph& g) {
        auto out = diffgraph::mlp(g, c.layout, g.constant(xb));
        return g.scale(g.squared_error(out, g.constant(yb)), 1.0 / static_cast<double>(end - b));
      });
      opt.step(c.params, lg.grad);
    }
  }
  return c;
}

/// 100 (pre - post) / pre. Negative when unlearning increased forget-class generations.
inline double pul(long count_pre, long count_post) {
  if (count_pre <= 0) throw NumericalError("PUL is undefined when the pre-unlearning forget count is 0");
  return 100.0 * static_cast<double>(count_pre - count_post) / static_cast<double>(count_pre);
}

namespace detail {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Frechet distance between Gaussians fitted to the rows of a and b:
/// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with 1e-6 I added to each covariance.
inline double gaussian_frechet(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::Index dim = a.cols();
  if (b.cols() != dim) throw ConfigError("sample sets differ in dimension");
  if (a.rows() < dim + 1 || b.rows() < dim + 1) throw ConfigError("each sample set needs at least dim + 1 rows");
  auto fit = [dim](const Eigen::MatrixXd& x, Eigen::RowVectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean();
    Eigen::MatrixXd c = x.rowwise() - mu;
    cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    cov += 1e-6 * Eigen::MatrixXd::Identity(dim, dim);
    cov = 0.5 * (cov + cov.transpose());
  };
  Eigen::RowVectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  fit(a, mu_a, cov_a);
  fit(b, mu_b, cov_b);
  if (!cov_a.allFinite() || !cov_b.allFinite()) throw NumericalError("degenerate covariance in Frechet distance");
  const Eigen::MatrixXd root_a = detail::psd_sqrt(cov_a);
  Eigen::MatrixXd inner = root_a * cov_b * root_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("eigendecomposition failed");
  const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
  return std::max(d, 0.0);
}

/// Frechet distance on raw coordinates, or on penultimate-layer features for a trained classifier.
inline double frechet_in_eval_space(const ClassifierModel& classifier, const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (const auto* tc = std::get_if<TrainedClassifier>(&classifier))
    return gaussian_frechet(classifier_features(*tc, a), classifier_features(*tc, b));
  return gaussian_frechet(a, b);
}

struct EvalReport {
  std::string variant = "vdu";
  double gamma = 0.0;
  long n_samples = 0;
  long count_forget_pretrained = 0;
  long count_forget_unlearned = 0;
  double pul_percent = 0.0;
  double u_fid = 0.0;             // unlearned model, non-forget samples vs retained reference
  double u_fid_pretrained = 0.0;  // same measurement for the pre-trained model
  std::uint64_t unlearn_seed = 0;
  std::uint64_t eval_seed = 0;

  bool operator==(const EvalReport&) const = default;
};

/// Rows of x whose label is not in excluded.
inline Eigen::MatrixXd rows_without(const Eigen::MatrixXd& x, const std::vector<int>& labels, const std::set<int>& excluded) {
  LabeledDataset tmp{x, labels, Normalization::identity(x.cols())};
  return tmp.points_without(excluded);
}

/// Metrics from already generated samples (data space, one per row).
inline EvalReport evaluate_samples(const Eigen::MatrixXd& samples_pre, const Eigen::MatrixXd& samples_post,
                                   const ClassifierModel& classifier, const Eigen::MatrixXd& retain_reference,
                                   const std::set<int>& forget_labels) {
  const auto labels_pre = classify_batch(classifier, samples_pre);
  const auto labels_post = classify_batch(classifier, samples_post);
  auto count = [&](const std::vector<int>& ls) {
    return static_cast<long>(std::count_if(ls.begin(), ls.end(), [&](int l) { return forget_labels.count(l) > 0; }));
  };
  EvalReport r;
  r.n_samples = static_cast<long>(samples_post.rows());
  r.count_forget_pretrained = count(labels_pre);
  r.count_forget_unlearned = count(labels_post);
  r.pul_percent = pul(r.count_forget_pretrained, r.count_forget_unlearned);
  r.u_fid = frechet_in_eval_space(classifier, rows_without(samples_post, labels_post, forget_labels), retain_reference);
  r.u_fid_pretrained =
      frechet_in_eval_space(classifier, rows_without(samples_pre, labels_pre, forget_labels), retain_reference);
  return r;
}

/// Samples n_samples from theta_star and theta_u with the same seed, maps them back to data
/// space with `norm`, and scores them. retain_reference holds held-out real points without
/// forget labels.
inline EvalReport evaluate_unlearning(const NoiseSchedule& s, const DenoiserArch& arch, const ParamVector& theta_star,
                                      const ParamVector& theta_u, const ClassifierModel& classifier,
                                      const Eigen::MatrixXd& retain_reference, const std::set<int>& forget_labels,
                                      Eigen::Index n_samples, std::uint64_t seed,
                                      const Normalization& norm) {
  if (classifier_input_dim(classifier) != arch.input_dim) throw ConfigError("classifier and model dimensions differ");
  if (n_samples < 1) throw ConfigError("n_samples must be positive");
  const Eigen::MatrixXd pre = norm.denormalize(sample(s, arch, theta_star, n_samples, seed));
  const Eigen::MatrixXd post = norm.denormalize(sample(s, arch, theta_u, n_samples, seed));
  EvalReport r = evaluate_samples(pre, post, classifier, retain_reference, forget_labels);
  r.eval_seed = seed;
  return r;
}

}  // namespace vdu
