#pragma once

// Labeled toy datasets: 2-D Gaussian mixtures split into forget/retain parts
// by label, plus an IDX (MNIST-style) reader.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vdu/errors.hpp"
#include "vdu/rng.hpp"

namespace vdu {

struct MixtureMode {
  Eigen::Vector2d center;
  double std = 1.0;
  int label = 0;
};

struct MixtureSpec {
  std::vector<MixtureMode> modes;
  std::vector<double> weights;

  void validate() const {
    if (modes.size() < 2) throw ConfigError("mixture needs at least two modes");
    if (weights.size() != modes.size()) throw ConfigError("one weight per mode required");
    std::set<int> labels;
    double total = 0.0;
    for (std::size_t i = 0; i < modes.size(); ++i) {
      if (!(modes[i].std > 0.0)) throw ConfigError("mode std must be positive");
      if (!labels.insert(modes[i].label).second) throw ConfigError("mode labels must be distinct");
      if (weights[i] < 0.0) throw ConfigError("weights must be non-negative");
      total += weights[i];
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("mixture weights must sum to 1");
  }

  /// Equal-weight modes on a circle; mode k sits at angle 2 pi k / n_modes and carries label k.
  static MixtureSpec ring(int n_modes, double radius, double std) {
    MixtureSpec spec;
    for (int k = 0; k < n_modes; ++k) {
      const double a = 2.0 * std::numbers::pi * k / n_modes;
      spec.modes.push_back({Eigen::Vector2d(radius * std::cos(a), radius * std::sin(a)), std, k});
      spec.weights.push_back(1.0 / n_modes);
    }
    return spec;
  }
};

/// Affine map data -> (data - mean) / scale applied row-wise.
struct Normalization {
  Eigen::RowVectorXd mean;
  double scale = 1.0;

  static Normalization identity(Eigen::Index dim) { return {Eigen::RowVectorXd::Zero(dim), 1.0}; }

  /// Per-column mean and one global scale (root of the mean per-column variance).
  static Normalization fit(const Eigen::MatrixXd& x) {
    Normalization n;
    n.mean = x.colwise().mean();
    const double var = (x.rowwise() - n.mean).array().square().sum() / static_cast<double>(x.size());
    n.scale = var > 0.0 ? std::sqrt(var) : 1.0;
    return n;
  }

  Eigen::MatrixXd normalize(const Eigen::MatrixXd& x) const { return (x.rowwise() - mean) / scale; }
  Eigen::MatrixXd denormalize(const Eigen::MatrixXd& z) const { return (z * scale).rowwise() + mean; }
};

struct LabeledDataset {
  Eigen::MatrixXd x;  // one point per row
  std::vector<int> labels;
  Normalization norm;

  Eigen::Index size() const { return x.rows(); }
  Eigen::Index dim() const { return x.cols(); }

  std::size_t count(int label) const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label)); }

  /// Rows whose label is not in the given set.
  Eigen::MatrixXd points_without(const std::set<int>& excluded) const {
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < size(); ++i)
      if (!excluded.count(labels[static_cast<std::size_t>(i)])) keep.push_back(i);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(keep.size()), dim());
    for (std::size_t k = 0; k < keep.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(keep[k]);
    return out;
  }
};

/// n labeled draws; per point the mode is drawn first, then its two coordinates.
inline LabeledDataset sample_mixture(const MixtureSpec& spec, Eigen::Index n, std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw ConfigError("need at least one sample");
  Rng rng(seed);
  std::discrete_distribution<std::size_t> pick(spec.weights.begin(), spec.weights.end());
  LabeledDataset ds;
  ds.x.resize(n, 2);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& m = spec.modes[pick(rng)];
    ds.labels[static_cast<std::size_t>(i)] = m.label;
    for (int c = 0; c < 2; ++c) ds.x(i, c) = m.center(c) + m.std * standard_normal(rng);
  }
  ds.norm = Normalization::identity(2);
  return ds;
}

/// Partitions by label into (forget, retain), preserving order within each part.
inline std::pair<LabeledDataset, LabeledDataset> split_forget(const LabeledDataset& ds, const std::set<int>& forget_labels) {
  if (forget_labels.empty()) throw ConfigError("forget label set is empty");
  for (int l : forget_labels)
    if (ds.count(l) == 0) throw ConfigError("forget label " + std::to_string(l) + " not present in dataset");
  std::vector<Eigen::Index> f, r;
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    (forget_labels.count(ds.labels[static_cast<std::size_t>(i)]) ? f : r).push_back(i);
  auto gather = [&](const std::vector<Eigen::Index>& idx) {
    LabeledDataset out;
    out.x.resize(static_cast<Eigen::Index>(idx.size()), ds.dim());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.x.row(static_cast<Eigen::Index>(k)) = ds.x.row(idx[k]);
      out.labels.push_back(ds.labels[static_cast<std::size_t>(idx[k])]);
    }
    out.norm = ds.norm;
    return out;
  };
  return {gather(f), gather(r)};
}

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t at, const std::string& path) {
  if (at + 4 > b.size()) throw FormatError(FormatError::Kind::truncated, path + ": truncated IDX header");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

}  // namespace detail

/// IDX images (magic 0x00000803, n x rows x cols bytes) and labels (magic 0x00000801).
/// Pixels map to [-1, 1] via p / 127.5 - 1; each image becomes one flattened row.
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_all(images_path);
  const auto lab = detail::read_all(labels_path);
  if (detail::read_be32(img, 0, images_path) != 0x00000803u)
    throw FormatError(FormatError::Kind::bad_magic, images_path + ": not an IDX image file");
  if (detail::read_be32(lab, 0, labels_path) != 0x00000801u)
    throw FormatError(FormatError::Kind::bad_magic, labels_path + ": not an IDX label file");
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n != n_labels)
    throw FormatError(FormatError::Kind::dim_mismatch,
                      "IDX image count " + std::to_string(n) + " != label count " + std::to_string(n_labels));
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n * pixels) throw FormatError(FormatError::Kind::truncated, images_path + ": truncated pixel data");
  if (lab.size() < 8 + n) throw FormatError(FormatError::Kind::truncated, labels_path + ": truncated label data");

  LabeledDataset ds;
  ds.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pixels));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p)
      ds.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = img[16 + i * pixels + p] / 127.5 - 1.0;
    ds.labels[i] = lab[8 + i];
  }
  ds.norm = Normalization::identity(static_cast<Eigen::Index>(pixels));
  return ds;
}

}  // namespace vdu
