#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Graph records nodes as they are built (define-by-run). Every node holds a
// rows x cols matrix; rows index batch samples, columns index features.
// Parameters live in one flat vector theta and are read by affine layers
// through AffineSlot views, so the gradient comes back as a single flat
// vector of the same length.
//
// Primitive set: affine, SiLU, column concatenation, add/sub, scalar
// scale/shift, sum, mean and weighted squared-error reduction. Every value
// and gradient is double precision.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vdu/errors.hpp"

namespace vdu {

/// Flattened model parameters theta in R^d.
struct ParamVector {
  Eigen::VectorXd values;

  Eigen::Index size() const { return values.size(); }
  bool operator==(const ParamVector& o) const { return values.size() == o.values.size() && values == o.values; }
};

/// d(loss)/d(theta), same length as the ParamVector it differentiates.
struct GradVector {
  Eigen::VectorXd values;

  Eigen::Index size() const { return values.size(); }
};

namespace diffgraph {

using Matrix = Eigen::MatrixXd;
using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Location of one affine layer inside theta: an out x in weight matrix
/// stored row-major, followed by out bias entries.
struct AffineSlot {
  Eigen::Index offset = 0;
  Eigen::Index in = 0;
  Eigen::Index out = 0;

  Eigen::Index weight_count() const { return in * out; }
  Eigen::Index size() const { return in * out + out; }
};

/// Slot table for a stack of affine layers with SiLU between them.
struct MlpLayout {
  std::vector<AffineSlot> layers;
  Eigen::Index num_params = 0;

  static MlpLayout make(const std::vector<Eigen::Index>& widths) {
    if (widths.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
    MlpLayout layout;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      if (widths[i] <= 0 || widths[i + 1] <= 0) throw ConfigError("MLP widths must be positive");
      AffineSlot slot{layout.num_params, widths[i], widths[i + 1]};
      layout.layers.push_back(slot);
      layout.num_params += slot.size();
    }
    return layout;
  }
};

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline double silu_derivative(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

class Graph;

class Var {
 public:
  Var() = default;

 private:
  friend class Graph;
  explicit Var(std::size_t id) : id_(id) {}
  std::size_t id_ = 0;
};

class Graph {
 public:
  /// The graph reads params by reference; they must outlive it and are never written.
  explicit Graph(const Eigen::VectorXd& params) : params_(params) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that receives no parameter gradient.
  Var constant(Matrix value) { return push(std::move(value), nullptr); }

  /// All of theta as a 1 x d row.
  Var parameters() {
    Matrix row = params_.transpose();
    return push(std::move(row), [](Graph& g, std::size_t self) { g.param_grad_ += g.nodes_[self].grad.row(0).transpose(); });
  }

  /// x (rows x in) -> x W^T + b (rows x out).
  Var affine(Var x, const AffineSlot& slot) {
    const Matrix& xv = value(x);
    if (xv.cols() != slot.in) throw ConfigError("affine: input width does not match slot");
    if (slot.offset + slot.size() > params_.size()) throw ConfigError("affine: slot outside parameter vector");
    RowMajorMap w(params_.data() + slot.offset, slot.out, slot.in);
    Eigen::Map<const Eigen::RowVectorXd> b(params_.data() + slot.offset + slot.weight_count(), slot.out);
    Matrix y = xv * w.transpose();
    y.rowwise() += b;
    const std::size_t xi = x.id_;
    return push(std::move(y), [xi, slot](Graph& g, std::size_t self) {
      const Matrix& dy = g.nodes_[self].grad;
      RowMajorMap w(g.params_.data() + slot.offset, slot.out, slot.in);
      RowMajorMutMap dw(g.param_grad_.data() + slot.offset, slot.out, slot.in);
      dw.noalias() += dy.transpose() * g.nodes_[xi].value;
      Eigen::Map<Eigen::RowVectorXd> db(g.param_grad_.data() + slot.offset + slot.weight_count(), slot.out);
      db += dy.colwise().sum();
      g.accumulate(xi, dy * w);
    });
  }

  Var silu(Var x) {
    Matrix y = value(x).unaryExpr([](double v) { return diffgraph::silu(v); });
    const std::size_t xi = x.id_;
    return push(std::move(y), [xi](Graph& g, std::size_t self) {
      Matrix local = g.nodes_[xi].value.unaryExpr([](double v) { return silu_derivative(v); });
      g.accumulate(xi, g.nodes_[self].grad.cwiseProduct(local));
    });
  }

  /// [a | b] along columns; row counts must match.
  Var concat(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.rows() != bv.rows()) throw ConfigError("concat: row counts differ");
    Matrix y(av.rows(), av.cols() + bv.cols());
    y << av, bv;
    const std::size_t ai = a.id_, bi = b.id_;
    const Eigen::Index split = av.cols();
    return push(std::move(y), [ai, bi, split](Graph& g, std::size_t self) {
      const Matrix& dy = g.nodes_[self].grad;
      g.accumulate(ai, dy.leftCols(split));
      g.accumulate(bi, dy.rightCols(dy.cols() - split));
    });
  }

  Var add(Var a, Var b) { return combine(a, b, 1.0); }
  Var sub(Var a, Var b) { return combine(a, b, -1.0); }

  Var scale(Var a, double s) {
    const std::size_t ai = a.id_;
    return push(value(a) * s, [ai, s](Graph& g, std::size_t self) { g.accumulate(ai, g.nodes_[self].grad * s); });
  }

  Var add_scalar(Var a, double s) {
    const std::size_t ai = a.id_;
    Matrix y = value(a).array() + s;
    return push(std::move(y), [ai](Graph& g, std::size_t self) { g.accumulate(ai, g.nodes_[self].grad); });
  }

  Var sum(Var a) {
    const std::size_t ai = a.id_;
    Matrix y(1, 1);
    y(0, 0) = value(a).sum();
    return push(std::move(y), [ai](Graph& g, std::size_t self) {
      const Matrix& av = g.nodes_[ai].value;
      g.accumulate(ai, Matrix::Constant(av.rows(), av.cols(), g.nodes_[self].grad(0, 0)));
    });
  }

  Var mean(Var a) {
    const Eigen::Index n = value(a).size();
    if (n == 0) throw ConfigError("mean of an empty node");
    return scale(sum(a), 1.0 / static_cast<double>(n));
  }

  /// sum_r row_w[r] * sum_c col_w[c] * (a - b)^2 as a 1 x 1 node. Missing weights count as 1.
  Var squared_error(Var a, Var b, std::optional<Eigen::VectorXd> row_w = std::nullopt,
                    std::optional<Eigen::VectorXd> col_w = std::nullopt) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw ConfigError("squared_error: shape mismatch");
    if (row_w && row_w->size() != av.rows()) throw ConfigError("squared_error: row weight length mismatch");
    if (col_w && col_w->size() != av.cols()) throw ConfigError("squared_error: column weight length mismatch");
    Matrix w = Matrix::Ones(av.rows(), av.cols());
    if (row_w) w.array().colwise() *= row_w->array();
    if (col_w) w.array().rowwise() *= col_w->transpose().array();
    Matrix diff = av - bv;
    Matrix y(1, 1);
    y(0, 0) = (w.array() * diff.array().square()).sum();
    const std::size_t ai = a.id_, bi = b.id_;
    return push(std::move(y), [ai, bi, diff = std::move(diff), w = std::move(w)](Graph& g, std::size_t self) {
      const double up = g.nodes_[self].grad(0, 0);
      Matrix da = (2.0 * up) * w.cwiseProduct(diff);
      g.accumulate(bi, -da);
      g.accumulate(ai, std::move(da));
    });
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id_).value; }

  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.rows() != 1 || m.cols() != 1) throw ConfigError("loss node is not scalar");
    return m(0, 0);
  }

  /// Backpropagates d(loss)/d(node) and returns d(loss)/d(theta). Call once per graph.
  const Eigen::VectorXd& backward(Var loss) {
    (void)scalar(loss);
    param_grad_ = Eigen::VectorXd::Zero(params_.size());
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id_].grad = Matrix::Ones(1, 1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backprop) continue;
      n.backprop(*this, i);
    }
    return param_grad_;
  }

  /// Gradient with respect to an arbitrary node, valid after backward().
  const Matrix& grad_of(Var v) const { return nodes_.at(v.id_).grad; }

  std::size_t size() const { return nodes_.size(); }

 private:
  using Backprop = std::function<void(Graph&, std::size_t)>;

  struct Node {
    Matrix value;
    Matrix grad;
    Backprop backprop;
  };

  Var push(Matrix value, Backprop backprop) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(backprop)});
    return Var(nodes_.size() - 1);
  }

  Var combine(Var a, Var b, double sign) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw ConfigError("add/sub: shape mismatch");
    Matrix y = av + sign * bv;
    const std::size_t ai = a.id_, bi = b.id_;
    return push(std::move(y), [ai, bi, sign](Graph& g, std::size_t self) {
      const Matrix& dy = g.nodes_[self].grad;
      g.accumulate(ai, dy);
      g.accumulate(bi, sign * dy);
    });
  }

  template <class Expr>
  void accumulate(std::size_t id, const Expr& contribution) {
    Matrix& gr = nodes_[id].grad;
    if (gr.size() == 0)
      gr = contribution;
    else
      gr += contribution;
  }

  const Eigen::VectorXd& params_;
  Eigen::VectorXd param_grad_;
  std::vector<Node> nodes_;
};

/// Affine layers with SiLU between them and a linear output.
inline Var mlp(Graph& g, const MlpLayout& layout, Var x) {
  for (std::size_t i = 0; i < layout.layers.size(); ++i) {
    x = g.affine(x, layout.layers[i]);
    if (i + 1 < layout.layers.size()) x = g.silu(x);
  }
  return x;
}

struct LossAndGrad {
  double loss = 0.0;
  GradVector grad;
};

/// Evaluates loss_fn(graph) -> scalar Var and returns its exact gradient with respect to params.
template <class LossFn>
LossAndGrad grad(const ParamVector& params, LossFn&& loss_fn) {
  Graph g(params.values);
  Var loss = std::forward<LossFn>(loss_fn)(g);
  LossAndGrad out;
  out.loss = g.scalar(loss);
  out.grad.values = g.backward(loss);
  return out;
}

/// Value only; builds the same graph but skips the backward pass.
template <class LossFn>
double evaluate(const ParamVector& params, LossFn&& loss_fn) {
  Graph g(params.values);
  return g.scalar(std::forward<LossFn>(loss_fn)(g));
}

}  // namespace diffgraph
}  // namespace vdu
