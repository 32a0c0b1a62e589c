#pragma once

// Convex client objectives with exact full-batch gradients.
//
//   ridge:   f_i(w) = 1/2 ||A_i w - b_i||^2 + alpha/4 ||w||^2
//   softmax: f_i(W) = -(N/n) sum_j log p_{y_j}(x_j) + alpha/2 ||W||^2
//
// The sparsity term of the federated objective is never evaluated here; it is
// enforced by the proxes in core_ops.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "fedsparse/core_ops.hpp"
#include "fedsparse/errors.hpp"

namespace fedsparse {

struct RidgeProblem {
  Matrix A;
  Eigen::VectorXd b;
  double alpha = 0.0;

  Index dimension() const { return A.cols(); }
};

// Parameters are flattened class-major: entries [k*d, (k+1)*d) hold the
// weights of class k, bias folded in through the constant feature column.
struct SoftmaxProblem {
  Matrix X;
  std::vector<int> y;
  double alpha = 0.0;
  int classes = 2;
  std::size_t clients = 1;        // N
  std::size_t total_samples = 1;  // n, over all clients

  Index dimension() const { return X.cols() * classes; }
};

namespace detail {

inline void check_ridge(const RidgeProblem& p, const ModelVector& w) {
  if (p.A.rows() != p.b.size())
    throw InvalidArgument("ridge: A has " + std::to_string(p.A.rows()) + " rows but b has " +
                          std::to_string(p.b.size()) + " entries");
  if (p.A.cols() != w.size())
    throw InvalidArgument("ridge: model dimension " + std::to_string(w.size()) + " does not match " +
                          std::to_string(p.A.cols()) + " features");
}

inline void check_softmax(const SoftmaxProblem& p, const ModelVector& w) {
  if (p.classes < 2) throw InvalidArgument("softmax: need at least two classes");
  if (static_cast<Index>(p.y.size()) != p.X.rows())
    throw InvalidArgument("softmax: label count does not match sample count");
  if (w.size() != p.dimension())
    throw InvalidArgument("softmax: model dimension " + std::to_string(w.size()) + " does not match d*C = " +
                          std::to_string(p.dimension()));
  if (p.total_samples == 0) throw InvalidArgument("softmax: total sample count must be positive");
}

using ClassWeights = Eigen::Map<const Eigen::MatrixXd>;

inline ClassWeights class_weights(const SoftmaxProblem& p, const ModelVector& w) {
  return ClassWeights(w.data(), p.X.cols(), p.classes);
}

inline double sample_scale(const SoftmaxProblem& p) {
  return static_cast<double>(p.clients) / static_cast<double>(p.total_samples);
}

}  // namespace detail

inline double ridge_loss(const RidgeProblem& p, const ModelVector& w) {
  detail::check_ridge(p, w);
  const Eigen::VectorXd r = p.A * w - p.b;
  return 0.5 * r.squaredNorm() + 0.25 * p.alpha * w.squaredNorm();
}

inline ModelVector ridge_gradient(const RidgeProblem& p, const ModelVector& w) {
  detail::check_ridge(p, w);
  const Eigen::VectorXd r = p.A * w - p.b;
  ModelVector g = p.A.transpose() * r;
  g += (0.5 * p.alpha) * w;
  return g;
}

inline double softmax_loss(const SoftmaxProblem& p, const ModelVector& w) {
  detail::check_softmax(p, w);
  const Eigen::MatrixXd logits = p.X * detail::class_weights(p, w);
  double nll = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const int label = p.y[static_cast<std::size_t>(i)];
    if (label < 0 || label >= p.classes) throw InvalidArgument("softmax: label out of range");
    Index arg = 0;
    const double top = logits.row(i).maxCoeff(&arg);
    // Summing only the non-top terms and using log1p keeps precision when the
    // top logit dominates.
    double rest = 0.0;
    for (Index c = 0; c < logits.cols(); ++c)
      if (c != arg) rest += std::exp(logits(i, c) - top);
    nll += (top - logits(i, label)) + std::log1p(rest);
  }
  return detail::sample_scale(p) * nll + 0.5 * p.alpha * w.squaredNorm();
}

inline ModelVector softmax_gradient(const SoftmaxProblem& p, const ModelVector& w) {
  detail::check_softmax(p, w);
  Eigen::MatrixXd probs = p.X * detail::class_weights(p, w);
  for (Index i = 0; i < probs.rows(); ++i) {
    const int label = p.y[static_cast<std::size_t>(i)];
    if (label < 0 || label >= p.classes) throw InvalidArgument("softmax: label out of range");
    const double top = probs.row(i).maxCoeff();
    probs.row(i) = (probs.row(i).array() - top).exp();
    probs.row(i) /= probs.row(i).sum();
    probs(i, label) -= 1.0;
  }
  Eigen::MatrixXd grad = detail::sample_scale(p) * (p.X.transpose() * probs);
  ModelVector out = Eigen::Map<const ModelVector>(grad.data(), grad.size());
  out += p.alpha * w;
  return out;
}

// One client's smooth loss. Immutable after construction.
class Objective {
 public:
  Objective(RidgeProblem p) : problem_(std::move(p)) {}
  Objective(SoftmaxProblem p) : problem_(std::move(p)) {}

  double loss(const ModelVector& w) const {
    return std::visit([&w](const auto& p) { return evaluate_loss(p, w); }, problem_);
  }

  ModelVector gradient(const ModelVector& w) const {
    return std::visit([&w](const auto& p) { return evaluate_gradient(p, w); }, problem_);
  }

  Index dimension() const {
    return std::visit([](const auto& p) { return p.dimension(); }, problem_);
  }

  const RidgeProblem* ridge() const { return std::get_if<RidgeProblem>(&problem_); }
  const SoftmaxProblem* softmax() const { return std::get_if<SoftmaxProblem>(&problem_); }

 private:
  static double evaluate_loss(const RidgeProblem& p, const ModelVector& w) { return ridge_loss(p, w); }
  static double evaluate_loss(const SoftmaxProblem& p, const ModelVector& w) { return softmax_loss(p, w); }
  static ModelVector evaluate_gradient(const RidgeProblem& p, const ModelVector& w) { return ridge_gradient(p, w); }
  static ModelVector evaluate_gradient(const SoftmaxProblem& p, const ModelVector& w) {
    return softmax_gradient(p, w);
  }

  std::variant<RidgeProblem, SoftmaxProblem> problem_;
};

// (1/N) sum_i f_i(w), accumulated in client order.
inline double global_loss(std::span<const Objective> objectives, const ModelVector& w) {
  if (objectives.empty()) throw InvalidArgument("global_loss: no clients");
  double total = 0.0;
  for (const auto& f : objectives) total += f.loss(w);
  return total / static_cast<double>(objectives.size());
}

// Largest eigenvalue of A^T A by power iteration, without forming the Gram
// matrix.
inline double gram_spectral_norm(const Matrix& A, double rel_tol = 1e-9, int max_iter = 100000) {
  if (A.cols() == 0) throw InvalidArgument("gram_spectral_norm: empty matrix");
  Eigen::VectorXd v(A.cols());
  for (Index j = 0; j < v.size(); ++j) v[j] = 1.0 + 0.01 * static_cast<double>(j % 7);
  v.normalize();
  double lambda = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd next = A.transpose() * (A * v);
    const double estimate = v.dot(next);
    const double norm = next.norm();
    if (norm == 0.0) return 0.0;
    v = next / norm;
    if (it > 0 && std::abs(estimate - lambda) <= rel_tol * std::abs(estimate)) return estimate;
    lambda = estimate;
  }
  return lambda;
}

// L = max_i lambda_max(A_i^T A_i) + alpha/2. Ridge clients only.
inline double estimate_smoothness(std::span<const Objective> objectives) {
  if (objectives.empty()) throw InvalidArgument("estimate_smoothness: no clients");
  double L = 0.0;
  for (const auto& f : objectives) {
    const RidgeProblem* p = f.ridge();
    if (p == nullptr) throw UnsupportedOperation("estimate_smoothness supports ridge objectives only");
    L = std::max(L, gram_spectral_norm(p->A) + 0.5 * p->alpha);
  }
  return L;
}

}  // namespace fedsparse
