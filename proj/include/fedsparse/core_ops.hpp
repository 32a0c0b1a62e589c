#pragma once

// Vector primitives shared by every algorithm variant: hard thresholding
// (TopK, the prox of the cardinality constraint), soft thresholding (the prox
// of tau*||.||_1) and sparsity measurement.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedsparse/errors.hpp"

namespace fedsparse {

using ModelVector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

inline bool all_finite(const ModelVector& v) { return v.allFinite(); }

inline void require_finite(const ModelVector& v, const char* what) {
  if (!v.allFinite()) throw InvalidArgument(std::string(what) + ": vector has non-finite entries");
}

// Either an explicit number of retained entries or a target fraction of zeros.
class SparsityTarget {
 public:
  enum class Mode { Count, Fraction };

  static SparsityTarget count(std::size_t k) { return SparsityTarget(Mode::Count, static_cast<double>(k)); }

  static SparsityTarget fraction(double s) {
    if (!(s >= 0.0 && s < 1.0)) throw InvalidArgument("sparsity fraction must lie in [0,1), got " + std::to_string(s));
    return SparsityTarget(Mode::Fraction, s);
  }

  // No pruning: every coordinate is retained.
  static SparsityTarget dense() { return fraction(0.0); }

  Mode mode() const { return mode_; }
  double value() const { return value_; }

  // Fractions round to nearest and clamp to [1, d]; counts must already lie
  // in that range.
  std::size_t resolve(std::size_t d) const {
    if (d == 0) throw InvalidArgument("model dimension must be positive");
    if (mode_ == Mode::Count) {
      const auto k = static_cast<std::size_t>(value_);
      if (k < 1 || k > d)
        throw InvalidArgument("K=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
      return k;
    }
    const double kept = std::round((1.0 - value_) * static_cast<double>(d));
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(kept, 0.0)), 1, d);
  }

  bool operator==(const SparsityTarget&) const = default;

 private:
  SparsityTarget(Mode mode, double value) : mode_(mode), value_(value) {}

  Mode mode_;
  double value_;
};

// Indices of the K largest-magnitude entries, ascending. Equal magnitudes keep
// the lowest index first so runs are bit-reproducible.
inline std::vector<Index> top_k_mask(const ModelVector& v, SparsityTarget target) {
  require_finite(v, "top_k_mask");
  const auto d = static_cast<std::size_t>(v.size());
  const std::size_t k = target.resolve(d);
  std::vector<Index> order(d);
  std::iota(order.begin(), order.end(), Index{0});
  if (k < d) {
    auto larger = [&v](Index a, Index b) {
      const double ma = std::abs(v[a]);
      const double mb = std::abs(v[b]);
      return ma > mb || (ma == mb && a < b);
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), larger);
    order.resize(k);
    std::sort(order.begin(), order.end());
  }
  return order;
}

inline ModelVector top_k(const ModelVector& v, SparsityTarget target) {
  require_finite(v, "top_k");
  const auto d = static_cast<std::size_t>(v.size());
  if (target.resolve(d) == d) return v;
  ModelVector out = ModelVector::Zero(v.size());
  for (Index i : top_k_mask(v, target)) out[i] = v[i];
  return out;
}

inline ModelVector soft_threshold(const ModelVector& v, double tau) {
  if (!(tau >= 0.0)) throw InvalidArgument("soft_threshold: tau must be nonnegative");
  ModelVector out(v.size());
  for (Index i = 0; i < v.size(); ++i) {
    const double x = v[i];
    out[i] = std::abs(x) <= tau ? 0.0 : x - std::copysign(tau, x);
  }
  return out;
}

inline std::size_t nnz(const ModelVector& v) {
  std::size_t count = 0;
  for (Index i = 0; i < v.size(); ++i) count += v[i] != 0.0;
  return count;
}

// Sum of `count` vectors by recursive halving, always in the same order.
// `get(i)` returns the i-th vector.
template <class Get>
ModelVector pairwise_sum(std::size_t count, Get&& get) {
  if (count == 0) throw InvalidArgument("pairwise_sum: nothing to sum");
  auto recurse = [&](auto&& self, std::size_t lo, std::size_t hi) -> ModelVector {
    if (hi - lo == 1) return get(lo);
    const std::size_t mid = lo + (hi - lo) / 2;
    ModelVector left = self(self, lo, mid);
    left += self(self, mid, hi);
    return left;
  };
  return recurse(recurse, 0, count);
}

// Fraction of exactly-zero entries.
inline double sparsity(const ModelVector& v) {
  if (v.size() == 0) throw InvalidArgument("sparsity of an empty vector");
  const auto d = static_cast<double>(v.size());
  return (d - static_cast<double>(nnz(v))) / d;
}

}  // namespace fedsparse
