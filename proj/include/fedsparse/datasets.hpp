#pragma once

// Federated datasets: grouped CSV ingestion, synthetic heterogeneous
// generators, and the Dirichlet / lognormal label-skew partitioner.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fedsparse/core_ops.hpp"
#include "fedsparse/errors.hpp"
#include "fedsparse/objectives.hpp"

namespace fedsparse {

enum class Task { Regression, Classification };

struct DataBlock {
  Matrix X;
  Eigen::VectorXd y;  // regression target or integral class label

  Index rows() const { return X.rows(); }
  bool empty() const { return X.rows() == 0; }
};

struct FederatedDataset {
  std::vector<DataBlock> clients;
  DataBlock test;
  Index d = 0;  // feature dimension, bias column included
  Task task = Task::Regression;
  int classes = 0;
  // Rows of the training pool held by each client, when the dataset was built
  // by partitioning a pool. Empty for datasets that come pre-grouped.
  std::vector<std::vector<std::size_t>> assignment;

  std::size_t num_clients() const { return clients.size(); }

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& c : clients) n += static_cast<std::size_t>(c.rows());
    return n;
  }

  // Model dimension: d for regression, d*C for softmax.
  Index model_dimension() const { return task == Task::Regression ? d : d * classes; }
};

struct PartitionSpec {
  std::size_t clients = 1;
  double dirichlet_alpha = 0.3;
  double lognormal_sigma2 = 0.3;
  std::uint64_t seed = 0;

  bool operator==(const PartitionSpec&) const = default;
};

inline void check_partition(std::span<const std::vector<std::size_t>> assignment, std::size_t pool_size) {
  std::vector<char> seen(pool_size, 0);
  std::size_t total = 0;
  for (const auto& part : assignment) {
    for (std::size_t idx : part) {
      if (idx >= pool_size) throw InvalidData("partition index out of range");
      if (seen[idx]) throw InvalidData("partition assigns sample " + std::to_string(idx) + " twice");
      seen[idx] = 1;
    }
    total += part.size();
  }
  if (total != pool_size) throw InvalidData("partition does not cover the pool");
}

inline void validate(const FederatedDataset& data) {
  if (data.clients.empty()) throw InvalidData("dataset has no clients");
  if (data.d <= 0) throw InvalidData("dataset has no features");
  for (std::size_t i = 0; i < data.clients.size(); ++i) {
    const auto& c = data.clients[i];
    if (c.empty()) throw InvalidData("client " + std::to_string(i) + " holds no samples");
    if (c.X.cols() != data.d || c.y.size() != c.X.rows())
      throw InvalidData("client " + std::to_string(i) + " block has inconsistent shape");
  }
  if (!data.test.empty() && (data.test.X.cols() != data.d || data.test.y.size() != data.test.X.rows()))
    throw InvalidData("test block has inconsistent shape");
  if (data.task == Task::Classification && data.classes < 2) throw InvalidData("classification needs C >= 2");
  if (!data.assignment.empty()) {
    if (data.assignment.size() != data.clients.size()) throw InvalidData("assignment size mismatch");
    check_partition(data.assignment, data.total_samples());
  }
}

inline std::vector<int> labels_of(const DataBlock& block) {
  std::vector<int> labels(static_cast<std::size_t>(block.rows()));
  for (Index i = 0; i < block.rows(); ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(block.y[i]);
  return labels;
}

// One Objective per client: ridge for regression, softmax for classification.
inline std::vector<Objective> make_objectives(const FederatedDataset& data, double alpha) {
  std::vector<Objective> out;
  out.reserve(data.clients.size());
  const std::size_t n = data.total_samples();
  for (const auto& c : data.clients) {
    if (data.task == Task::Regression) {
      out.emplace_back(RidgeProblem{c.X, c.y, alpha});
    } else {
      out.emplace_back(SoftmaxProblem{c.X, labels_of(c), alpha, data.classes, data.clients.size(), n});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV ingestion

struct CsvOptions {
  bool skip_header = false;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline double parse_cell(std::string_view cell, std::size_t row, std::size_t col) {
  cell = trim(cell);
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  double value = 0.0;
  const auto [end, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (cell.empty() || ec != std::errc() || end != cell.data() + cell.size() || !std::isfinite(value))
    throw ParseError("non-numeric cell '" + std::string(cell) + "'", row, col);
  return value;
}

// Rows of a numeric CSV. Row and column numbers in errors are 1-based.
inline std::vector<std::vector<double>> read_numeric_csv(const std::string& path, const CsvOptions& opt) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t row = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++row;
    if (row == 1 && opt.skip_header) continue;
    if (trim(line).empty()) continue;
    std::vector<double> values;
    std::string_view rest(line);
    std::size_t col = 0;
    while (true) {
      ++col;
      const auto comma = rest.find(',');
      values.push_back(parse_cell(rest.substr(0, comma), row, col));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (width == 0) width = values.size();
    if (values.size() != width)
      throw ParseError("expected " + std::to_string(width) + " columns, found " + std::to_string(values.size()), row,
                       values.size());
    rows.push_back(std::move(values));
  }
  if (in.bad()) throw IoError("read failure on " + path);
  return rows;
}

struct ColumnRange {
  std::vector<double> lo;
  std::vector<double> hi;
};

inline double scaled(double x, double lo, double hi) { return hi > lo ? (x - lo) / (hi - lo) : 0.0; }

// Features (last column dropped) with an appended constant-1 bias column.
inline DataBlock to_block(const std::vector<std::vector<double>>& rows, const std::vector<std::size_t>& which,
                          std::size_t features, const ColumnRange* range) {
  DataBlock block;
  block.X.resize(static_cast<Index>(which.size()), static_cast<Index>(features + 1));
  block.y.resize(static_cast<Index>(which.size()));
  for (std::size_t r = 0; r < which.size(); ++r) {
    const auto& src = rows[which[r]];
    const auto ri = static_cast<Index>(r);
    for (std::size_t j = 0; j < features; ++j) {
      const auto cj = static_cast<Index>(j);
      block.X(ri, cj) = range ? scaled(src[j], range->lo[j], range->hi[j]) : src[j];
    }
    block.X(ri, static_cast<Index>(features)) = 1.0;
    block.y[ri] = src[features];
  }
  return block;
}

}  // namespace detail

// One client per distinct combination of the first `group_prefix_cols`
// columns, in order of first appearance. Features are min-max scaled with
// training-pool statistics (reused for the test rows); targets are left as-is.
inline FederatedDataset load_csv_regression(const std::string& path, std::size_t group_prefix_cols, bool scale,
                                            const std::vector<std::string>& test_paths = {},
                                            const CsvOptions& opt = {}) {
  const auto rows = detail::read_numeric_csv(path, opt);
  if (rows.empty()) throw InvalidData("no rows in " + path);
  const std::size_t width = rows.front().size();
  if (width < 2) throw InvalidData("need at least one feature column and one target column");
  if (group_prefix_cols >= width)
    throw InvalidArgument("group_prefix_cols=" + std::to_string(group_prefix_cols) + " must be below the column count " +
                          std::to_string(width));
  const std::size_t features = width - 1;

  std::map<std::vector<double>, std::size_t> group_of;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<double> key(rows[r].begin(), rows[r].begin() + static_cast<std::ptrdiff_t>(group_prefix_cols));
    auto [it, inserted] = group_of.try_emplace(std::move(key), groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(r);
  }
  if (groups.empty()) throw InvalidData("no client groups in " + path);

  detail::ColumnRange range;
  if (scale) {
    range.lo.assign(features, 0.0);
    range.hi.assign(features, 0.0);
    for (std::size_t j = 0; j < features; ++j) {
      range.lo[j] = range.hi[j] = rows.front()[j];
      for (const auto& row : rows) {
        range.lo[j] = std::min(range.lo[j], row[j]);
        range.hi[j] = std::max(range.hi[j], row[j]);
      }
    }
  }
  const detail::ColumnRange* scaling = scale ? &range : nullptr;

  FederatedDataset data;
  data.task = Task::Regression;
  data.d = static_cast<Index>(features + 1);
  for (const auto& g : groups) data.clients.push_back(detail::to_block(rows, g, features, scaling));

  std::vector<std::vector<double>> test_rows;
  for (const auto& tp : test_paths) {
    auto more = detail::read_numeric_csv(tp, opt);
    for (auto& r : more) {
      if (r.size() != width) throw InvalidData("test file " + tp + " has a different column count");
      test_rows.push_back(std::move(r));
    }
  }
  std::vector<std::size_t> all(test_rows.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  data.test = detail::to_block(test_rows, all, features, scaling);
  validate(data);
  return data;
}

// ---------------------------------------------------------------------------
// Partitioning

namespace detail {

// Integer counts proportional to `weights` summing exactly to `total`
// (largest remainder, ties to the lower index).
inline std::vector<std::size_t> largest_remainder(const std::vector<double>& weights, std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(total) * weights[i] / sum;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t j = 0; assigned < total; ++j, ++assigned) ++counts[remainders[j % remainders.size()].second];
  return counts;
}

}  // namespace detail

// Client sizes ~ lognormal(0, sigma2) normalized to the pool, client class
// mixes ~ Dirichlet(alpha * 1_C). Samples are dealt one at a time to a
// uniformly chosen client with remaining quota, drawing the class from that
// client's mix restricted to classes that still have samples, so the result
// is always an exact partition.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(std::span<const int> labels,
                                                                 const PartitionSpec& spec) {
  const std::size_t n = labels.size();
  const std::size_t N = spec.clients;
  if (n == 0) throw InvalidArgument("dirichlet_partition: no labels");
  if (N == 0) throw InvalidArgument("dirichlet_partition: need at least one client");
  if (N > n) throw InvalidArgument("dirichlet_partition: more clients than samples");
  if (!(spec.dirichlet_alpha > 0.0)) throw InvalidArgument("dirichlet_partition: alpha must be positive");
  if (!(spec.lognormal_sigma2 >= 0.0)) throw InvalidArgument("dirichlet_partition: sigma2 must be nonnegative");

  std::vector<std::vector<std::size_t>> parts(N);
  if (N == 1) {
    parts[0].resize(n);
    std::iota(parts[0].begin(), parts[0].end(), std::size_t{0});
    return parts;
  }

  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  if (*std::min_element(labels.begin(), labels.end()) < 0) throw InvalidArgument("negative label");

  std::mt19937_64 rng(spec.seed);

  std::vector<double> size_weights(N, 1.0);
  if (spec.lognormal_sigma2 > 0.0) {
    std::lognormal_distribution<double> size_dist(0.0, std::sqrt(spec.lognormal_sigma2));
    for (auto& w : size_weights) w = size_dist(rng);
  }
  std::vector<std::size_t> quota = detail::largest_remainder(size_weights, n);
  // Every client must hold at least one sample.
  for (std::size_t i = 0; i < N; ++i) {
    if (quota[i] == 0) {
      const auto donor = std::max_element(quota.begin(), quota.end());
      --*donor;
      quota[i] = 1;
    }
  }

  std::gamma_distribution<double> gamma(spec.dirichlet_alpha, 1.0);
  std::vector<std::vector<double>> mix(N, std::vector<double>(static_cast<std::size_t>(classes)));
  for (auto& m : mix) {
    double total = 0.0;
    for (auto& x : m) total += (x = gamma(rng));
    if (total > 0.0) {
      for (auto& x : m) x /= total;
    } else {
      std::fill(m.begin(), m.end(), 1.0 / classes);
    }
  }

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  for (auto& bucket : by_class) std::shuffle(bucket.begin(), bucket.end(), rng);

  std::vector<std::size_t> active(N);
  std::iota(active.begin(), active.end(), std::size_t{0});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> weights(static_cast<std::size_t>(classes));
  while (!active.empty()) {
    const std::size_t slot = std::uniform_int_distribution<std::size_t>(0, active.size() - 1)(rng);
    const std::size_t client = active[slot];

    double mass = 0.0;
    for (std::size_t c = 0; c < weights.size(); ++c) mass += (weights[c] = by_class[c].empty() ? 0.0 : mix[client][c]);
    if (mass <= 0.0) {
      for (std::size_t c = 0; c < weights.size(); ++c) mass += (weights[c] = by_class[c].empty() ? 0.0 : 1.0);
    }
    const double u = unit(rng) * mass;
    std::size_t chosen = weights.size();
    double acc = 0.0;
    for (std::size_t c = 0; c < weights.size(); ++c) {
      if (weights[c] <= 0.0) continue;
      chosen = c;
      acc += weights[c];
      if (u < acc) break;
    }

    parts[client].push_back(by_class[chosen].back());
    by_class[chosen].pop_back();
    if (--quota[client] == 0) {
      active[slot] = active.back();
      active.pop_back();
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  check_partition(parts, n);
  return parts;
}

// ---------------------------------------------------------------------------
// Synthetic generators

struct SynthRegressionSpec {
  std::size_t clients = 10;
  std::size_t d = 50;  // bias column included
  std::size_t k_true = 5;
  double hetero = 0.0;  // in [0,1]
  double noise_sigma = 0.0;
  std::size_t n_per_client = 100;
  std::size_t n_test = 200;
  std::uint64_t seed = 0;

  bool operator==(const SynthRegressionSpec&) const = default;
};

// Feature means of client i are shifted by hetero * kClientMeanScale * m_i
// with m_i standard normal.
inline constexpr double kClientMeanScale = 2.0;

struct SynthRegression {
  FederatedDataset data;
  ModelVector w_true;
};

inline SynthRegression synth_regression(const SynthRegressionSpec& s) {
  if (s.clients == 0 || s.d < 2 || s.n_per_client == 0) throw InvalidArgument("synth_regression: invalid sizes");
  if (s.k_true < 1 || s.k_true > s.d) throw InvalidArgument("synth_regression: k_true must lie in [1, d]");
  if (!(s.hetero >= 0.0 && s.hetero <= 1.0)) throw InvalidArgument("synth_regression: hetero must lie in [0,1]");
  if (!(s.noise_sigma >= 0.0)) throw InvalidArgument("synth_regression: noise_sigma must be nonnegative");

  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Index>(s.d);

  ModelVector w_true = ModelVector::Zero(d);
  std::vector<Index> coords(s.d);
  std::iota(coords.begin(), coords.end(), Index{0});
  std::shuffle(coords.begin(), coords.end(), rng);
  for (std::size_t j = 0; j < s.k_true; ++j) w_true[coords[j]] = normal(rng);

  std::vector<Eigen::VectorXd> means(s.clients, Eigen::VectorXd::Zero(d - 1));
  for (auto& m : means)
    for (Index j = 0; j < d - 1; ++j) m[j] = s.hetero * kClientMeanScale * normal(rng);

  auto draw = [&](DataBlock& block, Index row, const Eigen::VectorXd& mean) {
    for (Index j = 0; j < d - 1; ++j) block.X(row, j) = mean[j] + normal(rng);
    block.X(row, d - 1) = 1.0;
    const double noise = s.noise_sigma > 0.0 ? s.noise_sigma * normal(rng) : 0.0;
    block.y[row] = block.X.row(row).dot(w_true) + noise;
  };

  FederatedDataset data;
  data.task = Task::Regression;
  data.d = d;
  for (std::size_t i = 0; i < s.clients; ++i) {
    DataBlock block{Matrix(static_cast<Index>(s.n_per_client), d), Eigen::VectorXd(static_cast<Index>(s.n_per_client))};
    for (Index r = 0; r < block.X.rows(); ++r) draw(block, r, means[i]);
    data.clients.push_back(std::move(block));
  }
  // Test rows come from the same client distributions, each row from a
  // uniformly drawn client.
  std::uniform_int_distribution<std::size_t> pick(0, s.clients - 1);
  data.test = DataBlock{Matrix(static_cast<Index>(s.n_test), d), Eigen::VectorXd(static_cast<Index>(s.n_test))};
  for (Index r = 0; r < data.test.X.rows(); ++r) draw(data.test, r, means[pick(rng)]);
  validate(data);
  return {std::move(data), std::move(w_true)};
}

struct SynthClassificationSpec {
  std::size_t d = 20;  // bias column included
  int classes = 2;
  PartitionSpec partition;
  std::size_t n_total = 1000;
  std::size_t n_test = 200;
  double class_separation = 3.0;  // std of the class means around the origin
  std::uint64_t seed = 0;

  bool operator==(const SynthClassificationSpec&) const = default;
};

// Gaussian class-conditional pool (one mean per class, unit covariance),
// labels balanced round-robin, split by dirichlet_partition.
inline FederatedDataset synth_classification(const SynthClassificationSpec& s) {
  if (s.classes < 2) throw InvalidArgument("synth_classification: need C >= 2");
  if (s.d < 2 || s.n_total == 0) throw InvalidArgument("synth_classification: invalid sizes");
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto d = static_cast<Index>(s.d);

  Eigen::MatrixXd means(s.classes, d - 1);
  for (Index c = 0; c < means.rows(); ++c)
    for (Index j = 0; j < d - 1; ++j) means(c, j) = s.class_separation * normal(rng);

  auto sample_block = [&](std::size_t count) {
    DataBlock block{Matrix(static_cast<Index>(count), d), Eigen::VectorXd(static_cast<Index>(count))};
    for (Index r = 0; r < block.X.rows(); ++r) {
      const auto label = static_cast<Index>(r % s.classes);
      for (Index j = 0; j < d - 1; ++j) block.X(r, j) = means(label, j) + normal(rng);
      block.X(r, d - 1) = 1.0;
      block.y[r] = static_cast<double>(label);
    }
    return block;
  };
  DataBlock pool = sample_block(s.n_total);
  DataBlock test = sample_block(s.n_test);

  const auto labels = labels_of(pool);
  auto assignment = dirichlet_partition(labels, s.partition);

  FederatedDataset data;
  data.task = Task::Classification;
  data.classes = s.classes;
  data.d = d;
  for (const auto& part : assignment) {
    DataBlock block{Matrix(static_cast<Index>(part.size()), d), Eigen::VectorXd(static_cast<Index>(part.size()))};
    for (std::size_t r = 0; r < part.size(); ++r) {
      block.X.row(static_cast<Index>(r)) = pool.X.row(static_cast<Index>(part[r]));
      block.y[static_cast<Index>(r)] = pool.y[static_cast<Index>(part[r])];
    }
    data.clients.push_back(std::move(block));
  }
  data.test = std::move(test);
  data.assignment = std::move(assignment);
  validate(data);
  return data;
}

}  // namespace fedsparse
