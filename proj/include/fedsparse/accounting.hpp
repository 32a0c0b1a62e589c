#pragma once

// Communication-cost bookkeeping and evaluation metrics.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsparse/core_ops.hpp"
#include "fedsparse/datasets.hpp"
#include "fedsparse/errors.hpp"
#include "fedsparse/objectives.hpp"

namespace fedsparse {

enum class Encoding { Dense, Sparse };

inline constexpr unsigned kDefaultValueBits = 32;

// ceil(log2(d)): bits needed to address one of d coordinates.
inline unsigned index_bits(std::size_t d) {
  unsigned bits = 0;
  while ((std::uint64_t{1} << bits) < d) ++bits;
  return bits;
}

// Dense payloads cost value_bits * d. Sparse payloads are coordinate lists:
// nnz * (value_bits + ceil(log2 d)).
inline std::uint64_t payload_bits(const ModelVector& v, Encoding encoding, unsigned value_bits = kDefaultValueBits) {
  const auto d = static_cast<std::size_t>(v.size());
  if (encoding == Encoding::Dense) return std::uint64_t{value_bits} * d;
  return std::uint64_t{nnz(v)} * (value_bits + index_bits(d));
}

struct CommLedger {
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> history;  // per round (uplink, downlink)

  void record(std::uint64_t uplink, std::uint64_t downlink) {
    uplink_bits += uplink;
    downlink_bits += downlink;
    history.emplace_back(uplink, downlink);
  }
};

struct TraceRow {
  std::size_t round = 0;  // communication rounds completed
  std::size_t iter = 0;   // local iterations completed
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;
  double train_loss = 0.0;
  double test_metric = 0.0;
  double sparsity = 0.0;
  double sum_h_norm = 0.0;
  double mean_h_norm = 0.0;
  double w_norm = 0.0;

  bool operator==(const TraceRow&) const = default;
};

inline double r_squared(std::span<const double> pred, std::span<const double> y) {
  if (pred.size() != y.size()) throw InvalidArgument("r_squared: length mismatch");
  if (y.size() < 2) throw InvalidArgument("r_squared: need at least two samples");
  double mean = 0.0;
  for (double v : y) mean += v;
  mean /= static_cast<double>(y.size());
  double ss_res = 0.0;
  double ss_tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - pred[i]) * (y[i] - pred[i]);
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  if (ss_tot == 0.0) throw UndefinedMetric("r_squared: targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

inline double accuracy(std::span<const int> predicted, std::span<const int> y) {
  if (predicted.size() != y.size()) throw InvalidArgument("accuracy: length mismatch");
  if (y.empty()) throw UndefinedMetric("accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hits += predicted[i] == y[i];
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

// Test metric of w on one block: R^2 for regression, accuracy for
// classification.
inline double block_metric(const ModelVector& w, const DataBlock& block, const FederatedDataset& data) {
  if (data.task == Task::Regression) {
    if (w.size() != block.X.cols()) throw InvalidArgument("block_metric: dimension mismatch");
    const Eigen::VectorXd pred = block.X * w;
    return r_squared(std::span<const double>(pred.data(), static_cast<std::size_t>(pred.size())),
                     std::span<const double>(block.y.data(), static_cast<std::size_t>(block.y.size())));
  }
  if (w.size() != block.X.cols() * data.classes) throw InvalidArgument("block_metric: dimension mismatch");
  const Eigen::MatrixXd logits = block.X * Eigen::Map<const Eigen::MatrixXd>(w.data(), block.X.cols(), data.classes);
  std::vector<int> predicted(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    logits.row(i).maxCoeff(&best);
    predicted[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  const auto labels = labels_of(block);
  return accuracy(predicted, labels);
}

struct Evaluation {
  double test_metric = 0.0;
  double train_loss = 0.0;
};

// Pools all client blocks into one; used when a dataset has no test rows.
inline DataBlock pooled_training_block(const FederatedDataset& data) {
  DataBlock pool{Matrix(static_cast<Index>(data.total_samples()), data.d),
                 Eigen::VectorXd(static_cast<Index>(data.total_samples()))};
  Index at = 0;
  for (const auto& c : data.clients) {
    pool.X.middleRows(at, c.rows()) = c.X;
    pool.y.segment(at, c.rows()) = c.y;
    at += c.rows();
  }
  return pool;
}

// Every reported number is computed on top_k(w, K): models are pruned to the
// target sparsity before any evaluation, whatever the variant. The metric is
// taken on the test block, or on the pooled training data if there is none.
inline Evaluation evaluate_pruned(const ModelVector& w, SparsityTarget k, const FederatedDataset& data,
                                  std::span<const Objective> objectives) {
  const ModelVector pruned = top_k(w, k);
  Evaluation e;
  e.test_metric = data.test.empty() ? block_metric(pruned, pooled_training_block(data), data)
                                    : block_metric(pruned, data.test, data);
  e.train_loss = global_loss(objectives, pruned);
  return e;
}

struct ControlDiagnostics {
  double sum_h_norm = 0.0;
  double mean_h_norm = 0.0;
  double w_norm = 0.0;
};

// (||sum_i h_i||_2, mean_i ||h_i||_2, ||w||_2), sums in fixed pairwise order.
inline ControlDiagnostics control_diagnostics(std::span<const ModelVector> h, const ModelVector& w) {
  if (h.empty()) throw InvalidArgument("control_diagnostics: no clients");
  ControlDiagnostics out;
  out.sum_h_norm = pairwise_sum(h.size(), [&h](std::size_t i) { return h[i]; }).norm();
  double total = 0.0;
  for (const auto& hi : h) total += hi.norm();
  out.mean_h_norm = total / static_cast<double>(h.size());
  out.w_norm = w.norm();
  return out;
}

// ---------------------------------------------------------------------------
// Bits-to-threshold tables

enum class MetricColumn { TestMetric, TrainLoss };

struct NamedTrace {
  std::string name;
  std::vector<TraceRow> rows;
};

struct SpeedupCell {
  std::optional<std::uint64_t> bits;  // absent: threshold never reached
  std::optional<double> speedup;      // baseline bits / method bits
};

struct SpeedupRow {
  std::string name;
  std::vector<SpeedupCell> cells;  // one per threshold
};

struct SpeedupTable {
  std::vector<double> thresholds;
  std::string baseline;
  MetricColumn column = MetricColumn::TestMetric;
  std::vector<SpeedupRow> rows;
};

// Uplink bits at the first row whose metric meets the threshold. Test metrics
// must reach it from below, train losses from above.
inline std::optional<std::uint64_t> bits_to_threshold(std::span<const TraceRow> rows, double threshold,
                                                      MetricColumn column = MetricColumn::TestMetric) {
  for (const auto& r : rows) {
    const bool met = column == MetricColumn::TestMetric ? r.test_metric >= threshold : r.train_loss <= threshold;
    if (met) return r.uplink_bits;
  }
  return std::nullopt;
}

inline SpeedupTable speedup_table(std::span<const NamedTrace> traces, std::span<const double> thresholds,
                                  const std::string& baseline, MetricColumn column = MetricColumn::TestMetric) {
  const NamedTrace* base = nullptr;
  for (const auto& t : traces)
    if (t.name == baseline) base = &t;
  if (base == nullptr) throw InvalidArgument("speedup_table: unknown baseline '" + baseline + "'");

  SpeedupTable table;
  table.thresholds.assign(thresholds.begin(), thresholds.end());
  table.baseline = baseline;
  table.column = column;
  for (const auto& t : traces) {
    SpeedupRow row{t.name, {}};
    for (double threshold : thresholds) {
      SpeedupCell cell;
      cell.bits = bits_to_threshold(t.rows, threshold, column);
      const auto base_bits = bits_to_threshold(base->rows, threshold, column);
      if (cell.bits && base_bits) {
        if (*cell.bits == *base_bits) {
          cell.speedup = 1.0;
        } else if (*cell.bits > 0) {
          cell.speedup = static_cast<double>(*base_bits) / static_cast<double>(*cell.bits);
        }
      }
      row.cells.push_back(cell);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace fedsparse
