#pragma once

// Federated training engine: ProxSkip-style local training with control
// variates and TopK pruning at the places each variant prescribes.
//
// Per local iteration t every client i computes w~_i from (w_i, h_i). When
// the shared schedule says theta_t = 1 the clients upload w^_i, the server
// averages, and the ProxSkip variants move their control variates by
// (p/gamma) * (w_global - w^_i). Otherwise each client keeps w~_i. The
// variants differ only in which vector is pruned where:
//
//   variant                      local step   uplink w^_i     server model     h update ref
//   SparseProxSkip               STE          TopK(w~)        avg              w^
//   SparseProxSkipLocal          TopK         TopK(w~)        avg              w^
//   SparseProxSkipModified       STE          TopK(w~)        avg              w~
//   AcceleratedServerPruning     plain        w~ (dense)      TopK(avg)        w^
//   AcceleratedServerPruningMod. plain        w~ (dense)      avg, client TopK w^
//   RandProxL1                   soft         w~              avg              w^
//   FinalTopK / ProxSkipPlain    plain        w~ (dense)      avg              w^
//   FedHT                        plain        w~ (dense)      TopK(avg)        (h = 0)
//   FedIHT                       TopK         TopK(w~)        avg              (h = 0)
//   LocalGDPlain                 plain        w~ (dense)      avg              (h = 0)
//
// Only the variants whose h update uses exactly the uploaded vectors and the
// unpruned average keep sum_i h_i = 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsparse/accounting.hpp"
#include "fedsparse/core_ops.hpp"
#include "fedsparse/datasets.hpp"
#include "fedsparse/errors.hpp"
#include "fedsparse/objectives.hpp"

namespace fedsparse {

enum class Variant {
  SparseProxSkip,
  SparseProxSkipLocal,
  SparseProxSkipModified,
  AcceleratedServerPruning,
  AcceleratedServerPruningModified,
  RandProxL1,
  FinalTopK,
  FedHT,
  FedIHT,
  ProxSkipPlain,
  LocalGDPlain,
};

inline constexpr std::array<std::pair<Variant, std::string_view>, 11> kVariantNames{{
    {Variant::SparseProxSkip, "SparseProxSkip"},
    {Variant::SparseProxSkipLocal, "SparseProxSkipLocal"},
    {Variant::SparseProxSkipModified, "SparseProxSkipModified"},
    {Variant::AcceleratedServerPruning, "AcceleratedServerPruning"},
    {Variant::AcceleratedServerPruningModified, "AcceleratedServerPruningModified"},
    {Variant::RandProxL1, "RandProxL1"},
    {Variant::FinalTopK, "FinalTopK"},
    {Variant::FedHT, "FedHT"},
    {Variant::FedIHT, "FedIHT"},
    {Variant::ProxSkipPlain, "ProxSkipPlain"},
    {Variant::LocalGDPlain, "LocalGDPlain"},
}};

inline std::string variant_name(Variant v) {
  for (const auto& [variant, name] : kVariantNames)
    if (variant == v) return std::string(name);
  return "unknown";
}

inline Variant parse_variant(std::string_view name) {
  for (const auto& [variant, known] : kVariantNames)
    if (known == name) return variant;
  throw InvalidArgument("unknown variant '" + std::string(name) + "'");
}

enum class ScheduleMode { Deterministic, Bernoulli };
enum class LocalStep { Plain, Ste, TopK, Soft };

struct DivergenceGuard {
  double loss_factor = 1e6;    // abort once train loss exceeds this multiple of the initial loss
  double w_norm_limit = 1e8;   // abort once ||w|| exceeds this

  bool operator==(const DivergenceGuard&) const = default;
};

struct AlgorithmConfig {
  Variant variant = Variant::SparseProxSkip;
  double gamma = 1e-3;
  double p = 0.1;
  std::optional<ScheduleMode> schedule_mode;  // per-variant default when unset
  SparsityTarget sparsity = SparsityTarget::fraction(0.9);
  double lambda_l1 = 0.0;  // RandProxL1 only
  std::size_t T = 1000;    // local iterations
  std::uint64_t seed = 0;
  DivergenceGuard guard;
  std::optional<LocalStep> local_step;        // override of the variant's local step
  std::optional<Encoding> uplink_encoding;    // override of the variant's payload encoding
  unsigned value_bits = kDefaultValueBits;

  bool operator==(const AlgorithmConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Variant traits

inline bool uses_control_variates(Variant v) {
  return v != Variant::FedHT && v != Variant::FedIHT && v != Variant::LocalGDPlain;
}

inline bool prunes_uplink(Variant v) {
  return v == Variant::SparseProxSkip || v == Variant::SparseProxSkipLocal || v == Variant::SparseProxSkipModified ||
         v == Variant::FedIHT;
}

inline bool prunes_on_server(Variant v) { return v == Variant::AcceleratedServerPruning || v == Variant::FedHT; }

inline ScheduleMode default_schedule(Variant v) {
  switch (v) {
    case Variant::SparseProxSkip:
    case Variant::SparseProxSkipModified:
    case Variant::FedHT:
    case Variant::FedIHT:
    case Variant::LocalGDPlain:
      return ScheduleMode::Deterministic;
    default:
      return ScheduleMode::Bernoulli;
  }
}

inline LocalStep default_local_step(Variant v) {
  switch (v) {
    case Variant::SparseProxSkip:
    case Variant::SparseProxSkipModified:
      return LocalStep::Ste;
    case Variant::SparseProxSkipLocal:
    case Variant::FedIHT:
      return LocalStep::TopK;
    case Variant::RandProxL1:
      return LocalStep::Soft;
    default:
      return LocalStep::Plain;
  }
}

inline Encoding default_encoding(Variant v) {
  return prunes_uplink(v) || v == Variant::RandProxL1 ? Encoding::Sparse : Encoding::Dense;
}

inline ScheduleMode schedule_of(const AlgorithmConfig& c) { return c.schedule_mode.value_or(default_schedule(c.variant)); }
inline LocalStep local_step_of(const AlgorithmConfig& c) { return c.local_step.value_or(default_local_step(c.variant)); }
inline Encoding encoding_of(const AlgorithmConfig& c) { return c.uplink_encoding.value_or(default_encoding(c.variant)); }

// floor(1/p), robust to 1/p landing a hair below an integer.
inline std::size_t local_steps_per_round(double p) {
  return static_cast<std::size_t>(std::floor(1.0 / p + 1e-9));
}

inline void validate(const AlgorithmConfig& c) {
  if (!(c.gamma > 0.0) || !std::isfinite(c.gamma)) throw InvalidArgument("gamma must be positive and finite");
  if (!(c.p > 0.0 && c.p <= 1.0)) throw InvalidArgument("p must lie in (0, 1]");
  if (!(c.lambda_l1 >= 0.0) || !std::isfinite(c.lambda_l1)) throw InvalidArgument("lambda_l1 must be nonnegative");
  if (c.lambda_l1 != 0.0 && c.variant != Variant::RandProxL1)
    throw InvalidArgument("lambda_l1 is only used by RandProxL1");
  if (schedule_of(c) == ScheduleMode::Deterministic && local_steps_per_round(c.p) < 1)
    throw InvalidArgument("deterministic schedule needs floor(1/p) >= 1");
  if (c.value_bits == 0) throw InvalidArgument("value_bits must be positive");
  if (!(c.guard.loss_factor > 0.0) || !(c.guard.w_norm_limit > 0.0))
    throw InvalidArgument("divergence guard thresholds must be positive");
}

// ---------------------------------------------------------------------------
// Schedule

struct Schedule {
  std::vector<std::uint8_t> theta;

  std::size_t size() const { return theta.size(); }
  bool communicate(std::size_t t) const { return theta[t] != 0; }
  std::size_t rounds() const { return static_cast<std::size_t>(std::count(theta.begin(), theta.end(), 1)); }
};

// Stream ids for the generators derived from one run seed.
enum class SeedStream : std::uint64_t { Schedule = 1, Init = 2 };

inline std::mt19937_64 stream_rng(std::uint64_t seed, SeedStream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

// Deterministic: theta_t = 1 iff t mod floor(1/p) = 0. Bernoulli: i.i.d. coin
// flips with P(theta_t = 1) = p from the run seed.
inline Schedule make_schedule(double p, std::size_t T, ScheduleMode mode, std::uint64_t seed) {
  if (!(p > 0.0 && p <= 1.0)) throw InvalidArgument("make_schedule: p must lie in (0, 1]");
  Schedule s;
  s.theta.resize(T);
  if (mode == ScheduleMode::Deterministic) {
    const std::size_t period = local_steps_per_round(p);
    for (std::size_t t = 0; t < T; ++t) s.theta[t] = t % period == 0;
  } else if (p == 1.0) {
    std::fill(s.theta.begin(), s.theta.end(), 1);
  } else {
    auto rng = stream_rng(seed, SeedStream::Schedule);
    std::bernoulli_distribution coin(p);
    for (auto& flag : s.theta) flag = coin(rng);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Clients and local steps

struct ClientState {
  ModelVector w;        // local iterate
  ModelVector h;        // control variate
  ModelVector w_tilde;  // result of the latest local step
  const Objective* objective = nullptr;
};

// All clients start from the same w0 with h = 0.
inline std::vector<ClientState> make_clients(std::span<const Objective> objectives, const ModelVector& w0) {
  std::vector<ClientState> clients;
  clients.reserve(objectives.size());
  for (const auto& f : objectives) {
    if (f.dimension() != w0.size()) throw InvalidArgument("objective dimension does not match the model");
    clients.push_back(ClientState{w0, ModelVector::Zero(w0.size()), w0, &f});
  }
  return clients;
}

namespace detail {

inline ModelVector checked_gradient(const ClientState& c, const ModelVector& at, std::size_t iteration) {
  if (c.objective == nullptr) throw InvalidArgument("client has no objective");
  ModelVector g = c.objective->gradient(at);
  if (!g.allFinite()) throw DivergenceError("non-finite gradient", iteration);
  return g;
}

inline ModelVector checked(ModelVector v, std::size_t iteration) {
  if (!v.allFinite()) throw DivergenceError("non-finite local iterate", iteration);
  return v;
}

}  // namespace detail

// w - gamma * (grad f(w) - h)
inline ModelVector local_step_plain(const ClientState& c, double gamma, std::size_t iteration = 0) {
  ModelVector g = detail::checked_gradient(c, c.w, iteration);
  g -= c.h;
  return detail::checked(c.w - gamma * g, iteration);
}

// Straight-through estimator: the gradient is taken at TopK(w) but the dense
// iterate is updated.
inline ModelVector local_step_ste(const ClientState& c, double gamma, SparsityTarget k, std::size_t iteration = 0) {
  if (!c.w.allFinite()) throw DivergenceError("non-finite local iterate", iteration);
  ModelVector g = detail::checked_gradient(c, top_k(c.w, k), iteration);
  g -= c.h;
  return detail::checked(c.w - gamma * g, iteration);
}

// TopK(w - gamma * (grad f(w) - h)): the iterate is K-sparse after every step.
inline ModelVector local_step_topk(const ClientState& c, double gamma, SparsityTarget k, std::size_t iteration = 0) {
  return top_k(local_step_plain(c, gamma, iteration), k);
}

// soft_threshold(w - gamma * (grad f(w) - h), gamma * lambda)
inline ModelVector local_step_soft(const ClientState& c, double gamma, double lambda_l1, std::size_t iteration = 0) {
  if (!(lambda_l1 >= 0.0)) throw InvalidArgument("lambda_l1 must be nonnegative");
  return soft_threshold(local_step_plain(c, gamma, iteration), gamma * lambda_l1);
}

inline ModelVector local_step(const ClientState& c, const AlgorithmConfig& cfg, std::size_t iteration = 0) {
  switch (local_step_of(cfg)) {
    case LocalStep::Ste:
      return local_step_ste(c, cfg.gamma, cfg.sparsity, iteration);
    case LocalStep::TopK:
      return local_step_topk(c, cfg.gamma, cfg.sparsity, iteration);
    case LocalStep::Soft:
      return local_step_soft(c, cfg.gamma, cfg.lambda_l1, iteration);
    case LocalStep::Plain:
      break;
  }
  return local_step_plain(c, cfg.gamma, iteration);
}

// ---------------------------------------------------------------------------
// Rounds

struct RoundOutcome {
  ModelVector global_w;                  // what the server broadcasts
  std::vector<std::size_t> uplink_nnz;   // per client
  std::vector<std::uint64_t> uplink_payload_bits;  // per client
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;
  ControlDiagnostics diagnostics;        // after the h update
};

inline std::vector<ModelVector> control_variates(std::span<const ClientState> clients) {
  std::vector<ModelVector> h;
  h.reserve(clients.size());
  for (const auto& c : clients) h.push_back(c.h);
  return h;
}

// Client-side average of the iterates, the model the diagnostics report.
inline ModelVector mean_iterate(std::span<const ClientState> clients) {
  return pairwise_sum(clients.size(), [&](std::size_t i) { return clients[i].w; }) /
         static_cast<double>(clients.size());
}

// Upload, aggregate, update control variates, download. Expects every
// client's w_tilde to hold this iteration's local step.
inline RoundOutcome communication_round(std::span<ClientState> clients, const AlgorithmConfig& cfg,
                                        std::size_t iteration = 0) {
  if (clients.empty()) throw InvalidArgument("communication_round: no clients");
  const Variant v = cfg.variant;
  const std::size_t N = clients.size();

  std::vector<ModelVector> uploads;
  uploads.reserve(N);
  for (const auto& c : clients) uploads.push_back(prunes_uplink(v) ? top_k(c.w_tilde, cfg.sparsity) : c.w_tilde);

  RoundOutcome out;
  const Encoding encoding = encoding_of(cfg);
  for (const auto& u : uploads) {
    if (!u.allFinite()) throw DivergenceError("non-finite upload", iteration);
    out.uplink_nnz.push_back(nnz(u));
    out.uplink_payload_bits.push_back(payload_bits(u, encoding, cfg.value_bits));
    out.uplink_bits += out.uplink_payload_bits.back();
  }

  ModelVector average = pairwise_sum(N, [&](std::size_t i) { return uploads[i]; }) / static_cast<double>(N);
  if (!average.allFinite()) throw DivergenceError("non-finite aggregate", iteration);
  out.global_w = prunes_on_server(v) ? top_k(average, cfg.sparsity) : std::move(average);
  out.downlink_bits = payload_bits(out.global_w, Encoding::Sparse, cfg.value_bits);

  if (uses_control_variates(v)) {
    const double scale = cfg.p / cfg.gamma;
    for (std::size_t i = 0; i < N; ++i) {
      const ModelVector& reference = v == Variant::SparseProxSkipModified ? clients[i].w_tilde : uploads[i];
      clients[i].h += scale * (out.global_w - reference);
    }
  }

  if (v == Variant::AcceleratedServerPruningModified) {
    const ModelVector pruned = top_k(out.global_w, cfg.sparsity);
    for (auto& c : clients) c.w = pruned;
  } else {
    for (auto& c : clients) c.w = out.global_w;
  }

  const auto h = control_variates(clients);
  out.diagnostics = control_diagnostics(h, clients.front().w);
  return out;
}

// No communication: every client keeps its local step, h is untouched.
inline void skip_round(std::span<ClientState> clients) {
  for (auto& c : clients) c.w = c.w_tilde;
}

// ---------------------------------------------------------------------------
// Full runs

struct RunObserver {
  // Called for every trace row with the server model the row evaluates.
  std::function<void(const TraceRow&, const ModelVector&)> on_row;
  std::function<void(const RoundOutcome&)> on_round;
};

struct RunResult {
  ModelVector server_w;  // last server model, before the final TopK
  ModelVector final_w;   // TopK of server_w
  std::vector<TraceRow> trace;
  CommLedger ledger;
  bool diverged = false;
  std::string divergence_reason;
  Evaluation final_eval;
};

// w0 = 0 for regression; softmax weights uniform in [-1/sqrt(d), 1/sqrt(d)].
inline ModelVector initial_model(const FederatedDataset& data, std::uint64_t seed) {
  const Index dim = data.model_dimension();
  if (data.task == Task::Regression) return ModelVector::Zero(dim);
  auto rng = stream_rng(seed, SeedStream::Init);
  const double bound = 1.0 / std::sqrt(static_cast<double>(data.d));
  std::uniform_real_distribution<double> u(-bound, bound);
  ModelVector w(dim);
  for (Index i = 0; i < dim; ++i) w[i] = u(rng);
  return w;
}

// True when the seed cannot influence a run: the schedule is deterministic
// and the initial model does not draw from the seed.
inline bool seed_independent(const AlgorithmConfig& cfg, const FederatedDataset& data) {
  return schedule_of(cfg) == ScheduleMode::Deterministic && data.task == Task::Regression;
}

namespace detail {

inline TraceRow make_row(std::size_t round, std::size_t iter, const CommLedger& ledger, const Evaluation& e,
                         const ModelVector& pruned, const ControlDiagnostics& diag) {
  TraceRow row;
  row.round = round;
  row.iter = iter;
  row.uplink_bits = ledger.uplink_bits;
  row.downlink_bits = ledger.downlink_bits;
  row.train_loss = e.train_loss;
  row.test_metric = e.test_metric;
  row.sparsity = sparsity(pruned);
  row.sum_h_norm = diag.sum_h_norm;
  row.mean_h_norm = diag.mean_h_norm;
  row.w_norm = diag.w_norm;
  return row;
}

inline Evaluation evaluate_on(const ModelVector& pruned, const DataBlock& block, const FederatedDataset& data,
                              std::span<const Objective> objectives) {
  return {block_metric(pruned, block, data), global_loss(objectives, pruned)};
}

}  // namespace detail

// Runs T local iterations on the shared schedule. One trace row is recorded
// before training and one after every communication round, each evaluating
// TopK of the server model. A tripped divergence guard ends the run early
// with `diverged` set.
inline RunResult run_algorithm(const AlgorithmConfig& cfg, const FederatedDataset& data,
                               std::span<const Objective> objectives, const RunObserver& observer = {},
                               std::optional<ModelVector> w0 = std::nullopt) {
  validate(cfg);
  validate(data);
  if (objectives.size() != data.num_clients()) throw InvalidArgument("one objective per client required");

  const ModelVector start = w0 ? *w0 : initial_model(data, cfg.seed);
  if (start.size() != data.model_dimension()) throw InvalidArgument("initial model has the wrong dimension");
  const DataBlock pooled = data.test.empty() ? pooled_training_block(data) : DataBlock{};
  const DataBlock& eval_block = data.test.empty() ? pooled : data.test;

  auto clients = make_clients(objectives, start);
  const Schedule schedule = make_schedule(cfg.p, cfg.T, schedule_of(cfg), cfg.seed);

  RunResult result;
  ModelVector server = start;
  std::size_t round = 0;
  double initial_loss = 0.0;

  // Returns false when the guard trips.
  auto record = [&](std::size_t iter, const ModelVector& model, const ControlDiagnostics& diag) {
    const ModelVector pruned = top_k(model, cfg.sparsity);
    const Evaluation e = detail::evaluate_on(pruned, eval_block, data, objectives);
    const TraceRow row = detail::make_row(round, iter, result.ledger, e, pruned, diag);
    result.trace.push_back(row);
    if (observer.on_row) observer.on_row(row, model);
    if (iter == 0 && round == 0) initial_loss = e.train_loss;
    const double loss_limit = cfg.guard.loss_factor * (initial_loss > 0.0 ? initial_loss : 1.0);
    if (!std::isfinite(e.train_loss) || !std::isfinite(e.test_metric) || e.train_loss > loss_limit) {
      result.diverged = true;
      result.divergence_reason = "train loss " + std::to_string(e.train_loss) + " exceeded the guard";
    } else if (!(model.norm() <= cfg.guard.w_norm_limit)) {
      result.diverged = true;
      result.divergence_reason = "model norm exceeded the guard";
    }
    return !result.diverged;
  };

  record(0, start, control_diagnostics(control_variates(clients), start));

  std::size_t t = 0;
  try {
    for (; t < cfg.T && !result.diverged; ++t) {
      for (auto& c : clients) c.w_tilde = local_step(c, cfg, t);
      if (schedule.communicate(t)) {
        RoundOutcome outcome = communication_round(clients, cfg, t);
        result.ledger.record(outcome.uplink_bits, outcome.downlink_bits);
        ++round;
        if (observer.on_round) observer.on_round(outcome);
        if (!record(t + 1, outcome.global_w, outcome.diagnostics)) break;
        server = std::move(outcome.global_w);
      } else {
        skip_round(clients);
      }
    }
  } catch (const DivergenceError& e) {
    result.diverged = true;
    result.divergence_reason = e.what();
  }

  result.final_w = top_k(server, cfg.sparsity);
  result.server_w = std::move(server);
  result.final_eval = detail::evaluate_on(result.final_w, eval_block, data, objectives);
  return result;
}

inline RunResult run_algorithm(const AlgorithmConfig& cfg, const FederatedDataset& data, double alpha,
                               const RunObserver& observer = {}) {
  const auto objectives = make_objectives(data, alpha);
  return run_algorithm(cfg, data, objectives, observer);
}

// ---------------------------------------------------------------------------
// Fixed-point probe

// Starting every client at the optimum w*, one plain local step followed by
// dense averaging lands at w* + (gamma/N) sum_i h_i: w* is a fixed point only
// when the control variates sum to zero.
inline ModelVector fixed_point_probe(std::span<const Objective> objectives, const ModelVector& w_star,
                                     std::span<const ModelVector> h, double gamma, double optimality_tol = 1e-9) {
  if (objectives.empty() || objectives.size() != h.size())
    throw InvalidArgument("fixed_point_probe: need one control variate per client");
  if (!(gamma > 0.0)) throw InvalidArgument("fixed_point_probe: gamma must be positive");
  const std::size_t N = objectives.size();

  std::vector<ModelVector> grads;
  grads.reserve(N);
  for (const auto& f : objectives) grads.push_back(f.gradient(w_star));
  const ModelVector grad_sum = pairwise_sum(N, [&](std::size_t i) { return grads[i]; });
  if (!(grad_sum.lpNorm<Eigen::Infinity>() <= optimality_tol))
    throw InvalidArgument("fixed_point_probe: w_star is not optimal (|sum grad| = " +
                          std::to_string(grad_sum.lpNorm<Eigen::Infinity>()) + ")");

  return pairwise_sum(N, [&](std::size_t i) -> ModelVector {
           if (h[i].size() != w_star.size()) throw InvalidArgument("fixed_point_probe: h dimension mismatch");
           return w_star - gamma * (grads[i] - h[i]);
         }) /
         static_cast<double>(N);
}

}  // namespace fedsparse
