#pragma once

// Experiment runner: JSON run specs, repeated runs, random search over
// (gamma, floor(1/p)), lambda calibration for RandProxL1, and CSV / JSON
// outputs.

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedsparse/accounting.hpp"
#include "fedsparse/core_ops.hpp"
#include "fedsparse/datasets.hpp"
#include "fedsparse/errors.hpp"
#include "fedsparse/federation.hpp"
#include "fedsparse/objectives.hpp"

namespace fedsparse {

using json = nlohmann::json;

inline constexpr const char* kOutputDirEnv = "FEDSPARSE_OUT_DIR";
inline constexpr const char* kTraceHeader =
    "round,iter,uplink_bits,downlink_bits,train_loss,test_metric,sparsity,sum_h_norm,mean_h_norm,w_norm";

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitDiverged = 3, kExitIo = 4 };

// ---------------------------------------------------------------------------
// Configuration

enum class DataSource { SynthRegression, SynthClassification, CsvRegression };

struct CsvSpec {
  std::string path;
  std::vector<std::string> test_paths;
  std::size_t group_prefix_cols = 0;
  bool scale = true;
  bool skip_header = false;

  bool operator==(const CsvSpec&) const = default;
};

struct DatasetSpec {
  DataSource source = DataSource::SynthRegression;
  SynthRegressionSpec regression;
  SynthClassificationSpec classification;
  CsvSpec csv;

  bool operator==(const DatasetSpec&) const = default;
};

struct SearchSpec {
  double gamma_min = 1e-6;
  double gamma_max = 1.0;
  std::size_t local_steps_min = 1;
  std::size_t local_steps_max = 256;
  std::size_t samples = 20;
  std::uint64_t seed = 0;

  bool operator==(const SearchSpec&) const = default;
};

struct SpeedupSpec {
  std::vector<double> thresholds;
  std::string baseline;
  MetricColumn column = MetricColumn::TestMetric;

  bool operator==(const SpeedupSpec&) const = default;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  double alpha = 1.0;  // ridge / l2 coefficient of the client objectives
  AlgorithmConfig algorithm;
  std::vector<Variant> variants;  // empty: only algorithm.variant
  bool tune_lambda = false;       // RandProxL1: calibrate lambda to the target sparsity
  std::size_t lambda_steps = 12;
  std::size_t repeats = 1;
  std::string output_dir = "out";
  std::optional<SearchSpec> search;
  std::optional<SpeedupSpec> speedup;
  std::size_t threads = 1;

  bool operator==(const ExperimentConfig&) const = default;

  std::vector<Variant> variant_list() const { return variants.empty() ? std::vector{algorithm.variant} : variants; }
};

namespace detail {

template <class E, std::size_t N>
std::string enum_name(E value, const std::array<std::pair<E, const char*>, N>& table) {
  for (const auto& [e, name] : table)
    if (e == value) return name;
  return "unknown";
}

template <class E, std::size_t N>
E enum_parse(const std::string& text, const std::array<std::pair<E, const char*>, N>& table,
             const std::string& field) {
  for (const auto& [e, name] : table)
    if (text == name) return e;
  std::string known;
  for (const auto& [e, name] : table) known += (known.empty() ? "" : ", ") + std::string(name);
  throw ConfigError(field + ": unknown value '" + text + "' (expected one of " + known + ")");
}

inline constexpr std::array<std::pair<DataSource, const char*>, 3> kSources{{
    {DataSource::SynthRegression, "synth_regression"},
    {DataSource::SynthClassification, "synth_classification"},
    {DataSource::CsvRegression, "csv_regression"},
}};
inline constexpr std::array<std::pair<ScheduleMode, const char*>, 2> kSchedules{{
    {ScheduleMode::Deterministic, "deterministic"},
    {ScheduleMode::Bernoulli, "bernoulli"},
}};
inline constexpr std::array<std::pair<LocalStep, const char*>, 4> kLocalSteps{{
    {LocalStep::Plain, "plain"},
    {LocalStep::Ste, "ste"},
    {LocalStep::TopK, "topk"},
    {LocalStep::Soft, "soft"},
}};
inline constexpr std::array<std::pair<Encoding, const char*>, 2> kEncodings{{
    {Encoding::Dense, "dense"},
    {Encoding::Sparse, "sparse"},
}};
inline constexpr std::array<std::pair<MetricColumn, const char*>, 2> kColumns{{
    {MetricColumn::TestMetric, "test_metric"},
    {MetricColumn::TrainLoss, "train_loss"},
}};

// Reads the keys of one JSON object, remembering which were consumed so that
// leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    used_.insert(key);
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
  }

  template <class T>
  T require(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(field(key) + ": required");
    return get<T>(key, T{});
  }

  void finish() const {
    std::vector<std::string> unknown;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) unknown.push_back(field(it.key()));
    if (!unknown.empty()) {
      std::string list;
      for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
      throw ConfigError("unknown keys: " + list);
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void require_that(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field + ": " + message);
}

inline SparsityTarget parse_sparsity(const json& j, const std::string& field) {
  if (j.is_number()) {
    const double s = j.get<double>();
    require_that(s >= 0.0 && s < 1.0, field, "fraction must lie in [0, 1)");
    return SparsityTarget::fraction(s);
  }
  ObjectReader r(j, field);
  SparsityTarget out = SparsityTarget::dense();
  if (r.has("count")) {
    const auto k = r.get<std::int64_t>("count", 0);
    require_that(k >= 1, r.field("count"), "must be at least 1");
    out = SparsityTarget::count(static_cast<std::size_t>(k));
  } else {
    const double s = r.require<double>("fraction");
    require_that(s >= 0.0 && s < 1.0, r.field("fraction"), "must lie in [0, 1)");
    out = SparsityTarget::fraction(s);
  }
  r.finish();
  return out;
}

inline json sparsity_to_json(const SparsityTarget& s) {
  if (s.mode() == SparsityTarget::Mode::Count) return json{{"count", static_cast<std::size_t>(s.value())}};
  return json{{"fraction", s.value()}};
}

template <class E, std::size_t N>
std::optional<E> parse_auto(ObjectReader& r, const std::string& key,
                            const std::array<std::pair<E, const char*>, N>& table) {
  const auto text = r.get<std::string>(key, "auto");
  if (text == "auto") return std::nullopt;
  return enum_parse(text, table, r.field(key));
}

template <class E, std::size_t N>
std::string auto_name(const std::optional<E>& value, const std::array<std::pair<E, const char*>, N>& table) {
  return value ? enum_name(*value, table) : "auto";
}

inline PartitionSpec parse_partition(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  PartitionSpec p;
  p.clients = r.get<std::size_t>("clients", p.clients);
  p.dirichlet_alpha = r.get<double>("dirichlet_alpha", p.dirichlet_alpha);
  p.lognormal_sigma2 = r.get<double>("lognormal_sigma2", p.lognormal_sigma2);
  p.seed = r.get<std::uint64_t>("seed", p.seed);
  require_that(p.clients >= 1, r.field("clients"), "must be at least 1");
  require_that(p.dirichlet_alpha > 0.0, r.field("dirichlet_alpha"), "must be positive");
  require_that(p.lognormal_sigma2 >= 0.0, r.field("lognormal_sigma2"), "must be nonnegative");
  r.finish();
  return p;
}

inline DatasetSpec parse_dataset(const json& j) {
  ObjectReader r(j, "dataset");
  DatasetSpec ds;
  ds.source = enum_parse(r.require<std::string>("source"), kSources, r.field("source"));
  switch (ds.source) {
    case DataSource::SynthRegression: {
      auto& s = ds.regression;
      s.clients = r.get<std::size_t>("clients", s.clients);
      s.d = r.get<std::size_t>("d", s.d);
      s.k_true = r.get<std::size_t>("k_true", s.k_true);
      s.hetero = r.get<double>("hetero", s.hetero);
      s.noise_sigma = r.get<double>("noise_sigma", s.noise_sigma);
      s.n_per_client = r.get<std::size_t>("n_per_client", s.n_per_client);
      s.n_test = r.get<std::size_t>("n_test", s.n_test);
      s.seed = r.get<std::uint64_t>("seed", s.seed);
      require_that(s.clients >= 1, r.field("clients"), "must be at least 1");
      require_that(s.d >= 2, r.field("d"), "must be at least 2");
      require_that(s.k_true >= 1 && s.k_true <= s.d, r.field("k_true"), "must lie in [1, d]");
      require_that(s.hetero >= 0.0 && s.hetero <= 1.0, r.field("hetero"), "must lie in [0, 1]");
      require_that(s.noise_sigma >= 0.0, r.field("noise_sigma"), "must be nonnegative");
      require_that(s.n_per_client >= 1, r.field("n_per_client"), "must be at least 1");
      break;
    }
    case DataSource::SynthClassification: {
      auto& s = ds.classification;
      s.d = r.get<std::size_t>("d", s.d);
      s.classes = r.get<int>("classes", s.classes);
      s.n_total = r.get<std::size_t>("n_total", s.n_total);
      s.n_test = r.get<std::size_t>("n_test", s.n_test);
      s.class_separation = r.get<double>("class_separation", s.class_separation);
      s.seed = r.get<std::uint64_t>("seed", s.seed);
      if (r.has("partition")) s.partition = parse_partition(r.raw("partition"), r.field("partition"));
      require_that(s.d >= 2, r.field("d"), "must be at least 2");
      require_that(s.classes >= 2, r.field("classes"), "must be at least 2");
      require_that(s.n_total >= s.partition.clients, r.field("n_total"), "must be at least the client count");
      break;
    }
    case DataSource::CsvRegression: {
      auto& s = ds.csv;
      s.path = r.require<std::string>("path");
      s.test_paths = r.get<std::vector<std::string>>("test_paths", s.test_paths);
      s.group_prefix_cols = r.get<std::size_t>("group_prefix_cols", s.group_prefix_cols);
      s.scale = r.get<bool>("scale", s.scale);
      s.skip_header = r.get<bool>("skip_header", s.skip_header);
      break;
    }
  }
  r.finish();
  return ds;
}

inline json dataset_to_json(const DatasetSpec& ds) {
  json j{{"source", enum_name(ds.source, kSources)}};
  switch (ds.source) {
    case DataSource::SynthRegression: {
      const auto& s = ds.regression;
      j.update(json{{"clients", s.clients},
                    {"d", s.d},
                    {"k_true", s.k_true},
                    {"hetero", s.hetero},
                    {"noise_sigma", s.noise_sigma},
                    {"n_per_client", s.n_per_client},
                    {"n_test", s.n_test},
                    {"seed", s.seed}});
      break;
    }
    case DataSource::SynthClassification: {
      const auto& s = ds.classification;
      j.update(json{{"d", s.d},
                    {"classes", s.classes},
                    {"n_total", s.n_total},
                    {"n_test", s.n_test},
                    {"class_separation", s.class_separation},
                    {"seed", s.seed},
                    {"partition",
                     {{"clients", s.partition.clients},
                      {"dirichlet_alpha", s.partition.dirichlet_alpha},
                      {"lognormal_sigma2", s.partition.lognormal_sigma2},
                      {"seed", s.partition.seed}}}});
      break;
    }
    case DataSource::CsvRegression: {
      const auto& s = ds.csv;
      j.update(json{{"path", s.path},
                    {"test_paths", s.test_paths},
                    {"group_prefix_cols", s.group_prefix_cols},
                    {"scale", s.scale},
                    {"skip_header", s.skip_header}});
      break;
    }
  }
  return j;
}

inline Variant parse_variant_field(ObjectReader& r) {
  const auto name = r.get<std::string>("variant", "SparseProxSkip");
  try {
    return parse_variant(name);
  } catch (const InvalidArgument& e) {
    throw ConfigError(r.field("variant") + ": " + e.what());
  }
}

inline AlgorithmConfig parse_algorithm(const json& j, bool& tune_lambda) {
  ObjectReader r(j, "algorithm");
  AlgorithmConfig a;
  a.variant = parse_variant_field(r);
  a.gamma = r.get<double>("gamma", a.gamma);
  a.p = r.get<double>("p", a.p);
  a.schedule_mode = parse_auto(r, "schedule", kSchedules);
  if (r.has("sparsity")) a.sparsity = parse_sparsity(r.raw("sparsity"), r.field("sparsity"));
  if (r.has("lambda_l1")) {
    const json& lam = r.raw("lambda_l1");
    if (lam.is_string()) {
      require_that(lam.get<std::string>() == "auto", r.field("lambda_l1"), "must be a number or \"auto\"");
      tune_lambda = true;
    } else {
      require_that(lam.is_number(), r.field("lambda_l1"), "must be a number or \"auto\"");
      a.lambda_l1 = lam.get<double>();
    }
  }
  a.T = r.get<std::size_t>("iterations", a.T);
  a.seed = r.get<std::uint64_t>("seed", a.seed);
  a.local_step = parse_auto(r, "local_step", kLocalSteps);
  a.uplink_encoding = parse_auto(r, "uplink_encoding", kEncodings);
  a.value_bits = r.get<unsigned>("value_bits", a.value_bits);
  if (r.has("divergence_guard")) {
    ObjectReader g(r.raw("divergence_guard"), r.field("divergence_guard"));
    a.guard.loss_factor = g.get<double>("loss_factor", a.guard.loss_factor);
    a.guard.w_norm_limit = g.get<double>("w_norm_limit", a.guard.w_norm_limit);
    require_that(a.guard.loss_factor > 0.0, g.field("loss_factor"), "must be positive");
    require_that(a.guard.w_norm_limit > 0.0, g.field("w_norm_limit"), "must be positive");
    g.finish();
  }
  require_that(a.gamma > 0.0 && std::isfinite(a.gamma), r.field("gamma"), "must be positive");
  require_that(a.p > 0.0 && a.p <= 1.0, r.field("p"), "must lie in (0, 1]");
  require_that(a.lambda_l1 >= 0.0, r.field("lambda_l1"), "must be nonnegative");
  require_that(a.value_bits >= 1, r.field("value_bits"), "must be positive");
  r.finish();
  return a;
}

inline json algorithm_to_json(const AlgorithmConfig& a, bool tune_lambda) {
  return json{{"variant", variant_name(a.variant)},
              {"gamma", a.gamma},
              {"p", a.p},
              {"schedule", auto_name(a.schedule_mode, kSchedules)},
              {"sparsity", sparsity_to_json(a.sparsity)},
              {"lambda_l1", tune_lambda ? json("auto") : json(a.lambda_l1)},
              {"iterations", a.T},
              {"seed", a.seed},
              {"local_step", auto_name(a.local_step, kLocalSteps)},
              {"uplink_encoding", auto_name(a.uplink_encoding, kEncodings)},
              {"value_bits", a.value_bits},
              {"divergence_guard", {{"loss_factor", a.guard.loss_factor}, {"w_norm_limit", a.guard.w_norm_limit}}}};
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  detail::ObjectReader r(j, "");
  ExperimentConfig cfg;
  cfg.dataset = detail::parse_dataset((r.has("dataset") ? r.raw("dataset") : throw ConfigError("dataset: required")));
  if (r.has("objective")) {
    detail::ObjectReader o(r.raw("objective"), "objective");
    cfg.alpha = o.get<double>("alpha", cfg.alpha);
    detail::require_that(cfg.alpha >= 0.0, o.field("alpha"), "must be nonnegative");
    o.finish();
  }
  if (r.has("algorithm")) cfg.algorithm = detail::parse_algorithm(r.raw("algorithm"), cfg.tune_lambda);
  if (r.has("variants")) {
    for (const auto& name : r.get<std::vector<std::string>>("variants", {})) {
      try {
        cfg.variants.push_back(parse_variant(name));
      } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("variants: ") + e.what());
      }
    }
  }
  cfg.lambda_steps = r.get<std::size_t>("lambda_steps", cfg.lambda_steps);
  cfg.repeats = r.get<std::size_t>("repeats", cfg.repeats);
  cfg.output_dir = r.get<std::string>("output_dir", cfg.output_dir);
  cfg.threads = r.get<std::size_t>("threads", cfg.threads);
  detail::require_that(cfg.repeats >= 1, "repeats", "must be at least 1");
  detail::require_that(cfg.threads >= 1, "threads", "must be at least 1");
  if (r.has("search")) {
    detail::ObjectReader s(r.raw("search"), "search");
    SearchSpec spec;
    spec.gamma_min = s.get<double>("gamma_min", spec.gamma_min);
    spec.gamma_max = s.get<double>("gamma_max", spec.gamma_max);
    spec.local_steps_min = s.get<std::size_t>("local_steps_min", spec.local_steps_min);
    spec.local_steps_max = s.get<std::size_t>("local_steps_max", spec.local_steps_max);
    spec.samples = s.get<std::size_t>("samples", spec.samples);
    spec.seed = s.get<std::uint64_t>("seed", spec.seed);
    detail::require_that(spec.gamma_min > 0.0 && spec.gamma_min <= spec.gamma_max, s.field("gamma_min"),
                         "need 0 < gamma_min <= gamma_max");
    detail::require_that(spec.local_steps_min >= 1 && spec.local_steps_min <= spec.local_steps_max,
                         s.field("local_steps_min"), "need 1 <= local_steps_min <= local_steps_max");
    detail::require_that(spec.samples >= 1, s.field("samples"), "must be at least 1");
    s.finish();
    cfg.search = spec;
  }
  if (r.has("speedup")) {
    detail::ObjectReader s(r.raw("speedup"), "speedup");
    SpeedupSpec spec;
    spec.thresholds = s.require<std::vector<double>>("thresholds");
    spec.baseline = s.require<std::string>("baseline");
    spec.column = detail::enum_parse(s.get<std::string>("column", "test_metric"), detail::kColumns, s.field("column"));
    s.finish();
    cfg.speedup = spec;
  }
  r.finish();
  return cfg;
}

inline json config_to_json(const ExperimentConfig& cfg) {
  json j{{"dataset", detail::dataset_to_json(cfg.dataset)},
         {"objective", {{"alpha", cfg.alpha}}},
         {"algorithm", detail::algorithm_to_json(cfg.algorithm, cfg.tune_lambda)},
         {"lambda_steps", cfg.lambda_steps},
         {"repeats", cfg.repeats},
         {"output_dir", cfg.output_dir},
         {"threads", cfg.threads}};
  json variants = json::array();
  for (Variant v : cfg.variants) variants.push_back(variant_name(v));
  j["variants"] = variants;
  if (cfg.search) {
    const auto& s = *cfg.search;
    j["search"] = {{"gamma_min", s.gamma_min},
                   {"gamma_max", s.gamma_max},
                   {"local_steps_min", s.local_steps_min},
                   {"local_steps_max", s.local_steps_max},
                   {"samples", s.samples},
                   {"seed", s.seed}};
  }
  if (cfg.speedup) {
    j["speedup"] = {{"thresholds", cfg.speedup->thresholds},
                    {"baseline", cfg.speedup->baseline},
                    {"column", detail::enum_name(cfg.speedup->column, detail::kColumns)}};
  }
  return j;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str());
}

// ---------------------------------------------------------------------------
// Execution

inline FederatedDataset build_dataset(const DatasetSpec& spec) {
  switch (spec.source) {
    case DataSource::SynthRegression:
      return synth_regression(spec.regression).data;
    case DataSource::SynthClassification:
      return synth_classification(spec.classification);
    case DataSource::CsvRegression:
      return load_csv_regression(spec.csv.path, spec.csv.group_prefix_cols, spec.csv.scale, spec.csv.test_paths,
                                 CsvOptions{spec.csv.skip_header});
  }
  throw InvalidArgument("unknown dataset source");
}

struct RepeatResult {
  std::uint64_t seed = 0;
  double final_test_metric = 0.0;
  double final_train_loss = 0.0;
  double final_sparsity = 0.0;
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;
  std::size_t rounds = 0;
  bool diverged = false;
  std::string divergence_reason;
  std::string trace_file;
  ModelVector final_w;
  std::vector<TraceRow> trace;
};

struct VariantSummary {
  AlgorithmConfig config;  // as run, lambda included
  std::vector<RepeatResult> repeats;
  double mean_test_metric = 0.0;
  double stderr_test_metric = 0.0;  // sample stddev / sqrt(repeats)
  double mean_train_loss = 0.0;
  double mean_uplink_bits = 0.0;
  bool any_diverged = false;
};

struct SearchCandidate {
  double gamma = 0.0;
  std::size_t local_steps = 1;  // floor(1/p); p = 1 / local_steps
};

struct CandidateResult {
  Variant variant = Variant::SparseProxSkip;
  SearchCandidate candidate;
  double mean_test_metric = 0.0;
  double mean_uplink_bits = 0.0;
  bool any_diverged = false;
};

struct RunSummary {
  ExperimentConfig config;
  std::vector<VariantSummary> variants;  // best candidate per variant in search mode
  std::vector<CandidateResult> candidates;  // search mode only
  std::optional<SpeedupTable> speedup;

  bool any_diverged() const {
    return std::any_of(variants.begin(), variants.end(), [](const auto& v) { return v.any_diverged; });
  }
};

namespace detail {

// Runs `count` jobs on up to `threads` workers; results land in fixed slots
// so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline RepeatResult to_repeat(std::uint64_t seed, RunResult run) {
  RepeatResult r;
  r.seed = seed;
  r.final_test_metric = run.final_eval.test_metric;
  r.final_train_loss = run.final_eval.train_loss;
  r.final_sparsity = sparsity(run.final_w);
  r.uplink_bits = run.ledger.uplink_bits;
  r.downlink_bits = run.ledger.downlink_bits;
  r.rounds = run.ledger.history.size();
  r.diverged = run.diverged;
  r.divergence_reason = std::move(run.divergence_reason);
  r.final_w = std::move(run.final_w);
  r.trace = std::move(run.trace);
  return r;
}

inline void summarize(VariantSummary& s) {
  const auto n = static_cast<double>(s.repeats.size());
  double metric = 0.0;
  double loss = 0.0;
  double bits = 0.0;
  for (const auto& r : s.repeats) {
    metric += r.final_test_metric;
    loss += r.final_train_loss;
    bits += static_cast<double>(r.uplink_bits);
    s.any_diverged = s.any_diverged || r.diverged;
  }
  s.mean_test_metric = metric / n;
  s.mean_train_loss = loss / n;
  s.mean_uplink_bits = bits / n;
  s.stderr_test_metric = 0.0;
  if (s.repeats.size() > 1) {
    // Welford: identical repeats give exactly zero spread.
    double mean = 0.0;
    double m2 = 0.0;
    double k = 0.0;
    for (const auto& r : s.repeats) {
      k += 1.0;
      const double delta = r.final_test_metric - mean;
      mean += delta / k;
      m2 += delta * (r.final_test_metric - mean);
    }
    s.stderr_test_metric = std::sqrt(m2 / (n - 1.0)) / std::sqrt(n);
  }
}

}  // namespace detail

// Sparsity the final server model reaches for a given lambda (before the
// final TopK).
inline double lambda_sparsity(AlgorithmConfig cfg, double lambda, const FederatedDataset& data,
                              std::span<const Objective> objectives) {
  cfg.lambda_l1 = lambda;
  const RunResult run = run_algorithm(cfg, data, objectives);
  if (run.diverged) return 0.0;
  return sparsity(run.server_w);
}

// Smallest lambda (up to the bisection resolution) whose run ends at least as
// sparse as the target. Bisection is geometric, starting from the largest
// average gradient entry at w0 and growing by 4x until the target is met.
inline double calibrate_lambda(const AlgorithmConfig& cfg, const FederatedDataset& data,
                               std::span<const Objective> objectives, std::size_t steps) {
  const auto d = static_cast<std::size_t>(data.model_dimension());
  const double target = 1.0 - static_cast<double>(cfg.sparsity.resolve(d)) / static_cast<double>(d);
  const ModelVector w0 = initial_model(data, cfg.seed);
  const ModelVector grad =
      pairwise_sum(objectives.size(), [&](std::size_t i) { return objectives[i].gradient(w0); }) /
      static_cast<double>(objectives.size());
  double hi = std::max(grad.lpNorm<Eigen::Infinity>(), 1e-12);
  for (int grow = 0; grow < 40 && lambda_sparsity(cfg, hi, data, objectives) < target; ++grow) hi *= 4.0;
  double lo = hi * 1e-6;
  for (std::size_t s = 0; s < steps; ++s) {
    const double mid = std::sqrt(lo * hi);
    if (lambda_sparsity(cfg, mid, data, objectives) >= target) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

// Runs every variant `repeats` times with seeds seed, seed+1, ... on one
// dataset. Nothing is written.
inline std::vector<VariantSummary> run_variants(const ExperimentConfig& cfg, const FederatedDataset& data,
                                                std::span<const Objective> objectives,
                                                const std::vector<AlgorithmConfig>& algorithms) {
  std::vector<VariantSummary> out(algorithms.size());
  for (std::size_t v = 0; v < algorithms.size(); ++v) {
    out[v].config = algorithms[v];
    if (cfg.tune_lambda && algorithms[v].variant == Variant::RandProxL1)
      out[v].config.lambda_l1 = calibrate_lambda(algorithms[v], data, objectives, cfg.lambda_steps);
    out[v].repeats.resize(cfg.repeats);
  }
  // Seed-independent variants run once; the other repeats are copies.
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t v = 0; v < algorithms.size(); ++v) {
    const std::size_t runs = seed_independent(out[v].config, data) ? std::min<std::size_t>(cfg.repeats, 1) : cfg.repeats;
    for (std::size_t r = 0; r < runs; ++r) jobs.emplace_back(v, r);
  }
  detail::parallel_for(jobs.size(), cfg.threads, [&](std::size_t job) {
    const auto [v, r] = jobs[job];
    AlgorithmConfig a = out[v].config;
    a.seed = out[v].config.seed + r;
    out[v].repeats[r] = detail::to_repeat(a.seed, run_algorithm(a, data, objectives));
  });
  for (auto& s : out) {
    if (seed_independent(s.config, data))
      for (std::size_t r = 1; r < s.repeats.size(); ++r) {
        s.repeats[r] = s.repeats[0];
        s.repeats[r].seed = s.config.seed + r;
      }
    detail::summarize(s);
  }
  return out;
}

inline std::vector<AlgorithmConfig> algorithms_for(const ExperimentConfig& cfg) {
  std::vector<AlgorithmConfig> out;
  for (Variant v : cfg.variant_list()) {
    AlgorithmConfig a = cfg.algorithm;
    a.variant = v;
    if (v != Variant::RandProxL1) a.lambda_l1 = 0.0;
    out.push_back(a);
  }
  return out;
}

inline std::optional<SpeedupTable> make_speedup(const ExperimentConfig& cfg,
                                                const std::vector<VariantSummary>& variants) {
  if (!cfg.speedup) return std::nullopt;
  std::vector<NamedTrace> traces;
  for (const auto& v : variants) traces.push_back({variant_name(v.config.variant), v.repeats.front().trace});
  return speedup_table(traces, cfg.speedup->thresholds, cfg.speedup->baseline, cfg.speedup->column);
}

// Repeats of every configured variant; speedups use the first repeat's trace.
inline RunSummary execute_single(const ExperimentConfig& cfg) {
  const FederatedDataset data = build_dataset(cfg.dataset);
  const auto objectives = make_objectives(data, cfg.alpha);
  RunSummary summary;
  summary.config = cfg;
  summary.variants = run_variants(cfg, data, objectives, algorithms_for(cfg));
  summary.speedup = make_speedup(cfg, summary.variants);
  return summary;
}

// gamma log-uniform in [gamma_min, gamma_max], floor(1/p) uniform over the
// integer range, drawn from the search seed.
inline std::vector<SearchCandidate> sample_candidates(const SearchSpec& spec) {
  if (!(spec.gamma_min > 0.0 && spec.gamma_min <= spec.gamma_max) || spec.local_steps_min < 1 ||
      spec.local_steps_min > spec.local_steps_max || spec.samples == 0)
    throw InvalidArgument("search ranges are empty");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> log_gamma(std::log(spec.gamma_min), std::log(spec.gamma_max));
  std::uniform_int_distribution<std::size_t> steps(spec.local_steps_min, spec.local_steps_max);
  std::vector<SearchCandidate> out;
  for (std::size_t i = 0; i < spec.samples; ++i) {
    SearchCandidate c;
    c.gamma = spec.gamma_min == spec.gamma_max ? spec.gamma_min : std::exp(log_gamma(rng));
    c.local_steps = steps(rng);
    out.push_back(c);
  }
  return out;
}

// Better: higher mean metric with no diverged repeat; ties go to fewer
// uplink bits.
inline bool better_candidate(const VariantSummary& a, const VariantSummary& b) {
  if (a.any_diverged != b.any_diverged) return !a.any_diverged;
  if (a.mean_test_metric != b.mean_test_metric) return a.mean_test_metric > b.mean_test_metric;
  return a.mean_uplink_bits < b.mean_uplink_bits;
}

inline RunSummary execute_search(const ExperimentConfig& cfg) {
  if (!cfg.search) throw InvalidArgument("run_search needs a search section");
  const auto candidates = sample_candidates(*cfg.search);
  const FederatedDataset data = build_dataset(cfg.dataset);
  const auto objectives = make_objectives(data, cfg.alpha);

  RunSummary summary;
  summary.config = cfg;
  for (const AlgorithmConfig& base : algorithms_for(cfg)) {
    std::optional<VariantSummary> best;
    for (const auto& cand : candidates) {
      AlgorithmConfig a = base;
      a.gamma = cand.gamma;
      a.p = 1.0 / static_cast<double>(cand.local_steps);
      VariantSummary s = std::move(run_variants(cfg, data, objectives, {a}).front());
      summary.candidates.push_back({base.variant, cand, s.mean_test_metric, s.mean_uplink_bits, s.any_diverged});
      if (!best || better_candidate(s, *best)) best = std::move(s);
    }
    summary.variants.push_back(std::move(*best));
  }
  summary.speedup = make_speedup(cfg, summary.variants);
  return summary;
}

// ---------------------------------------------------------------------------
// Outputs

// Shortest decimal form that round-trips to the same double.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, end);
}

inline std::string trace_csv(std::span<const TraceRow> rows) {
  std::string out = std::string(kTraceHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.round) + "," + std::to_string(r.iter) + "," + std::to_string(r.uplink_bits) + "," +
           std::to_string(r.downlink_bits) + "," + format_double(r.train_loss) + "," + format_double(r.test_metric) +
           "," + format_double(r.sparsity) + "," + format_double(r.sum_h_norm) + "," + format_double(r.mean_h_norm) +
           "," + format_double(r.w_norm) + "\n";
  }
  return out;
}

namespace detail {

inline json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json speedup_to_json(const SpeedupTable& t) {
  json rows = json::array();
  for (const auto& row : t.rows) {
    json cells = json::array();
    for (std::size_t i = 0; i < row.cells.size(); ++i) {
      const auto& c = row.cells[i];
      cells.push_back({{"threshold", t.thresholds[i]},
                       {"bits", c.bits ? json(*c.bits) : json(nullptr)},
                       {"reached", c.bits.has_value()},
                       {"speedup", c.speedup ? json(*c.speedup) : json(nullptr)}});
    }
    rows.push_back({{"name", row.name}, {"cells", cells}});
  }
  return {{"baseline", t.baseline}, {"column", enum_name(t.column, kColumns)}, {"rows", rows}};
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline json summary_to_json(const RunSummary& s) {
  json variants = json::array();
  for (const auto& v : s.variants) {
    json repeats = json::array();
    for (const auto& r : v.repeats) {
      repeats.push_back({{"seed", r.seed},
                         {"final_test_metric", detail::finite_or_null(r.final_test_metric)},
                         {"final_train_loss", detail::finite_or_null(r.final_train_loss)},
                         {"final_sparsity", r.final_sparsity},
                         {"uplink_bits", r.uplink_bits},
                         {"downlink_bits", r.downlink_bits},
                         {"rounds", r.rounds},
                         {"diverged", r.diverged},
                         {"divergence_reason", r.divergence_reason},
                         {"trace_file", r.trace_file}});
    }
    const AlgorithmConfig& a = v.config;
    variants.push_back({{"variant", variant_name(a.variant)},
                        {"gamma", a.gamma},
                        {"p", a.p},
                        {"local_steps", local_steps_per_round(a.p)},
                        {"lambda_l1", a.lambda_l1},
                        {"schedule", detail::enum_name(schedule_of(a), detail::kSchedules)},
                        {"local_step", detail::enum_name(local_step_of(a), detail::kLocalSteps)},
                        {"uplink_encoding", detail::enum_name(encoding_of(a), detail::kEncodings)},
                        {"mean_test_metric", detail::finite_or_null(v.mean_test_metric)},
                        {"stderr_test_metric", detail::finite_or_null(v.stderr_test_metric)},
                        {"mean_train_loss", detail::finite_or_null(v.mean_train_loss)},
                        {"mean_uplink_bits", v.mean_uplink_bits},
                        {"any_diverged", v.any_diverged},
                        {"repeats", repeats}});
  }
  // Worker count does not affect results, so it stays out of the summary.
  json config = config_to_json(s.config);
  config.erase("threads");
  json out{{"config", config}, {"variants", variants}, {"any_diverged", s.any_diverged()}};
  if (!s.candidates.empty()) {
    json cands = json::array();
    for (const auto& c : s.candidates) {
      cands.push_back({{"variant", variant_name(c.variant)},
                       {"gamma", c.candidate.gamma},
                       {"local_steps", c.candidate.local_steps},
                       {"mean_test_metric", detail::finite_or_null(c.mean_test_metric)},
                       {"mean_uplink_bits", c.mean_uplink_bits},
                       {"any_diverged", c.any_diverged}});
    }
    out["candidates"] = cands;
  }
  if (s.speedup) out["speedup"] = detail::speedup_to_json(*s.speedup);
  return out;
}

// Writes <variant>_rep<r>.csv per repeat and summary.json into `dir`.
inline void emit_outputs(RunSummary& s, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  for (auto& v : s.variants) {
    for (std::size_t r = 0; r < v.repeats.size(); ++r) {
      auto& rep = v.repeats[r];
      rep.trace_file = variant_name(v.config.variant) + "_rep" + std::to_string(r) + ".csv";
      detail::write_file(dir / rep.trace_file, trace_csv(rep.trace));
    }
  }
  detail::write_file(dir / "summary.json", summary_to_json(s).dump(2) + "\n");
}

// --out beats the environment variable, which beats the config file.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& cfg,
                                                const std::optional<std::string>& cli_override) {
  if (cli_override) return *cli_override;
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
  return cfg.output_dir;
}

inline RunSummary run_single(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out_dir) {
  RunSummary s = execute_single(cfg);
  if (out_dir) emit_outputs(s, *out_dir);
  return s;
}

inline RunSummary run_search(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out_dir) {
  RunSummary s = execute_search(cfg);
  if (out_dir) emit_outputs(s, *out_dir);
  return s;
}

}  // namespace fedsparse
