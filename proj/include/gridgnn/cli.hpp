#pragma once

// Batch command surface: the run configuration, data preparation shared by all
// commands, the benchmark pipeline, and the command dispatcher.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gridgnn/baselines.hpp"
#include "gridgnn/error.hpp"
#include "gridgnn/gridgraph.hpp"
#include "gridgnn/gridsim.hpp"
#include "gridgnn/imputation.hpp"
#include "gridgnn/mpnn.hpp"
#include "gridgnn/services.hpp"
#include "gridgnn/training.hpp"
#include "gridgnn/util.hpp"

namespace gridgnn::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kMissingArtifact = 3,
  kNumericalFailure = 4,
};

/// An input file or directory a command needs does not exist.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot write '" + path.string() + "'");
  out << text;
}

// ---------------------------------------------------------------------------
// Run configuration

/// Synthetic data generated by `bench` (and the defaults of `simulate`).
struct SimulationConfig {
  std::string start = "2019-05-15T00:00:00Z";
  std::size_t days = 75;  // 2 warm-up + 45 training + 28 test
  std::uint64_t seed = 7;

  nlohmann::json to_json() const { return {{"start", start}, {"days", days}, {"seed", seed}}; }
};

struct RunConfig {
  static constexpr int kSchemaVersion = 1;

  // Paths
  std::string spec;        // grid spec JSON; empty = built-in pilot-shaped grid
  std::string data_dir;    // dataset.csv + weather.csv written by `simulate`
  std::string checkpoint;  // model checkpoint JSON; empty = <out_dir>/model.json
  std::string out_dir = "out";

  SimulationConfig simulation;
  std::size_t test_days = 28;       // final days of the data held out for testing
  std::size_t test_samples = 1000;  // evenly spaced test timestamps scored by evaluate/bench (0 = all)

  SchemaConfig schema;
  GnnConfig model;
  TrainingConfig training;
  TrainingConfig baseline_training;
  std::size_t baseline_layers = 2;
  ImputationOptions imputation;

  double threshold_v = 240.0;
  double z = 1.0;
  std::optional<double> target_voltage;  // bid clamp; default = threshold
  std::vector<double> missing_rates = default_missing_rates();
  std::uint64_t seed = 1;

  RunConfig() {
    training.batch_size = 128;
    training.max_epochs = 60;
    baseline_training.batch_size = 128;
    baseline_training.max_epochs = 30;
    baseline_training.learning_rate = 0.001;
  }

  std::string checkpoint_path() const {
    return checkpoint.empty() ? (std::filesystem::path(out_dir) / "model.json").string() : checkpoint;
  }

  TrainingConfig training_for(const TrainingConfig& t) const {
    TrainingConfig c = t;
    c.seed = seed;
    return c;
  }

  void validate() const {
    training.validate();
    baseline_training.validate();
    if (model.layers == 0) throw ValidationError("model.layers must be positive");
    if (baseline_layers == 0) throw ValidationError("baseline_layers must be positive");
    if (!(z >= 0.0)) throw ValidationError("z must be non-negative");
    if (!std::isfinite(threshold_v)) throw ValidationError("threshold_v must be finite");
    if (imputation.max_iterations == 0) throw ValidationError("imputation.max_iterations must be positive");
    if (!(imputation.tolerance >= 0.0)) throw ValidationError("imputation.tolerance must be non-negative");
    for (double r : missing_rates) {
      if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("missing rates must lie in [0, 1]");
    }
    parse_rfc3339(simulation.start);
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {
        {"schema_version", kSchemaVersion},
        {"paths", {{"spec", spec}, {"data_dir", data_dir}, {"checkpoint", checkpoint}, {"out_dir", out_dir}}},
        {"simulation", simulation.to_json()},
        {"test_days", test_days},
        {"test_samples", test_samples},
        {"schema", schema.to_json()},
        {"model", model.to_json()},
        {"training", training.to_json()},
        {"baseline_training", baseline_training.to_json()},
        {"baseline_layers", baseline_layers},
        {"imputation", {{"max_iterations", imputation.max_iterations}, {"tolerance", imputation.tolerance}}},
        {"services", {{"threshold_v", threshold_v}, {"z", z}}},
        {"missing_rates", missing_rates},
        {"seed", seed}};
    j["services"]["target_voltage"] = target_voltage ? nlohmann::json(*target_voltage) : nlohmann::json(nullptr);
    return j;
  }

  /// Hash of the full configuration, embedded in every artifact.
  std::string hash() const { return json_hash(to_json()); }

  static RunConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    if (!j.contains("schema_version")) throw ValidationError("config lacks schema_version");
    if (j.at("schema_version") != kSchemaVersion) {
      throw ValidationError("unsupported config schema_version " + j.at("schema_version").dump());
    }
    static const char* known[] = {"schema_version", "paths",           "simulation",      "test_days",
                                  "test_samples",   "schema",          "model",           "training",
                                  "baseline_training", "baseline_layers", "imputation",   "services",
                                  "missing_rates",  "seed"};
    for (const auto& [key, value] : j.items()) {
      if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
        throw ValidationError("unknown config key '" + key + "'");
      }
    }
    RunConfig c;
    try {
      if (j.contains("paths")) {
        const auto& p = j.at("paths");
        c.spec = p.value("spec", c.spec);
        c.data_dir = p.value("data_dir", c.data_dir);
        c.checkpoint = p.value("checkpoint", c.checkpoint);
        c.out_dir = p.value("out_dir", c.out_dir);
      }
      if (j.contains("simulation")) {
        const auto& s = j.at("simulation");
        c.simulation.start = s.value("start", c.simulation.start);
        c.simulation.days = s.value("days", c.simulation.days);
        c.simulation.seed = s.value("seed", c.simulation.seed);
      }
      c.test_days = j.value("test_days", c.test_days);
      c.test_samples = j.value("test_samples", c.test_samples);
      if (j.contains("schema")) c.schema = SchemaConfig::from_json(j.at("schema"));
      if (j.contains("model")) c.model = GnnConfig::from_json(j.at("model"));
      auto merged = [](const TrainingConfig& base, const nlohmann::json& patch) {
        nlohmann::json t = base.to_json();
        t.merge_patch(patch);
        return TrainingConfig::from_json(t);
      };
      if (j.contains("training")) c.training = merged(c.training, j.at("training"));
      if (j.contains("baseline_training")) c.baseline_training = merged(c.baseline_training, j.at("baseline_training"));
      c.baseline_layers = j.value("baseline_layers", c.baseline_layers);
      if (j.contains("imputation")) {
        const auto& im = j.at("imputation");
        c.imputation.max_iterations = im.value("max_iterations", c.imputation.max_iterations);
        c.imputation.tolerance = im.value("tolerance", c.imputation.tolerance);
      }
      if (j.contains("services")) {
        const auto& s = j.at("services");
        c.threshold_v = s.value("threshold_v", c.threshold_v);
        c.z = s.value("z", c.z);
        if (s.contains("target_voltage") && !s.at("target_voltage").is_null()) {
          c.target_voltage = s.at("target_voltage").get<double>();
        }
      }
      if (j.contains("missing_rates")) j.at("missing_rates").get_to(c.missing_rates);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
  }

  CongestionConfig congestion() const { return {threshold_v, z, CongestionMode::Overvoltage}; }
};

/// Provenance fields embedded in every artifact.
inline nlohmann::json provenance(const RunConfig& c) { return {{"config_hash", c.hash()}, {"seed", c.seed}}; }

// ---------------------------------------------------------------------------
// Data preparation

inline SyntheticGridSpec load_spec(const std::string& path) {
  if (path.empty()) return make_pilot_spec();
  return SyntheticGridSpec::from_json(read_json_file(path));
}

inline TimeSeriesDataset load_dataset(const std::string& dir) {
  if (dir.empty()) throw ValidationError("paths.data_dir is not set");
  const std::filesystem::path d(dir);
  std::ifstream data(d / "dataset.csv"), weather(d / "weather.csv");
  if (!data) throw MissingArtifactError("cannot open '" + (d / "dataset.csv").string() + "'");
  if (!weather) throw MissingArtifactError("cannot open '" + (d / "weather.csv").string() + "'");
  return read_dataset_csv({&data, &weather});
}

inline GnnModel load_model(const RunConfig& c) {
  const std::string path = c.checkpoint_path();
  if (!std::filesystem::exists(path)) throw MissingArtifactError("checkpoint '" + path + "' not found");
  return load_checkpoint(read_json_file(path));
}

/// Chronological train / validation / test samples; the test period is the final test_days.
struct DataSplit {
  std::size_t train_end = 0;  // first test step
  Standardizer stats;
  std::vector<Sample> train, validation, test;
};

inline DataSplit split_dataset(const TimeSeriesDataset& ds, const std::vector<NodeSchema>& schemas, const RunConfig& c,
                               std::optional<Standardizer> stats = std::nullopt) {
  const std::size_t test_steps = c.test_days * kStepsPerDay;
  if (test_steps == 0 || test_steps >= ds.length()) throw ValidationError("test_days leaves no training or test data");
  DataSplit s;
  s.train_end = ds.length() - test_steps;
  s.stats = stats ? *stats : fit_standardizer(ds, schemas, 0, s.train_end);
  auto train = build_samples(ds, schemas, s.stats, {c.training.missing_threshold, 0, s.train_end});
  std::tie(s.train, s.validation) = split_chronological(std::move(train), c.training.validation_fraction);
  s.test = build_samples(ds, schemas, s.stats, {1.0, s.train_end});
  return s;
}

/// n samples spread evenly over `all` (all of them when n is 0 or too large).
inline std::vector<Sample> evenly_spaced(const std::vector<Sample>& all, std::size_t n) {
  if (n == 0 || n >= all.size()) return all;
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(all[i * all.size() / n]);
  return out;
}

/// Test inputs with `rate` of all points removed before feature construction, aligned with `truth`.
inline std::vector<Sample> corrupted_test(const TimeSeriesDataset& ds, const std::vector<NodeSchema>& schemas,
                                          const Standardizer& stats, std::size_t train_end, double rate, std::uint64_t seed) {
  if (rate == 0.0) return build_samples(ds, schemas, stats, {1.0, train_end});
  return build_samples(inject_missing(ds, rate, MissingPattern::Random, seed), schemas, stats, {1.0, train_end});
}

// ---------------------------------------------------------------------------
// Benchmark pipeline

struct ModelScore {
  std::string name;
  std::size_t layers = 0;
  std::size_t mp_steps = 0;
  std::size_t params = 0;
  VoltageAccuracy accuracy;
  TrainingHistory history;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

/// Closed-loop replay of bids through the simulator (synthetic-only check of bid magnitudes).
struct BidReplay {
  std::size_t events = 0;
  std::size_t bids = 0;
  std::size_t positive = 0;    // delta > 0 (load increase)
  std::size_t within_1v = 0;   // replayed event voltage within 1 V of the target
  std::size_t low_confidence = 0;
  std::vector<FlexibilityBid> records;
  std::vector<double> residual_v;  // replayed max event voltage - target
};

struct BenchmarkResult {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t train_samples = 0, validation_samples = 0, test_samples = 0;
  ModelScore gnn, mlp, ae;
  std::vector<SweepRow> sweep;
  BidReplay bids;
  double total_train_seconds = 0.0;
  double sweep_seconds = 0.0;
  double bid_seconds = 0.0;

  std::vector<ComparisonRow> comparison() const {
    std::vector<ComparisonRow> rows;
    for (const ModelScore* m : {&gnn, &mlp, &ae}) {
      rows.push_back({m->name, m->layers, m->mp_steps, m->params, m->accuracy.mape, m->accuracy.rmse});
    }
    return rows;
  }
};

/// Overvoltage events predicted on `test` (voltages hidden), merged into bids, replayed with the bid load added.
template <GaussianModel M>
BidReplay replay_bids(const M& model, const SyntheticGridSpec& spec, const Simulation& sim, const std::vector<Sample>& test,
                      const RunConfig& c) {
  const auto& schemas = model.schemas();
  std::vector<Sample> hidden;
  hidden.reserve(test.size());
  for (const auto& s : test) hidden.push_back(hide_voltages(schemas, s));
  const auto forecasts = predict_voltages(model, std::span<const Sample>(hidden), c.imputation);
  std::vector<CongestionEvent> events;
  std::map<std::int64_t, const Sample*> by_time;
  for (std::size_t i = 0; i < forecasts.size(); ++i) {
    by_time[test[i].timestamp] = &hidden[i];
    const auto ev = detect_congestions(forecasts[i].voltages, c.congestion());
    events.insert(events.end(), ev.begin(), ev.end());
  }
  BidReplay out;
  out.events = events.size();
  const auto requests = group_events(spec.topology, std::span<const CongestionEvent>(events),
                                     [&](std::int64_t t) { return by_time.at(t); });
  BidOptions opt;
  opt.target_voltage = c.target_voltage;
  opt.imputation = c.imputation;
  out.records = estimate_bids(model, spec.topology, std::span<const BidRequest>(requests), opt);
  out.bids = out.records.size();
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    const auto& bid = out.records[i];
    const auto step = static_cast<std::size_t>((bid.timestamp - sim.dataset.start()) / kStepSeconds);
    const auto v = replay_voltages(spec, sim.truth, step, spec.topology.index(bid.feeder_id), bid.delta);
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& e : requests[i].events) worst = std::max(worst, v.at(sensor_id_for(e.node_id, e.phase, false)));
    const double residual = worst - bid.target_voltage;
    out.residual_v.push_back(residual);
    out.positive += bid.delta > 0.0 ? 1 : 0;
    out.within_1v += std::abs(residual) <= 1.0 ? 1 : 0;
    out.low_confidence += bid.low_confidence ? 1 : 0;
  }
  return out;
}

struct BenchmarkOptions {
  bool baselines = true;
  bool sweep = true;
  bool bids = true;
  std::ostream* log = nullptr;
};

/// Simulate, train the GNN and the centralized baselines, and score them on the held-out month.
inline BenchmarkResult run_benchmark(const RunConfig& c, const BenchmarkOptions& opt = {}) {
  c.validate();
  const SyntheticGridSpec spec = load_spec(c.spec);
  const Simulation sim =
      simulate(spec, parse_rfc3339(c.simulation.start), c.simulation.days * kStepsPerDay, c.simulation.seed);
  const auto schemas = derive_schemas(spec.topology, c.schema);
  const DataSplit split = split_dataset(sim.dataset, schemas, c);
  const auto test = evenly_spaced(split.test, c.test_samples);

  BenchmarkResult r;
  r.config_hash = c.hash();
  r.seed = c.seed;
  r.train_samples = split.train.size();
  r.validation_samples = split.validation.size();
  r.test_samples = test.size();
  auto log = [&](const std::string& line) {
    if (opt.log) *opt.log << line << std::endl;
  };

  auto fit = [&](auto& model, ModelScore& score, const TrainingConfig& tc) {
    model.set_standardizer(split.stats);
    const auto t0 = std::chrono::steady_clock::now();
    TrainingOptions topt;
    topt.hiding_groups = bid_hiding_groups(spec.topology, schemas);
    score.history = train(model, split.train, split.validation, c.training_for(tc), topt);
    score.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.total_train_seconds += score.train_seconds;
    score.params = model.parameters().scalar_count();
    const auto t1 = std::chrono::steady_clock::now();
    score.accuracy = voltage_accuracy(model, test, test, c.imputation);
    score.eval_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
    log(score.name + ": MAPE " + format_double(score.accuracy.mape) + "% RMSE " + format_double(score.accuracy.rmse) +
        " V, " + std::to_string(score.params) + " parameters, " + format_double(score.train_seconds) + " s");
  };

  GnnModel gnn(spec.topology, schemas, c.model, c.seed);
  r.gnn.name = "GNN";
  r.gnn.layers = c.model.layers;
  r.gnn.mp_steps = c.model.message_passing_steps;
  fit(gnn, r.gnn, c.training);

  if (opt.baselines) {
    CentralModel mlp = build_baseline(BaselineKind::MLP, schemas, c.baseline_layers, c.seed);
    r.mlp.name = "MLP";
    r.mlp.layers = c.baseline_layers;
    fit(mlp, r.mlp, c.baseline_training);
    CentralModel ae = build_baseline(BaselineKind::AE, schemas, c.baseline_layers, c.seed);
    r.ae.name = "AE";
    r.ae.layers = c.baseline_layers;
    fit(ae, r.ae, c.baseline_training);
  }

  if (opt.sweep) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto truth = split.test;
    for (double rate : c.missing_rates) {
      const auto inputs = corrupted_test(sim.dataset, schemas, split.stats, split.train_end, rate, c.seed);
      const auto acc = voltage_accuracy(gnn, inputs, truth, c.imputation);
      r.sweep.push_back({rate, acc.mape, acc.rmse});
      log("missing " + format_double(rate) + ": MAPE " + format_double(acc.mape) + "%");
    }
    r.sweep_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  if (opt.bids) {
    const auto t0 = std::chrono::steady_clock::now();
    r.bids = replay_bids(gnn, spec, sim, split.test, c);
    r.bid_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log("bids: " + std::to_string(r.bids.bids) + " from " + std::to_string(r.bids.events) + " events, " +
        std::to_string(r.bids.positive) + " positive, " + std::to_string(r.bids.within_1v) + " within 1 V");
  }
  return r;
}

inline nlohmann::json to_json(const BenchmarkResult& r) {
  auto score = [](const ModelScore& m) {
    return nlohmann::json{{"model", m.name},          {"layers", m.layers},
                          {"mp_steps", m.mp_steps},   {"params", m.params},
                          {"mape", m.accuracy.mape},  {"rmse", m.accuracy.rmse},
                          {"points", m.accuracy.points}, {"converged", m.accuracy.converged},
                          {"best_epoch", m.history.best_epoch}, {"train_seconds", m.train_seconds},
                          {"eval_seconds", m.eval_seconds}};
  };
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& s : r.sweep) sweep.push_back({{"missing_rate", s.missing_rate}, {"mape", s.mape}, {"rmse", s.rmse}});
  return {{"config_hash", r.config_hash},
          {"seed", r.seed},
          {"samples", {{"train", r.train_samples}, {"validation", r.validation_samples}, {"test", r.test_samples}}},
          {"models", {score(r.gnn), score(r.mlp), score(r.ae)}},
          {"missing_sweep", sweep},
          {"closed_loop_replay",
           {{"note", "synthetic-only extension: bids replayed through the simulator"},
            {"events", r.bids.events},
            {"bids", r.bids.bids},
            {"positive", r.bids.positive},
            {"within_1v", r.bids.within_1v},
            {"low_confidence", r.bids.low_confidence}}},
          {"total_train_seconds", r.total_train_seconds}};
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  RunConfig config;
  std::ostream& out;
  std::ostream& err;
  bool verbose = false;

  std::filesystem::path out_path(const std::string& name) const { return std::filesystem::path(config.out_dir) / name; }
};

inline void write_history(const Context& ctx, const TrainingHistory& h, const std::string& name) {
  std::ostringstream csv;
  h.write_csv(csv);
  write_file(ctx.out_path(name), csv.str());
}

inline void write_manifest(const Context& ctx, const std::string& command, const std::vector<std::string>& artifacts,
                           nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json m = provenance(ctx.config);
  m["command"] = command;
  m["artifacts"] = artifacts;
  m["config"] = ctx.config.to_json();
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_file(ctx.out_path(command + ".manifest.json"), m.dump(2) + "\n");
}

inline int cmd_train(Context& ctx) {
  const RunConfig& c = ctx.config;
  const TimeSeriesDataset ds = load_dataset(c.data_dir);
  const GridTopology topo = load_spec(c.spec).topology;
  const auto schemas = derive_schemas(topo, c.schema);
  const DataSplit split = split_dataset(ds, schemas, c);
  GnnModel model(topo, schemas, c.model, c.seed);
  model.set_standardizer(split.stats);
  TrainingOptions opt;
  if (ctx.verbose) opt.log = &ctx.err;
  opt.hiding_groups = bid_hiding_groups(topo, schemas);
  const TrainingHistory h = train(model, split.train, split.validation, c.training_for(c.training), opt);
  nlohmann::json extra = provenance(c);
  extra["best_epoch"] = h.best_epoch;
  write_file(c.checkpoint_path(), save_checkpoint(model, extra).dump() + "\n");
  write_history(ctx, h, "history.csv");
  write_manifest(ctx, "train", {c.checkpoint_path(), ctx.out_path("history.csv").string()});
  ctx.out << "trained on " << split.train.size() << " samples (" << split.validation.size() << " validation), best epoch "
          << h.best_epoch << ", validation NLL " << format_double(h.best_val_nll) << "\n";
  return kOk;
}

inline int cmd_evaluate(Context& ctx, double missing_rate) {
  const RunConfig& c = ctx.config;
  if (!(missing_rate >= 0.0 && missing_rate <= 1.0)) throw ValidationError("--missing-rate must lie in [0, 1]");
  const GnnModel model = load_model(c);
  const TimeSeriesDataset ds = load_dataset(c.data_dir);
  const DataSplit split = split_dataset(ds, model.schemas(), c, model.standardizer());
  const auto truth = evenly_spaced(split.test, c.test_samples);
  const auto inputs = evenly_spaced(
      corrupted_test(ds, model.schemas(), model.standardizer(), split.train_end, missing_rate, c.seed), c.test_samples);
  const auto acc = voltage_accuracy(model, inputs, truth, c.imputation);
  std::map<std::size_t, std::size_t> iterations;
  for (auto it : acc.iterations) ++iterations[it];
  nlohmann::json report = provenance(c);
  report["missing_rate"] = missing_rate;
  report["mape"] = acc.mape;
  report["rmse"] = acc.rmse;
  report["points"] = acc.points;
  report["samples"] = truth.size();
  report["converged"] = acc.converged;
  report["iterations"] = nlohmann::json::object();
  for (auto [k, n] : iterations) report["iterations"][std::to_string(k)] = n;
  std::ostringstream row;
  write_sweep_csv({{missing_rate, acc.mape, acc.rmse}}, row);
  write_file(ctx.out_path("evaluation.json"), report.dump(2) + "\n");
  write_file(ctx.out_path("evaluation.csv"), row.str());
  write_manifest(ctx, "evaluate", {ctx.out_path("evaluation.json").string(), ctx.out_path("evaluation.csv").string()});
  ctx.out << row.str();
  return kOk;
}

inline int cmd_impute(Context& ctx, const std::string& timestamp, bool hide) {
  const RunConfig& c = ctx.config;
  const GnnModel model = load_model(c);
  const TimeSeriesDataset ds = load_dataset(c.data_dir);
  const DataSplit split = split_dataset(ds, model.schemas(), c, model.standardizer());
  if (split.test.empty()) throw DatasetError("no test samples");
  const Sample* pick = &split.test.front();
  if (!timestamp.empty()) {
    const std::int64_t t = parse_rfc3339(timestamp);
    pick = nullptr;
    for (const auto& s : split.test) {
      if (s.timestamp == t) pick = &s;
    }
    if (!pick) throw ArgumentError("no test sample at " + timestamp);
  }
  ImputationProblem problem{hide ? hide_voltages(model.schemas(), *pick) : *pick, {}, c.imputation};
  const auto result = impute(model, problem);
  nlohmann::json report = imputation_report(model, result);
  report.update(provenance(c));
  write_file(ctx.out_path("imputation.json"), report.dump(2) + "\n");
  write_manifest(ctx, "impute", {ctx.out_path("imputation.json").string()});
  ctx.out << "imputed " << format_rfc3339(result.filled.timestamp) << " in " << result.iterations << " iterations"
          << (result.converged ? "" : " (not converged)") << "\n";
  return kOk;
}

struct CongestionRun {
  std::vector<Sample> test;
  std::vector<Sample> inputs;  // test with voltages hidden; the events are predicted from these
  std::vector<CongestionEvent> events;
};

inline CongestionRun congestion_run(Context& ctx, const GnnModel& model, const TimeSeriesDataset& ds) {
  const RunConfig& c = ctx.config;
  const DataSplit split = split_dataset(ds, model.schemas(), c, model.standardizer());
  CongestionRun run;
  run.test = split.test;
  for (const auto& s : run.test) run.inputs.push_back(hide_voltages(model.schemas(), s));
  const auto forecasts = predict_voltages(model, std::span<const Sample>(run.inputs), c.imputation);
  std::vector<PlotRow> rows;
  std::string lines;
  for (std::size_t i = 0; i < forecasts.size(); ++i) {
    for (const auto& v : forecasts[i].voltages) {
      std::optional<double> actual;
      if (run.test[i].mask[v.node][v.channel]) {
        actual = model.standardizer().to_physical(v.node, v.channel, run.test[i].values[v.node][v.channel]);
      }
      const bool flagged = is_congested(v.mean, v.sigma, c.congestion());
      rows.push_back({v.timestamp, sensor_id_for(v.node_id, v.variable, false), actual, v.mean, v.sigma, c.threshold_v, flagged});
    }
    const auto ev = detect_congestions(forecasts[i].voltages, c.congestion());
    for (const auto& e : ev) {
      nlohmann::json j = to_json(e);
      j.update(provenance(c));
      lines += j.dump() + "\n";
    }
    run.events.insert(run.events.end(), ev.begin(), ev.end());
  }
  std::ostringstream plot;
  write_plot_csv(rows, plot);
  write_file(ctx.out_path("events.jsonl"), lines);
  write_file(ctx.out_path("plot.csv"), plot.str());
  return run;
}

inline int cmd_congest(Context& ctx) {
  const GnnModel model = load_model(ctx.config);
  const TimeSeriesDataset ds = load_dataset(ctx.config.data_dir);
  const auto run = congestion_run(ctx, model, ds);
  write_manifest(ctx, "congest", {ctx.out_path("events.jsonl").string(), ctx.out_path("plot.csv").string()});
  ctx.out << run.events.size() << " congestion events over " << run.test.size() << " timestamps\n";
  return kOk;
}

inline int cmd_bid(Context& ctx) {
  const RunConfig& c = ctx.config;
  const GnnModel model = load_model(c);
  const TimeSeriesDataset ds = load_dataset(c.data_dir);
  const auto run = congestion_run(ctx, model, ds);
  std::map<std::int64_t, const Sample*> by_time;
  for (const auto& s : run.inputs) by_time[s.timestamp] = &s;
  const auto requests = group_events(model.topology(), std::span<const CongestionEvent>(run.events),
                                     [&](std::int64_t t) { return by_time.at(t); });
  BidOptions opt;
  opt.target_voltage = c.target_voltage;
  opt.imputation = c.imputation;
  const auto bids = estimate_bids(model, model.topology(), std::span<const BidRequest>(requests), opt);
  std::string lines;
  for (const auto& b : bids) {
    nlohmann::json j = to_json(b);
    j.update(provenance(c));
    lines += j.dump() + "\n";
  }
  write_file(ctx.out_path("bids.jsonl"), lines);
  write_manifest(ctx, "bid",
                 {ctx.out_path("events.jsonl").string(), ctx.out_path("plot.csv").string(), ctx.out_path("bids.jsonl").string()});
  ctx.out << bids.size() << " bids from " << run.events.size() << " congestion events\n";
  return kOk;
}

inline int cmd_bench(Context& ctx) {
  BenchmarkOptions opt;
  opt.log = &ctx.err;
  const BenchmarkResult r = run_benchmark(ctx.config, opt);
  std::ostringstream cmp, sweep, bids;
  write_comparison_csv(r.comparison(), cmp);
  write_sweep_csv(r.sweep, sweep);
  for (const auto& b : r.bids.records) {
    nlohmann::json j = to_json(b);
    j.update(provenance(ctx.config));
    bids << j.dump() << "\n";
  }
  write_file(ctx.out_path("comparison.csv"), cmp.str());
  write_file(ctx.out_path("sweep.csv"), sweep.str());
  write_file(ctx.out_path("bids.jsonl"), bids.str());
  write_file(ctx.out_path("bench.json"), to_json(r).dump(2) + "\n");
  write_history(ctx, r.gnn.history, "history_gnn.csv");
  write_history(ctx, r.mlp.history, "history_mlp.csv");
  write_history(ctx, r.ae.history, "history_ae.csv");
  write_manifest(ctx, "bench",
                 {ctx.out_path("comparison.csv").string(), ctx.out_path("sweep.csv").string(),
                  ctx.out_path("bids.jsonl").string(), ctx.out_path("bench.json").string()});
  ctx.out << cmp.str();
  return kOk;
}

inline int cmd_simulate(std::ostream& out, const std::string& spec_path, const std::string& start, std::size_t days,
                        std::uint64_t seed, const std::string& out_dir) {
  if (days == 0) throw ValidationError("--days must be positive");
  const SyntheticGridSpec spec = load_spec(spec_path);
  const Simulation sim = simulate(spec, parse_rfc3339(start), days * kStepsPerDay, seed);
  std::ostringstream data, weather;
  write_dataset_csv(sim.dataset, data, false);
  write_dataset_csv(sim.dataset, weather, true);
  const std::filesystem::path dir(out_dir);
  write_file(dir / "dataset.csv", data.str());
  write_file(dir / "weather.csv", weather.str());
  write_file(dir / "spec.json", spec.to_json().dump(2) + "\n");
  const nlohmann::json manifest = {{"command", "simulate"},
                                   {"spec_hash", spec.hash()},
                                   {"seed", seed},
                                   {"start", format_rfc3339(sim.dataset.start())},
                                   {"days", days},
                                   {"artifacts", {"dataset.csv", "weather.csv", "spec.json"}}};
  write_file(dir / "simulate.manifest.json", manifest.dump(2) + "\n");
  std::size_t sensors = 0, weather_series = 0;
  for (const auto& s : sim.dataset.series()) (s.is_weather() ? weather_series : sensors) += 1;
  out << sensors << " sensors, " << weather_series << " weather series, " << sim.dataset.length()
      << " timestamps each, " << sim.dataset.missing_count() << " missing points\n";
  return kOk;
}

/// Runs one command line; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Graph neural network state estimation for low-voltage grids"};
  app.require_subcommand(1);

  std::string config_path, out_override;
  std::optional<std::uint64_t> seed_override;
  bool verbose = false;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run configuration JSON")->required();
    sub->add_option("--seed", seed_override, "Override the configured seed");
    sub->add_option("--out", out_override, "Override the output directory");
    sub->add_flag("--verbose", verbose, "Progress on stderr");
  };

  std::string sim_spec, sim_start = SimulationConfig{}.start, sim_out = "data";
  std::size_t sim_days = 365;
  std::uint64_t sim_seed = SimulationConfig{}.seed;
  auto* simulate_cmd = app.add_subcommand("simulate", "Generate a synthetic dataset");
  simulate_cmd->add_option("--spec", sim_spec, "Grid spec JSON (default: built-in pilot-shaped grid)");
  simulate_cmd->add_option("--start", sim_start, "First timestamp (RFC 3339, on the 15-minute grid)");
  simulate_cmd->add_option("--days", sim_days, "Number of days");
  simulate_cmd->add_option("--seed", sim_seed, "Random seed");
  simulate_cmd->add_option("--out", sim_out, "Output directory");
  simulate_cmd->add_flag("--verbose", verbose, "Unused; accepted for uniformity");

  std::string spec_out = "spec.json", config_out = "config.json";
  std::uint64_t spec_seed = 2019;
  auto* spec_cmd = app.add_subcommand("make-spec", "Write the built-in pilot-shaped grid spec");
  spec_cmd->add_option("--out", spec_out, "Output file");
  spec_cmd->add_option("--seed", spec_seed, "Seed for element parameters");
  auto* init_cmd = app.add_subcommand("init-config", "Write a default run configuration");
  init_cmd->add_option("--out", config_out, "Output file");

  auto* train_cmd = app.add_subcommand("train", "Train the GNN and write a checkpoint");
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Voltage-prediction accuracy on the test period");
  double missing_rate = 0.0;
  evaluate_cmd->add_option("--missing-rate", missing_rate, "Fraction of points removed before evaluation");
  auto* impute_cmd = app.add_subcommand("impute", "Impute the missing entries of one test timestamp");
  std::string impute_at;
  bool hide = false;
  impute_cmd->add_option("--timestamp", impute_at, "RFC 3339 timestamp (default: first test step)");
  impute_cmd->add_flag("--hide-voltages", hide, "Treat every voltage as missing");
  auto* congest_cmd = app.add_subcommand("congest", "Flag probable overvoltages on the test period");
  auto* bid_cmd = app.add_subcommand("bid", "Estimate flexibility bids for flagged overvoltages");
  auto* bench_cmd = app.add_subcommand("bench", "Simulate, train GNN and baselines, write comparison tables");
  for (auto* sub : {train_cmd, evaluate_cmd, impute_cmd, congest_cmd, bid_cmd, bench_cmd}) common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*simulate_cmd) return cmd_simulate(out, sim_spec, sim_start, sim_days, sim_seed, sim_out);
    if (*spec_cmd) {
      write_file(spec_out, make_pilot_spec(spec_seed).to_json().dump(2) + "\n");
      return kOk;
    }
    if (*init_cmd) {
      write_file(config_out, RunConfig{}.to_json().dump(2) + "\n");
      return kOk;
    }
    Context ctx{RunConfig::from_json(read_json_file(config_path)), out, err, verbose};
    if (seed_override) ctx.config.seed = *seed_override;
    if (!out_override.empty()) ctx.config.out_dir = out_override;
    if (*train_cmd) return cmd_train(ctx);
    if (*evaluate_cmd) return cmd_evaluate(ctx, missing_rate);
    if (*impute_cmd) return cmd_impute(ctx, impute_at, hide);
    if (*congest_cmd) return cmd_congest(ctx);
    if (*bid_cmd) return cmd_bid(ctx);
    if (*bench_cmd) return cmd_bench(ctx);
  } catch (const MissingArtifactError& e) {
    err << "error: " << e.what() << "\n";
    return kMissingArtifact;
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << "\n";
    return kNumericalFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kConfigError;
}

}  // namespace gridgnn::cli
