#pragma once

// Synthetic data engine: a linearized radial power-flow simulator producing
// 15-minute voltage / energy / weather series, missing-data injection, the
// dataset CSV format, and an exact Gaussian-conditioning oracle.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gridgnn/error.hpp"
#include "gridgnn/gridgraph.hpp"
#include "gridgnn/util.hpp"

namespace gridgnn {

inline constexpr std::int64_t kStepSeconds = 900;
inline constexpr std::size_t kStepsPerDay = 96;

// ---------------------------------------------------------------------------
// Time series dataset

struct Series {
  std::string sensor_id;
  std::vector<double> values;
  std::vector<std::uint8_t> missing;  // 1 = missing; the stored value is then 0

  bool is_weather() const { return sensor_id.starts_with("wx:"); }
};

/// Aligned sensor series on one 15-minute grid.
class TimeSeriesDataset {
 public:
  TimeSeriesDataset() = default;
  TimeSeriesDataset(std::int64_t start, std::size_t length, std::int64_t step = kStepSeconds)
      : start_(start), step_(step), length_(length) {}

  std::int64_t start() const noexcept { return start_; }
  std::int64_t step() const noexcept { return step_; }
  std::size_t length() const noexcept { return length_; }
  std::int64_t timestamp(std::size_t i) const { return start_ + static_cast<std::int64_t>(i) * step_; }

  Series& add_series(std::string sensor_id) {
    if (index_.contains(sensor_id)) throw DatasetError("duplicate sensor '" + sensor_id + "'");
    index_.emplace(sensor_id, series_.size());
    series_.push_back(Series{std::move(sensor_id), std::vector<double>(length_, 0.0),
                             std::vector<std::uint8_t>(length_, 0)});
    return series_.back();
  }

  const std::vector<Series>& series() const noexcept { return series_; }
  std::vector<Series>& series() noexcept { return series_; }

  const Series* find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &series_[it->second];
  }
  Series* find(std::string_view id) {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &series_[it->second];
  }
  const Series& at(std::string_view id) const {
    const Series* s = find(id);
    if (!s) throw DatasetError("dataset has no sensor '" + std::string(id) + "'");
    return *s;
  }

  std::size_t point_count() const noexcept { return series_.size() * length_; }
  std::size_t missing_count() const {
    std::size_t n = 0;
    for (const auto& s : series_) n += static_cast<std::size_t>(std::count(s.missing.begin(), s.missing.end(), 1));
    return n;
  }

  /// Steps [begin, end) as a new dataset.
  TimeSeriesDataset slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > length_) throw ArgumentError("dataset slice out of range");
    TimeSeriesDataset out(timestamp(begin), end - begin, step_);
    for (const auto& s : series_) {
      Series& d = out.add_series(s.sensor_id);
      std::copy(s.values.begin() + begin, s.values.begin() + end, d.values.begin());
      std::copy(s.missing.begin() + begin, s.missing.begin() + end, d.missing.begin());
    }
    return out;
  }

 private:
  std::int64_t start_ = 0;
  std::int64_t step_ = kStepSeconds;
  std::size_t length_ = 0;
  std::vector<Series> series_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// "timestamp,sensor_id,value,quality" rows, time-major; missing points have an empty value.
/// `weather` selects wx:-prefixed series (true) or the rest (false).
inline void write_dataset_csv(const TimeSeriesDataset& ds, std::ostream& out, bool weather) {
  out << "timestamp,sensor_id,value,quality\n";
  std::vector<const Series*> chosen;
  for (const auto& s : ds.series()) {
    if (s.is_weather() == weather) chosen.push_back(&s);
  }
  std::string line;
  for (std::size_t t = 0; t < ds.length(); ++t) {
    const std::string ts = format_rfc3339(ds.timestamp(t));
    for (const Series* s : chosen) {
      line = ts;
      line += ',';
      line += s->sensor_id;
      line += ',';
      if (s->missing[t]) {
        line += ",missing\n";
      } else {
        line += format_double(s->values[t]);
        line += ",ok\n";
      }
      out << line;
    }
  }
}

/// Reads one or more CSV streams in the format above into a single dataset.
/// Grid points absent from every stream are flagged missing.
inline TimeSeriesDataset read_dataset_csv(std::vector<std::istream*> inputs) {
  struct Row {
    std::int64_t t;
    std::string id;
    std::optional<double> v;
  };
  std::vector<Row> rows;
  std::vector<std::string> order;
  std::unordered_map<std::string, bool> seen;
  std::string line;
  for (std::istream* in : inputs) {
    bool header = true;
    std::size_t lineno = 0;
    while (std::getline(*in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (header) {
        header = false;
        if (line.starts_with("timestamp")) continue;
      }
      std::array<std::string, 4> f;
      std::size_t pos = 0;
      for (int k = 0; k < 4; ++k) {
        const std::size_t comma = k < 3 ? line.find(',', pos) : std::string::npos;
        if (k < 3 && comma == std::string::npos) throw DatasetError("csv line " + std::to_string(lineno) + ": expected 4 fields");
        f[k] = line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        pos = comma + 1;
      }
      Row r{parse_rfc3339(f[0]), f[1], std::nullopt};
      if (f[3] == "ok") {
        try {
          r.v = std::stod(f[2]);
        } catch (const std::exception&) {
          throw DatasetError("csv line " + std::to_string(lineno) + ": bad value '" + f[2] + "'");
        }
      } else if (f[3] != "missing") {
        throw DatasetError("csv line " + std::to_string(lineno) + ": quality must be ok or missing");
      }
      if (!seen[r.id]) {
        seen[r.id] = true;
        order.push_back(r.id);
      }
      rows.push_back(std::move(r));
    }
  }
  if (rows.empty()) throw DatasetError("dataset csv contains no rows");
  std::int64_t t0 = rows.front().t, t1 = rows.front().t;
  for (const auto& r : rows) {
    t0 = std::min(t0, r.t);
    t1 = std::max(t1, r.t);
  }
  for (const auto& r : rows) {
    if ((r.t - t0) % kStepSeconds != 0) throw DatasetError("timestamp off the 15-minute grid: " + format_rfc3339(r.t));
  }
  TimeSeriesDataset ds(t0, static_cast<std::size_t>((t1 - t0) / kStepSeconds) + 1);
  for (const auto& id : order) {
    Series& s = ds.add_series(id);
    std::fill(s.missing.begin(), s.missing.end(), 1);
  }
  for (const auto& r : rows) {
    Series* s = ds.find(r.id);
    const std::size_t i = static_cast<std::size_t>((r.t - t0) / kStepSeconds);
    if (r.v) {
      s->values[i] = *r.v;
      s->missing[i] = 0;
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Linearized radial power flow

struct LineParams {
  double r = 0.0;  // ohm
  double x = 0.0;  // ohm
};

/// Buses in topological order (parent index < child index); bus 0 is the source.
struct RadialNetwork {
  std::vector<std::size_t> parent;  // parent[0] unused
  std::vector<LineParams> line;     // line feeding each bus
  double source_voltage = 240.0;
};

/// V_j = V_parent - (R_j F_j + X_j G_j) / V0, where F_j, G_j are the active/reactive
/// flows into bus j (sum of consumption in its subtree). p, q in W / var, consumption positive.
inline std::vector<double> linear_voltages(const RadialNetwork& net, std::span<const double> p, std::span<const double> q) {
  const std::size_t n = net.parent.size();
  if (p.size() != n || q.size() != n || net.line.size() != n) throw DimensionError("network/injection size mismatch");
  std::vector<double> fp(p.begin(), p.end()), fq(q.begin(), q.end());
  for (std::size_t j = n; j-- > 1;) {
    if (net.parent[j] >= j) throw UnsupportedError("network buses must be in topological order");
    fp[net.parent[j]] += fp[j];
    fq[net.parent[j]] += fq[j];
  }
  std::vector<double> v(n, net.source_voltage);
  for (std::size_t j = 1; j < n; ++j) {
    v[j] = v[net.parent[j]] - (net.line[j].r * fp[j] + net.line[j].x * fq[j]) / net.source_voltage;
  }
  return v;
}

// ---------------------------------------------------------------------------
// Synthetic grid specification

struct ElementParams {
  LineParams line;
  double demand_kw = 0.0;  // mean demand (feeder: unmetered customers behind the feeder head)
  double pv_kw = 0.0;      // installed PV at 1000 W/m2
  std::array<double, 3> phase_share{1.0 / 3, 1.0 / 3, 1.0 / 3};
};

struct DemandShape {
  double base = 0.55;
  double morning_peak = 0.35;
  double evening_peak = 0.6;
  double midday = 0.15;
  double weekend_factor = 1.1;
  double cooling_coeff = 0.03;  // per degree C above 25
  double feeder_noise = 0.10;   // stationary log-std of the demand fluctuation
  double prosumer_noise = 0.25;
  double persistence = 0.95;    // AR(1) coefficient per 15-minute step
};

struct WeatherParams {
  double temp_mean = 20.0;
  double temp_seasonal = 8.0;
  double temp_daily = 5.0;
  double temp_noise = 1.5;
  double irradiance_peak = 1000.0;
  double cloud_persistence = 0.99;
  double cloud_threshold = 0.8;  // regional cloud index above this darkens the sky
  double cloud_depth = 0.75;
  double local_cloud_share = 0.35;
};

struct NoiseParams {
  double voltage = 0.05;           // V
  double busbar_voltage = 0.05;    // V
  double prosumer_energy = 0.005;  // kWh
  double feeder_energy = 0.02;
  double substation_energy = 0.05;
  double global_energy = 0.2;
  double current = 0.5;            // A
  double temperature = 0.3;        // C
  double irradiance = 5.0;         // W/m2
};

struct SyntheticGridSpec {
  GridTopology topology = make_pilot_topology();
  double source_voltage = 240.0;
  double reactive_ratio = 0.3;               // Q = ratio * P
  std::vector<ElementParams> elements;       // per topology node
  DemandShape demand;
  WeatherParams weather;
  NoiseParams noise;
  double unmetered_global_kw = 2000.0;       // load seen only by the global meter
  double unmetered_noise = 0.1;

  void validate() const {
    if (!(source_voltage > 0.0)) throw ValidationError("source voltage must be positive");
    if (elements.size() != topology.size()) throw ValidationError("one element entry per node required");
    for (std::size_t i = 0; i < elements.size(); ++i) {
      const auto& e = elements[i];
      if (e.line.r < 0 || e.line.x < 0) throw ValidationError("negative impedance at '" + topology.node(i).id + "'");
      if (e.demand_kw < 0 || e.pv_kw < 0) throw ValidationError("negative demand/pv at '" + topology.node(i).id + "'");
    }
    const double noises[] = {noise.voltage, noise.busbar_voltage, noise.prosumer_energy, noise.feeder_energy,
                             noise.substation_energy, noise.global_energy, noise.current, noise.temperature,
                             noise.irradiance, demand.feeder_noise, demand.prosumer_noise, unmetered_noise};
    for (double s : noises) {
      if (s < 0) throw ValidationError("noise std must be non-negative");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json el = nlohmann::json::object();
    for (std::size_t i = 0; i < elements.size(); ++i) {
      const auto& e = elements[i];
      el[topology.node(i).id] = {{"r", e.line.r}, {"x", e.line.x}, {"demand_kw", e.demand_kw}, {"pv_kw", e.pv_kw},
                                 {"phase_share", e.phase_share}};
    }
    return {{"format", "gridgnn-grid-spec"},
            {"version", 1},
            {"topology", topology.to_json()},
            {"source_voltage", source_voltage},
            {"reactive_ratio", reactive_ratio},
            {"elements", el},
            {"demand",
             {{"base", demand.base}, {"morning_peak", demand.morning_peak}, {"evening_peak", demand.evening_peak},
              {"midday", demand.midday}, {"weekend_factor", demand.weekend_factor},
              {"cooling_coeff", demand.cooling_coeff}, {"feeder_noise", demand.feeder_noise},
              {"prosumer_noise", demand.prosumer_noise}, {"persistence", demand.persistence}}},
            {"weather",
             {{"temp_mean", weather.temp_mean}, {"temp_seasonal", weather.temp_seasonal},
              {"temp_daily", weather.temp_daily}, {"temp_noise", weather.temp_noise},
              {"irradiance_peak", weather.irradiance_peak}, {"cloud_persistence", weather.cloud_persistence},
              {"cloud_threshold", weather.cloud_threshold}, {"cloud_depth", weather.cloud_depth},
              {"local_cloud_share", weather.local_cloud_share}}},
            {"noise",
             {{"voltage", noise.voltage}, {"busbar_voltage", noise.busbar_voltage},
              {"prosumer_energy", noise.prosumer_energy}, {"feeder_energy", noise.feeder_energy},
              {"substation_energy", noise.substation_energy}, {"global_energy", noise.global_energy},
              {"current", noise.current}, {"temperature", noise.temperature}, {"irradiance", noise.irradiance}}},
            {"unmetered_global_kw", unmetered_global_kw},
            {"unmetered_noise", unmetered_noise}};
  }

  static SyntheticGridSpec from_json(const nlohmann::json& j) {
    try {
      SyntheticGridSpec s;
      s.topology = topology_from_json(j.at("topology"));
      s.source_voltage = j.value("source_voltage", 240.0);
      s.reactive_ratio = j.value("reactive_ratio", 0.3);
      s.elements.assign(s.topology.size(), ElementParams{});
      if (j.contains("elements")) {
        for (const auto& [id, e] : j.at("elements").items()) {
          auto idx = s.topology.find(id);
          if (!idx) throw ValidationError("element for undeclared node '" + id + "'");
          auto& el = s.elements[*idx];
          el.line.r = e.value("r", 0.0);
          el.line.x = e.value("x", 0.0);
          el.demand_kw = e.value("demand_kw", 0.0);
          el.pv_kw = e.value("pv_kw", 0.0);
          if (e.contains("phase_share")) e.at("phase_share").get_to(el.phase_share);
        }
      }
      auto num = [](const nlohmann::json& obj, const char* key, double& field) {
        if (obj.contains(key)) field = obj.at(key).get<double>();
      };
      if (j.contains("demand")) {
        const auto& d = j.at("demand");
        num(d, "base", s.demand.base);
        num(d, "morning_peak", s.demand.morning_peak);
        num(d, "evening_peak", s.demand.evening_peak);
        num(d, "midday", s.demand.midday);
        num(d, "weekend_factor", s.demand.weekend_factor);
        num(d, "cooling_coeff", s.demand.cooling_coeff);
        num(d, "feeder_noise", s.demand.feeder_noise);
        num(d, "prosumer_noise", s.demand.prosumer_noise);
        num(d, "persistence", s.demand.persistence);
      }
      if (j.contains("weather")) {
        const auto& w = j.at("weather");
        num(w, "temp_mean", s.weather.temp_mean);
        num(w, "temp_seasonal", s.weather.temp_seasonal);
        num(w, "temp_daily", s.weather.temp_daily);
        num(w, "temp_noise", s.weather.temp_noise);
        num(w, "irradiance_peak", s.weather.irradiance_peak);
        num(w, "cloud_persistence", s.weather.cloud_persistence);
        num(w, "cloud_threshold", s.weather.cloud_threshold);
        num(w, "cloud_depth", s.weather.cloud_depth);
        num(w, "local_cloud_share", s.weather.local_cloud_share);
      }
      if (j.contains("noise")) {
        const auto& n = j.at("noise");
        num(n, "voltage", s.noise.voltage);
        num(n, "busbar_voltage", s.noise.busbar_voltage);
        num(n, "prosumer_energy", s.noise.prosumer_energy);
        num(n, "feeder_energy", s.noise.feeder_energy);
        num(n, "substation_energy", s.noise.substation_energy);
        num(n, "global_energy", s.noise.global_energy);
        num(n, "current", s.noise.current);
        num(n, "temperature", s.noise.temperature);
        num(n, "irradiance", s.noise.irradiance);
      }
      num(j, "unmetered_global_kw", s.unmetered_global_kw);
      num(j, "unmetered_noise", s.unmetered_noise);
      s.validate();
      return s;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed grid spec: ") + e.what());
    }
  }

  std::string hash() const { return json_hash(to_json()); }
};

/// Default element parameters for any topology; `seed` draws them from fixed ranges.
/// Every `pv_heavy_stride`-th feeder carries enough unmetered PV to export at midday.
inline SyntheticGridSpec make_default_spec(GridTopology topology, std::uint64_t seed, std::size_t pv_heavy_stride = 3) {
  SyntheticGridSpec s;
  s.topology = std::move(topology);
  s.elements.assign(s.topology.size(), ElementParams{});
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  std::size_t feeder_no = 0;
  for (std::size_t i = 0; i < s.topology.size(); ++i) {
    auto& e = s.elements[i];
    const auto& n = s.topology.node(i);
    switch (n.kind) {
      case NodeKind::Global:
        break;
      case NodeKind::Substation:
        e.line.r = uni(0.0015, 0.003);
        e.line.x = 2.0 * e.line.r;
        break;
      case NodeKind::Feeder: {
        e.line.r = uni(0.006, 0.012);
        e.line.x = e.line.r;
        e.demand_kw = uni(40.0, 100.0);
        const bool heavy = pv_heavy_stride > 0 && feeder_no % pv_heavy_stride == 0;
        e.pv_kw = heavy ? uni(70.0, 110.0) : uni(0.0, 30.0);
        ++feeder_no;
        break;
      }
      case NodeKind::Prosumer:
        e.line.r = uni(0.03, 0.08);
        e.line.x = 0.5 * e.line.r;
        if (n.phases == 3) {
          e.demand_kw = uni(3.0, 6.0);
          e.pv_kw = uni(8.0, 14.0);
          double a = uni(0.8, 1.2), b = uni(0.8, 1.2), c = uni(0.8, 1.2);
          const double tot = a + b + c;
          e.phase_share = {a / tot, b / tot, c / tot};
        } else {
          e.demand_kw = uni(0.8, 2.0);
          e.pv_kw = uni(3.0, 6.0);
        }
        break;
    }
  }
  return s;
}

inline SyntheticGridSpec make_pilot_spec(std::uint64_t seed = 2019) { return make_default_spec(make_pilot_topology(), seed); }

// ---------------------------------------------------------------------------
// Simulation

/// Noise-free per-bus consumption (W) retained for closed-loop replay.
struct GroundTruth {
  RadialNetwork network;
  std::vector<std::size_t> node_bus;                     // topology node -> its bus (prosumer: phase a)
  std::vector<std::vector<std::size_t>> prosumer_buses;  // per topology node, one bus per phase
  std::vector<std::vector<double>> load_w;               // [bus][step], consumption positive
  double reactive_ratio = 0.3;

  std::vector<double> voltages(std::size_t step, std::span<const double> extra_w = {}) const {
    std::vector<double> p(load_w.size()), q(load_w.size());
    for (std::size_t b = 0; b < load_w.size(); ++b) {
      p[b] = load_w[b][step] + (extra_w.empty() ? 0.0 : extra_w[b]);
      q[b] = reactive_ratio * p[b];
    }
    return linear_voltages(network, p, q);
  }
};

struct Simulation {
  TimeSeriesDataset dataset;
  GroundTruth truth;
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 14695981039346656037ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Stationary AR(1) with the given marginal std.
class Ar1 {
 public:
  Ar1(double phi, double stdev, std::uint64_t seed) : phi_(phi), innov_(stdev * std::sqrt(1.0 - phi * phi)), rng_(seed) {
    state_ = stdev * normal_(rng_);
  }
  double next() {
    state_ = phi_ * state_ + innov_ * normal_(rng_);
    return state_;
  }

 private:
  double phi_, innov_, state_ = 0.0;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
};

inline double bump(double h, double centre, double width) {
  const double d = (h - centre) / width;
  return std::exp(-0.5 * d * d);
}

}  // namespace detail

inline constexpr std::size_t kDefaultLagHorizon = 192;

/// Simulate `steps` 15-minute intervals from `start`. Deterministic per (spec, start, steps, seed).
inline Simulation simulate(const SyntheticGridSpec& spec, std::int64_t start, std::size_t steps, std::uint64_t seed,
                           std::size_t min_steps = kDefaultLagHorizon) {
  spec.validate();
  if (steps == 0 || steps < min_steps) {
    throw ArgumentError("simulation duration of " + std::to_string(steps) + " steps is shorter than the lag horizon (" +
                        std::to_string(min_steps) + ")");
  }
  if (start % kStepSeconds != 0) throw ArgumentError("start must lie on the 15-minute grid");
  const GridTopology& topo = spec.topology;
  const double v0 = spec.source_voltage;

  // Bus layout: source, then nodes in breadth-first order; prosumers get one bus per phase.
  GroundTruth truth;
  truth.reactive_ratio = spec.reactive_ratio;
  truth.node_bus.assign(topo.size(), kNoNode);
  truth.prosumer_buses.assign(topo.size(), {});
  RadialNetwork& net = truth.network;
  net.source_voltage = v0;
  net.parent.push_back(0);
  net.line.push_back({});
  truth.node_bus[topo.root()] = 0;
  std::vector<std::size_t> queue{topo.root()};
  for (std::size_t qi = 0; qi < queue.size(); ++qi) {
    const std::size_t k = queue[qi];
    for (std::size_t c : topo.children(k)) {
      const auto& node = topo.node(c);
      const std::size_t pbus = truth.node_bus[k];
      const int phases = node.kind == NodeKind::Prosumer ? node.phases : 1;
      for (int ph = 0; ph < phases; ++ph) {
        net.parent.push_back(pbus);
        net.line.push_back(spec.elements[c].line);
        truth.prosumer_buses[c].push_back(net.parent.size() - 1);
      }
      truth.node_bus[c] = truth.prosumer_buses[c].front();
      if (node.kind != NodeKind::Prosumer) truth.prosumer_buses[c].clear();
      queue.push_back(c);
    }
  }
  const std::size_t nbus = net.parent.size();
  truth.load_w.assign(nbus, std::vector<double>(steps, 0.0));

  TimeSeriesDataset ds(start, steps);
  // Series in topology order so CSV output is stable.
  struct Sensors {
    std::vector<Series*> v;
  };
  std::vector<std::vector<Series*>> node_series(topo.size());
  std::vector<Series*> temp_series(topo.size(), nullptr), irr_series(topo.size(), nullptr);
  static const char* phase_suffix[] = {"_a", "_b", "_c"};
  for (std::size_t k = 0; k < topo.size(); ++k) {
    const auto& n = topo.node(k);
    auto add = [&](const std::string& var) { ds.add_series(sensor_id_for(n.id, var, false)); };
    switch (n.kind) {
      case NodeKind::Prosumer:
        if (n.phases == 3) {
          for (auto* s : phase_suffix) add(std::string("voltage") + s);
          for (auto* s : phase_suffix) add(std::string("energy") + s);
        } else {
          add("voltage");
          add("energy");
        }
        break;
      case NodeKind::Feeder:
        add("energy");
        add("current");
        break;
      case NodeKind::Substation:
        add("energy");
        add("reactive_energy");
        add("current");
        add("busbar_voltage");
        ds.add_series(sensor_id_for(n.id, "temperature", true));
        ds.add_series(sensor_id_for(n.id, "irradiance", true));
        break;
      case NodeKind::Global:
        add("energy");
        add("reactive_energy");
        break;
    }
  }
  auto series = [&](std::size_t k, const std::string& var, bool wx = false) -> Series& {
    return *ds.find(sensor_id_for(topo.node(k).id, var, wx));
  };

  // Weather: one regional cloud/temperature process plus a local one per substation.
  const auto& W = spec.weather;
  detail::Ar1 region_cloud(W.cloud_persistence, 1.0, detail::derive_seed(seed, "cloud:region"));
  detail::Ar1 region_temp(0.98, W.temp_noise, detail::derive_seed(seed, "temp:region"));
  std::vector<std::size_t> substations;
  for (std::size_t k = 0; k < topo.size(); ++k) {
    if (topo.node(k).kind == NodeKind::Substation) substations.push_back(k);
  }
  std::vector<detail::Ar1> local_cloud, local_temp;
  for (std::size_t k : substations) {
    local_cloud.emplace_back(0.95, 1.0, detail::derive_seed(seed, "cloud:" + topo.node(k).id));
    local_temp.emplace_back(0.95, 0.5 * W.temp_noise, detail::derive_seed(seed, "temp:" + topo.node(k).id));
  }
  std::vector<double> irradiance(topo.size(), 0.0), temperature(topo.size(), W.temp_mean);

  // Demand fluctuations per consuming bus (feeder background, prosumer phases) and the unmetered load.
  const auto& D = spec.demand;
  std::vector<std::optional<detail::Ar1>> demand_noise(nbus);
  for (std::size_t k = 0; k < topo.size(); ++k) {
    const auto& n = topo.node(k);
    if (n.kind == NodeKind::Feeder) {
      demand_noise[truth.node_bus[k]].emplace(D.persistence, D.feeder_noise, detail::derive_seed(seed, "demand:" + n.id));
    } else if (n.kind == NodeKind::Prosumer) {
      for (std::size_t ph = 0; ph < truth.prosumer_buses[k].size(); ++ph) {
        demand_noise[truth.prosumer_buses[k][ph]].emplace(
            D.persistence, D.prosumer_noise, detail::derive_seed(seed, "demand:" + n.id + ":" + std::to_string(ph)));
      }
    }
  }
  detail::Ar1 unmetered(D.persistence, spec.unmetered_noise, detail::derive_seed(seed, "demand:unmetered"));

  std::vector<std::mt19937_64> noise_rng;
  noise_rng.reserve(ds.series().size());
  for (const auto& s : ds.series()) noise_rng.emplace_back(detail::derive_seed(seed, "noise:" + s.sensor_id));
  std::normal_distribution<double> normal;
  auto measure = [&](Series& s, std::size_t t, double value, double stdev) {
    const std::size_t idx = static_cast<std::size_t>(&s - ds.series().data());
    s.values[t] = value + (stdev > 0 ? stdev * normal(noise_rng[idx]) : 0.0);
  };

  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> p(nbus), q(nbus);
  for (std::size_t t = 0; t < steps; ++t) {
    const std::int64_t ts = ds.timestamp(t) + kStepSeconds / 2;  // interval midpoint
    const double hour = static_cast<double>((ts % 86400 + 86400) % 86400) / 3600.0;
    const double doy = day_of_year(ts);
    const double season = std::cos(two_pi * (doy - 172.0) / 365.25);
    const double daylen = 12.0 + 2.5 * season;
    const double sunrise = 12.5 - daylen / 2.0;
    const double elev = hour > sunrise && hour < sunrise + daylen ? std::sin(std::numbers::pi * (hour - sunrise) / daylen) : 0.0;
    const double clear = W.irradiance_peak * (0.75 + 0.25 * season) * std::pow(elev, 1.2);
    const double rc = region_cloud.next();
    const double rt = region_temp.next();
    for (std::size_t si = 0; si < substations.size(); ++si) {
      const std::size_t k = substations[si];
      const double c = (1.0 - W.local_cloud_share) * rc + W.local_cloud_share * local_cloud[si].next();
      const double darkening = W.cloud_depth / (1.0 + std::exp(-4.0 * (c - W.cloud_threshold)));
      irradiance[k] = clear * (1.0 - darkening);
      temperature[k] = W.temp_mean + W.temp_seasonal * std::cos(two_pi * (doy - 200.0) / 365.25) +
                       W.temp_daily * std::cos(two_pi * (hour - 15.0) / 24.0) + rt + local_temp[si].next();
    }

    const int wd = weekday(ts);
    const double shape = (D.base + D.morning_peak * detail::bump(hour, 8.0, 1.5) + D.evening_peak * detail::bump(hour, 19.5, 2.2) +
                          D.midday * detail::bump(hour, 13.0, 3.0)) *
                         (wd >= 5 ? D.weekend_factor : 1.0);

    std::fill(p.begin(), p.end(), 0.0);
    for (std::size_t k = 0; k < topo.size(); ++k) {
      const auto& n = topo.node(k);
      if (n.kind != NodeKind::Feeder && n.kind != NodeKind::Prosumer) continue;
      const std::size_t sub = topo.ancestor_of_kind(k, NodeKind::Substation);
      const double irr = sub == kNoNode ? 0.0 : irradiance[sub];
      const double temp = sub == kNoNode ? W.temp_mean : temperature[sub];
      const double cooling = 1.0 + D.cooling_coeff * std::max(0.0, temp - 25.0);
      const auto& e = spec.elements[k];
      const double pv_w = 1000.0 * e.pv_kw * irr / 1000.0;
      if (n.kind == NodeKind::Feeder) {
        const std::size_t b = truth.node_bus[k];
        p[b] = 1000.0 * e.demand_kw * shape * cooling * std::exp(demand_noise[b]->next()) - pv_w;
      } else {
        const auto& buses = truth.prosumer_buses[k];
        for (std::size_t ph = 0; ph < buses.size(); ++ph) {
          const double share = buses.size() == 3 ? e.phase_share[ph] : 1.0;
          p[buses[ph]] = 1000.0 * e.demand_kw * share * shape * cooling * std::exp(demand_noise[buses[ph]]->next()) -
                         pv_w / static_cast<double>(buses.size());
        }
      }
    }
    for (std::size_t b = 0; b < nbus; ++b) {
      q[b] = spec.reactive_ratio * p[b];
      truth.load_w[b][t] = p[b];
    }
    const std::vector<double> v = linear_voltages(net, p, q);
    // Subtree flows for meter readings.
    std::vector<double> fp(p), fq(q);
    for (std::size_t j = nbus; j-- > 1;) {
      fp[net.parent[j]] += fp[j];
      fq[net.parent[j]] += fq[j];
    }
    const auto& N = spec.noise;
    const double kwh = 0.25 / 1000.0;
    double sub_total_p = 0.0, sub_total_q = 0.0;
    for (std::size_t k = 0; k < topo.size(); ++k) {
      const auto& n = topo.node(k);
      switch (n.kind) {
        case NodeKind::Prosumer: {
          const auto& buses = truth.prosumer_buses[k];
          for (std::size_t ph = 0; ph < buses.size(); ++ph) {
            const std::string sfx = buses.size() == 3 ? phase_suffix[ph] : "";
            measure(series(k, "voltage" + sfx), t, v[buses[ph]], N.voltage);
            measure(series(k, "energy" + sfx), t, p[buses[ph]] * kwh, N.prosumer_energy);
          }
          break;
        }
        case NodeKind::Feeder: {
          const std::size_t b = truth.node_bus[k];
          const double upstream_v = v[net.parent[b]];
          measure(series(k, "energy"), t, fp[b] * kwh, N.feeder_energy);
          measure(series(k, "current"), t, std::hypot(fp[b], fq[b]) / upstream_v, N.current);
          break;
        }
        case NodeKind::Substation: {
          const std::size_t b = truth.node_bus[k];
          sub_total_p += fp[b];
          sub_total_q += fq[b];
          measure(series(k, "energy"), t, fp[b] * kwh, N.substation_energy);
          measure(series(k, "reactive_energy"), t, fq[b] * kwh, N.substation_energy);
          measure(series(k, "current"), t, std::hypot(fp[b], fq[b]) / v[b], N.current);
          measure(series(k, "busbar_voltage"), t, v[b], N.busbar_voltage);
          measure(series(k, "temperature", true), t, temperature[k], N.temperature);
          measure(series(k, "irradiance", true), t, std::max(0.0, irradiance[k]), irradiance[k] > 0 ? N.irradiance : 0.0);
          break;
        }
        case NodeKind::Global:
          break;
      }
    }
    const double other = 1000.0 * spec.unmetered_global_kw * shape * std::exp(unmetered.next());
    measure(series(topo.root(), "energy"), t, (sub_total_p + other) * kwh, N.global_energy);
    measure(series(topo.root(), "reactive_energy"), t, (sub_total_q + spec.reactive_ratio * other) * kwh, N.global_energy);
  }
  return Simulation{std::move(ds), std::move(truth)};
}

/// Noise-free prosumer voltages at `step` after adding `extra_energy_kwh` (per 15 min) of
/// consumption at the feeder bus. Keys are voltage sensor ids ("p3.voltage", "p4.voltage_b").
inline std::map<std::string, double> replay_voltages(const SyntheticGridSpec& spec, const GroundTruth& truth, std::size_t step,
                                                     std::size_t feeder_node, double extra_energy_kwh) {
  const auto& topo = spec.topology;
  if (topo.node(feeder_node).kind != NodeKind::Feeder) throw ArgumentError("replay target must be a feeder");
  std::vector<double> extra(truth.load_w.size(), 0.0);
  extra[truth.node_bus[feeder_node]] = extra_energy_kwh * 1000.0 / 0.25;
  const auto v = truth.voltages(step, extra);
  std::map<std::string, double> out;
  static const char* phase_suffix[] = {"_a", "_b", "_c"};
  for (std::size_t k = 0; k < topo.size(); ++k) {
    const auto& buses = truth.prosumer_buses[k];
    for (std::size_t ph = 0; ph < buses.size(); ++ph) {
      out[sensor_id_for(topo.node(k).id, std::string("voltage") + (buses.size() == 3 ? phase_suffix[ph] : ""), false)] =
          v[buses[ph]];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Missing data

enum class MissingPattern { Random, Burst };

/// Flag exactly floor(rate * N) currently-observed points as missing (N = all points).
inline TimeSeriesDataset inject_missing(const TimeSeriesDataset& input, double rate, MissingPattern pattern, std::uint64_t seed) {
  if (!(rate >= 0.0) || rate >= 1.0) throw ArgumentError("missing rate must lie in [0, 1)");
  TimeSeriesDataset ds = input;
  const std::size_t total = ds.point_count();
  const auto target = static_cast<std::size_t>(std::floor(rate * static_cast<double>(total)));
  if (target == 0) return ds;
  std::vector<std::uint32_t> free;
  free.reserve(total);
  const std::size_t len = ds.length();
  for (std::size_t s = 0; s < ds.series().size(); ++s) {
    for (std::size_t t = 0; t < len; ++t) {
      if (!ds.series()[s].missing[t]) free.push_back(static_cast<std::uint32_t>(s * len + t));
    }
  }
  if (free.size() < target) throw ArgumentError("not enough observed points to flag");
  std::mt19937_64 rng(seed);
  auto flag = [&](std::size_t idx) {
    Series& s = ds.series()[idx / len];
    s.missing[idx % len] = 1;
    s.values[idx % len] = 0.0;
  };
  if (pattern == MissingPattern::Random) {
    for (std::size_t i = 0; i < target; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, free.size() - 1);
      std::swap(free[i], free[pick(rng)]);
      flag(free[i]);
    }
    return ds;
  }
  // Bursts: contiguous gaps of 4..96 steps in randomly chosen series.
  std::size_t flagged = 0;
  std::uniform_int_distribution<std::size_t> pick_series(0, ds.series().size() - 1);
  std::uniform_int_distribution<std::size_t> pick_start(0, len - 1);
  std::uniform_int_distribution<std::size_t> pick_len(4, 96);
  while (flagged < target) {
    Series& s = ds.series()[pick_series(rng)];
    const std::size_t begin = pick_start(rng);
    const std::size_t n = pick_len(rng);
    for (std::size_t t = begin; t < std::min(len, begin + n) && flagged < target; ++t) {
      if (!s.missing[t]) {
        s.missing[t] = 1;
        s.values[t] = 0.0;
        ++flagged;
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Exact Gaussian conditioning oracle

struct LinearGaussianModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// x_0 ~ N(0, root_std^2); x_{i+1} = coefficients[i] * x_i + N(0, noise_std[i]^2).
inline LinearGaussianModel chain_model(double root_std, const std::vector<double>& coefficients,
                                       const std::vector<double>& noise_std) {
  if (coefficients.size() != noise_std.size()) throw ArgumentError("one noise std per chain coefficient");
  const Eigen::Index n = static_cast<Eigen::Index>(coefficients.size()) + 1;
  // x = A e with A lower triangular, e ~ N(0, diag(s^2)).
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd s(n);
  s(0) = root_std;
  for (Eigen::Index i = 1; i < n; ++i) s(i) = noise_std[static_cast<std::size_t>(i - 1)];
  for (Eigen::Index i = 0; i < n; ++i) {
    a(i, i) = 1.0;
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = coefficients[static_cast<std::size_t>(i - 1)] * a(i - 1, j);
  }
  return {Eigen::VectorXd::Zero(n), a * s.array().square().matrix().asDiagonal() * a.transpose()};
}

/// Adds an independent noisy reading y_i = x_i + N(0, s^2) for each variable; layout [x..., y...].
inline LinearGaussianModel with_noisy_readings(const LinearGaussianModel& m, double reading_std) {
  const Eigen::Index n = m.mean.size();
  LinearGaussianModel out{Eigen::VectorXd::Zero(2 * n), Eigen::MatrixXd::Zero(2 * n, 2 * n)};
  out.mean.head(n) = m.mean;
  out.mean.tail(n) = m.mean;
  out.covariance.topLeftCorner(n, n) = m.covariance;
  out.covariance.topRightCorner(n, n) = m.covariance;
  out.covariance.bottomLeftCorner(n, n) = m.covariance;
  out.covariance.bottomRightCorner(n, n) = m.covariance + reading_std * reading_std * Eigen::MatrixXd::Identity(n, n);
  return out;
}

struct GaussianConditional {
  std::vector<std::size_t> free;  // indices of unobserved variables
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

/// mu_1 + S12 S22^-1 (y2 - mu_2),  S11 - S12 S22^-1 S21.
inline GaussianConditional exact_conditional(const LinearGaussianModel& model,
                                             const std::vector<std::pair<std::size_t, double>>& observed) {
  const std::size_t n = static_cast<std::size_t>(model.mean.size());
  std::vector<std::uint8_t> is_obs(n, 0);
  for (const auto& [i, v] : observed) {
    if (i >= n) throw ArgumentError("observed index out of range");
    if (is_obs[i]) throw ArgumentError("variable observed twice");
    is_obs[i] = 1;
  }
  GaussianConditional out;
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_obs[i]) out.free.push_back(i);
  }
  const auto nf = static_cast<Eigen::Index>(out.free.size());
  const auto no = static_cast<Eigen::Index>(observed.size());
  Eigen::VectorXd mu1(nf);
  Eigen::MatrixXd s11(nf, nf), s12(nf, no), s22(no, no);
  Eigen::VectorXd resid(no);
  for (Eigen::Index a = 0; a < nf; ++a) {
    mu1(a) = model.mean(static_cast<Eigen::Index>(out.free[static_cast<std::size_t>(a)]));
    for (Eigen::Index b = 0; b < nf; ++b) {
      s11(a, b) = model.covariance(static_cast<Eigen::Index>(out.free[static_cast<std::size_t>(a)]),
                                   static_cast<Eigen::Index>(out.free[static_cast<std::size_t>(b)]));
    }
    for (Eigen::Index b = 0; b < no; ++b) {
      s12(a, b) = model.covariance(static_cast<Eigen::Index>(out.free[static_cast<std::size_t>(a)]),
                                   static_cast<Eigen::Index>(observed[static_cast<std::size_t>(b)].first));
    }
  }
  for (Eigen::Index a = 0; a < no; ++a) {
    const auto ia = static_cast<Eigen::Index>(observed[static_cast<std::size_t>(a)].first);
    resid(a) = observed[static_cast<std::size_t>(a)].second - model.mean(ia);
    for (Eigen::Index b = 0; b < no; ++b) {
      s22(a, b) = model.covariance(ia, static_cast<Eigen::Index>(observed[static_cast<std::size_t>(b)].first));
    }
  }
  if (no == 0) {
    out.mean = mu1;
    out.covariance = s11;
    return out;
  }
  Eigen::LLT<Eigen::MatrixXd> llt(s22);
  const double scale = s22.diagonal().cwiseAbs().maxCoeff();
  if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 1e-12 * std::sqrt(scale)) {
    throw NumericalError("observed-block covariance is singular");
  }
  out.mean = mu1 + s12 * llt.solve(resid);
  out.covariance = s11 - s12 * llt.solve(s12.transpose());
  return out;
}

/// n draws from the model, one row per draw.
inline Eigen::MatrixXd sample_gaussian(const LinearGaussianModel& model, std::size_t n, std::uint64_t seed) {
  Eigen::LLT<Eigen::MatrixXd> llt(model.covariance);
  if (llt.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
  const Eigen::MatrixXd l = llt.matrixL();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const Eigen::Index d = model.mean.size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), d);
  Eigen::VectorXd z(d);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    for (Eigen::Index j = 0; j < d; ++j) z(j) = normal(rng);
    out.row(i) = (model.mean + l * z).transpose();
  }
  return out;
}

}  // namespace gridgnn
