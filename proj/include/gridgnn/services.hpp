#pragma once

// Congestion flagging by a one-sided Z-test on predicted voltages, and
// flexibility-bid estimation by imputing feeder/substation loads with the
// offending voltages clamped to the target.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gridgnn/error.hpp"
#include "gridgnn/features.hpp"
#include "gridgnn/gridgraph.hpp"
#include "gridgnn/imputation.hpp"
#include "gridgnn/util.hpp"

namespace gridgnn {

/// Standard normal CDF.
inline double phi(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

enum class CongestionMode { Overvoltage, Undervoltage };

struct CongestionConfig {
  double threshold = 240.0;  // V
  double z = 1.0;
  CongestionMode mode = CongestionMode::Overvoltage;
};

struct CongestionEvent {
  std::string node_id;
  std::string phase;  // voltage variable, e.g. "voltage" or "voltage_b"
  std::size_t node = 0;
  std::size_t channel = 0;
  std::int64_t timestamp = 0;
  double threshold = 0.0;
  double mean = 0.0;
  double sigma = 0.0;
  double z_score = 0.0;  // +-inf when sigma = 0 and mean != threshold
  double exceedance_probability = 0.0;

  std::string id() const { return node_id + "." + phase + "@" + format_rfc3339(timestamp); }
};

/// Signed Z-score of a prediction against the threshold in the configured direction.
inline double congestion_z(double mean, double sigma, double threshold, CongestionMode mode) {
  const double excess = mode == CongestionMode::Overvoltage ? mean - threshold : threshold - mean;
  if (sigma > 0.0) return excess / sigma;
  if (excess > 0.0) return std::numeric_limits<double>::infinity();
  if (excess < 0.0) return -std::numeric_limits<double>::infinity();
  return 0.0;
}

/// Flag rule: z >= cfg.z, or for sigma = 0, strict exceedance of the threshold.
inline bool is_congested(double mean, double sigma, const CongestionConfig& cfg) {
  if (!(sigma >= 0.0)) throw ArgumentError("sigma must be non-negative");
  if (sigma == 0.0) return cfg.mode == CongestionMode::Overvoltage ? mean > cfg.threshold : mean < cfg.threshold;
  return congestion_z(mean, sigma, cfg.threshold, cfg.mode) >= cfg.z;
}

inline std::vector<CongestionEvent> detect_congestions(std::span<const VoltagePrediction> predictions,
                                                       const CongestionConfig& cfg = {}) {
  std::vector<CongestionEvent> out;
  for (const auto& p : predictions) {
    if (!is_congested(p.mean, p.sigma, cfg)) continue;
    const double z = congestion_z(p.mean, p.sigma, cfg.threshold, cfg.mode);
    out.push_back({p.node_id, p.variable, p.node, p.channel, p.timestamp, cfg.threshold, p.mean, p.sigma, z, phi(z)});
  }
  return out;
}

inline nlohmann::json to_json(const CongestionEvent& e) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"id", e.id()},
          {"node_id", e.node_id},
          {"phase", e.phase},
          {"timestamp", format_rfc3339(e.timestamp)},
          {"threshold", e.threshold},
          {"mean", e.mean},
          {"sigma", e.sigma},
          {"z_score", num(e.z_score)},
          {"exceedance_probability", e.exceedance_probability}};
}

// ---------------------------------------------------------------------------
// Flexibility bids

struct BidOptions {
  std::optional<double> target_voltage;  // default: each event's threshold
  bool mask_loads = true;                // hide lag-0 load channels at the feeder and substation
  ImputationOptions imputation;
};

struct FlexibilityBid {
  std::string substation_id;
  std::string feeder_id;
  std::int64_t timestamp = 0;
  double baseline = 0.0;     // feeder energy, kWh per 15 min
  double constrained = 0.0;  // imputed feeder energy under the clamp
  double delta = 0.0;        // constrained - baseline; > 0 asks for more load
  double target_voltage = 0.0;
  std::vector<std::string> events;
  std::size_t iterations = 0;
  bool low_confidence = false;
};

inline nlohmann::json to_json(const FlexibilityBid& b) {
  return {{"substation_id", b.substation_id},
          {"feeder_id", b.feeder_id},
          {"timestamp", format_rfc3339(b.timestamp)},
          {"baseline_kwh", b.baseline},
          {"constrained_kwh", b.constrained},
          {"delta_kwh", b.delta},
          {"target_voltage", b.target_voltage},
          {"events", b.events},
          {"iterations", b.iterations},
          {"low_confidence", b.low_confidence}};
}

/// Events sharing a (feeder, timestamp), merged into one bid request.
struct BidRequest {
  const Sample* sample = nullptr;  // standardized; voltage inputs typically hidden
  std::vector<CongestionEvent> events;
};

/// Groups events by (feeder, timestamp); `sample_for` maps a timestamp to its sample.
template <class Lookup>
std::vector<BidRequest> group_events(const GridTopology& topology, std::span<const CongestionEvent> events, Lookup&& sample_for) {
  std::map<std::pair<std::int64_t, std::size_t>, BidRequest> groups;
  for (const auto& e : events) {
    const std::size_t feeder = topology.ancestor_of_kind(e.node, NodeKind::Feeder);
    if (feeder == kNoNode) throw ArgumentError("event node '" + e.node_id + "' has no feeder");
    auto& g = groups[{e.timestamp, feeder}];
    if (!g.sample) g.sample = sample_for(e.timestamp);
    g.events.push_back(e);
  }
  std::vector<BidRequest> out;
  for (auto& [key, g] : groups) out.push_back(std::move(g));
  return out;
}

/// Bids for many requests, imputed jointly.
template <GaussianModel M>
std::vector<FlexibilityBid> estimate_bids(const M& model, const GridTopology& topology, std::span<const BidRequest> requests,
                                          const BidOptions& opt = {}) {
  const auto& schemas = model.schemas();
  const auto& stats = model.standardizer();
  std::vector<Sample> problems;
  std::vector<FlexibilityBid> bids;
  std::vector<std::size_t> feeders;
  problems.reserve(requests.size());
  for (const auto& req : requests) {
    if (!req.sample) throw ArgumentError("bid request without a sample");
    if (req.events.empty()) throw ArgumentError("bid request without events");
    const std::size_t feeder = topology.ancestor_of_kind(req.events.front().node, NodeKind::Feeder);
    const std::size_t substation = topology.ancestor_of_kind(feeder, NodeKind::Substation);
    if (feeder == kNoNode || substation == kNoNode) throw ArgumentError("event is not below a feeder and substation");
    const auto energy = schemas[feeder].channel_index("energy", 0);
    if (!energy) throw SchemaError("feeder '" + schemas[feeder].node_id + "' has no energy channel");
    if (!req.sample->mask[feeder][*energy]) throw ArgumentError("baseline feeder energy is not observed");

    Sample s = *req.sample;
    FlexibilityBid bid;
    bid.substation_id = schemas[substation].node_id;
    bid.feeder_id = schemas[feeder].node_id;
    bid.timestamp = s.timestamp;
    bid.baseline = stats.to_physical(feeder, *energy, s.values[feeder][*energy]);
    double target = 0.0;
    for (const auto& e : req.events) {
      if (topology.ancestor_of_kind(e.node, NodeKind::Feeder) != feeder) throw ArgumentError("events span several feeders");
      const double t = opt.target_voltage.value_or(e.threshold);
      target = bid.events.empty() ? t : std::max(target, t);
      s.values[e.node][e.channel] = stats.to_standard(e.node, e.channel, t);
      s.mask[e.node][e.channel] = 1;
      bid.events.push_back(e.id());
    }
    bid.target_voltage = target;
    if (opt.mask_loads) {
      for (std::size_t k : {feeder, substation}) {
        for (std::size_t c = 0; c < schemas[k].q; ++c) {
          if (schemas[k].is_load_channel(c)) s.mask[k][c] = 0;
        }
      }
    }
    s.update_missing_fraction();
    problems.push_back(std::move(s));
    bids.push_back(std::move(bid));
    feeders.push_back(feeder);
  }
  const auto results = impute_all(model, std::span<const Sample>(problems), opt.imputation);
  for (std::size_t i = 0; i < bids.size(); ++i) {
    const std::size_t f = feeders[i];
    const std::size_t c = *schemas[f].channel_index("energy", 0);
    bids[i].constrained = stats.to_physical(f, c, results[i].filled.values[f][c]);
    bids[i].delta = bids[i].constrained - bids[i].baseline;
    bids[i].iterations = results[i].iterations;
    bids[i].low_confidence = !results[i].converged;
  }
  return bids;
}

template <GaussianModel M>
FlexibilityBid estimate_bid(const M& model, const GridTopology& topology, const Sample& sample,
                            const std::vector<CongestionEvent>& events, const BidOptions& opt = {}) {
  const BidRequest req{&sample, events};
  return estimate_bids(model, topology, std::span<const BidRequest>(&req, 1), opt).front();
}

/// Plot-ready rows: timestamp, channel, actual, mean, mean +- 2 sigma, threshold, flagged.
struct PlotRow {
  std::int64_t timestamp = 0;
  std::string sensor_id;
  std::optional<double> actual;
  double mean = 0.0;
  double sigma = 0.0;
  double threshold = 0.0;
  bool flagged = false;
};

inline void write_plot_csv(const std::vector<PlotRow>& rows, std::ostream& out) {
  out << "timestamp,sensor_id,actual,mean,lower,upper,threshold,flagged\n";
  for (const auto& r : rows) {
    out << format_rfc3339(r.timestamp) << ',' << r.sensor_id << ',' << (r.actual ? format_double(*r.actual) : std::string())
        << ',' << format_double(r.mean) << ',' << format_double(r.mean - 2.0 * r.sigma) << ','
        << format_double(r.mean + 2.0 * r.sigma) << ',' << format_double(r.threshold) << ',' << (r.flagged ? 1 : 0) << '\n';
  }
}

}  // namespace gridgnn
