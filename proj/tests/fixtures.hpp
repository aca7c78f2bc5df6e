#pragma once

// Small topologies, schemas and samples shared by the test binaries.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gridgnn/features.hpp"
#include "gridgnn/gridgraph.hpp"

namespace fixture {

using namespace gridgnn;

/// Short lag list and a single variable per non-prosumer node keep q small.
inline SchemaConfig tiny_schema_config() {
  SchemaConfig c;
  c.ar_lags = {96};
  c.single_phase_prosumer = {"voltage", "energy"};
  c.three_phase_prosumer = {"voltage_a", "voltage_b", "voltage_c"};
  c.feeder = {"energy"};
  c.substation = {"energy", "busbar_voltage"};
  c.substation_weather = {};
  c.global = {"energy"};
  c.compact_threshold = 3;
  c.compact_latent = 2;
  return c;
}

/// Random radial tree with at most `max_nodes` nodes (global, substations, feeders, prosumers).
inline GridTopology random_tree(std::mt19937_64& rng, std::size_t max_nodes = 10) {
  std::vector<GridNode> nodes{{"g", NodeKind::Global, 1}};
  std::vector<std::pair<std::string, std::string>> edges;
  std::uniform_int_distribution<int> coin(0, 1);
  int s = 0, f = 0, p = 0;
  auto add = [&](const std::string& parent, std::string id, NodeKind kind, int phases) {
    nodes.push_back({id, kind, phases});
    edges.emplace_back(parent, std::move(id));
  };
  while (nodes.size() + 3 <= max_nodes) {
    const std::string sid = "s" + std::to_string(++s);
    add("g", sid, NodeKind::Substation, 1);
    const int feeders = 1 + (nodes.size() + 5 <= max_nodes ? coin(rng) : 0);
    for (int i = 0; i < feeders && nodes.size() + 2 <= max_nodes; ++i) {
      const std::string fid = "f" + std::to_string(++f);
      add(sid, fid, NodeKind::Feeder, 1);
      add(fid, "p" + std::to_string(++p), NodeKind::Prosumer, coin(rng) ? 3 : 1);
    }
    if (coin(rng)) break;
  }
  return GridTopology(std::move(nodes), edges);
}

/// Chain g - s - f - p with one single-phase prosumer.
inline GridTopology chain4() {
  return GridTopology({{"g", NodeKind::Global, 1}, {"s", NodeKind::Substation, 1}, {"f", NodeKind::Feeder, 1},
                       {"p", NodeKind::Prosumer, 1}},
                      {{"g", "s"}, {"s", "f"}, {"f", "p"}});
}

/// Standard-normal values; each entry missing with probability `missing`.
inline Sample random_sample(const std::vector<NodeSchema>& schemas, std::mt19937_64& rng, double missing = 0.0,
                            std::int64_t timestamp = 0) {
  Sample s = make_empty_sample(schemas, timestamp);
  std::normal_distribution<double> n;
  std::bernoulli_distribution drop(missing);
  for (std::size_t k = 0; k < schemas.size(); ++k) {
    for (std::size_t c = 0; c < schemas[k].q; ++c) {
      s.values[k][c] = n(rng);
      s.mask[k][c] = drop(rng) ? 0 : 1;
    }
  }
  s.update_missing_fraction();
  return s;
}

}  // namespace fixture
