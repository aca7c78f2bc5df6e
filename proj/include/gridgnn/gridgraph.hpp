#pragma once

// Grid topology hierarchy (global -> substation -> feeder -> prosumer) and the
// per-node feature schemas derived from it.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gridgnn/error.hpp"
#include "gridgnn/util.hpp"

namespace gridgnn {

enum class NodeKind { Global, Substation, Feeder, Prosumer };

inline std::string_view to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Global: return "global";
    case NodeKind::Substation: return "substation";
    case NodeKind::Feeder: return "feeder";
    case NodeKind::Prosumer: return "prosumer";
  }
  return "?";
}

inline std::optional<NodeKind> parse_node_kind(std::string_view s) {
  if (s == "global") return NodeKind::Global;
  if (s == "substation") return NodeKind::Substation;
  if (s == "feeder") return NodeKind::Feeder;
  if (s == "prosumer") return NodeKind::Prosumer;
  return std::nullopt;
}

inline std::optional<NodeKind> required_parent_kind(NodeKind k) {
  switch (k) {
    case NodeKind::Global: return std::nullopt;
    case NodeKind::Substation: return NodeKind::Global;
    case NodeKind::Feeder: return NodeKind::Substation;
    case NodeKind::Prosumer: return NodeKind::Feeder;
  }
  return std::nullopt;
}

struct GridNode {
  std::string id;
  NodeKind kind = NodeKind::Prosumer;
  int phases = 1;
};

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

/// Validated radial tree rooted at the single global node. Immutable after construction.
class GridTopology {
 public:
  GridTopology(std::vector<GridNode> nodes, const std::vector<std::pair<std::string, std::string>>& edges)
      : nodes_(std::move(nodes)) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (n.id.empty()) throw ValidationError("node with empty id");
      if (!index_.emplace(n.id, i).second) throw ValidationError("duplicate node id '" + n.id + "'");
      if (n.phases != 1 && n.phases != 3) {
        throw ValidationError("node '" + n.id + "' has phase count " + std::to_string(n.phases) + " (must be 1 or 3)");
      }
      if (n.phases == 3 && n.kind != NodeKind::Prosumer) {
        throw ValidationError("node '" + n.id + "' is not a prosumer but declares 3 phases");
      }
    }
    parent_.assign(nodes_.size(), kNoNode);
    children_.assign(nodes_.size(), {});
    for (const auto& [p, c] : edges) {
      const std::size_t pi = lookup(p, "edge parent");
      const std::size_t ci = lookup(c, "edge child");
      if (pi == ci) throw ValidationError("node '" + c + "' is its own parent");
      if (parent_[ci] != kNoNode) {
        throw ValidationError("node '" + c + "' has multiple parents ('" + nodes_[parent_[ci]].id + "', '" + p + "')");
      }
      const auto want = required_parent_kind(nodes_[ci].kind);
      if (!want || *want != nodes_[pi].kind) {
        throw ValidationError("node '" + c + "' of kind " + std::string(to_string(nodes_[ci].kind)) +
                              " cannot have parent '" + p + "' of kind " + std::string(to_string(nodes_[pi].kind)));
      }
      parent_[ci] = pi;
      children_[pi].push_back(ci);
      edges_.emplace_back(pi, ci);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].kind == NodeKind::Global) {
        if (root_ != kNoNode) throw ValidationError("second global node '" + nodes_[i].id + "'");
        root_ = i;
      } else if (parent_[i] == kNoNode) {
        throw ValidationError("node '" + nodes_[i].id + "' has no parent");
      }
    }
    if (root_ == kNoNode) throw ValidationError("topology has no global node");
    // Kind levels strictly increase along edges, so a parent-per-node graph reaching the root is a tree;
    // the walk below still guards against cycles.
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      std::size_t cur = i;
      for (std::size_t steps = 0; cur != root_; ++steps) {
        if (steps > nodes_.size()) throw ValidationError("cycle through node '" + nodes_[i].id + "'");
        cur = parent_[cur];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<GridNode>& nodes() const noexcept { return nodes_; }
  const GridNode& node(std::size_t i) const { return nodes_.at(i); }
  /// (parent, child) index pairs in document order.
  const std::vector<std::pair<std::size_t, std::size_t>>& edges() const noexcept { return edges_; }
  std::size_t root() const noexcept { return root_; }
  std::size_t parent(std::size_t i) const { return parent_.at(i); }
  const std::vector<std::size_t>& children(std::size_t i) const { return children_.at(i); }

  std::vector<std::size_t> neighbours(std::size_t i) const {
    std::vector<std::size_t> out;
    if (parent_.at(i) != kNoNode) out.push_back(parent_[i]);
    out.insert(out.end(), children_[i].begin(), children_[i].end());
    return out;
  }

  std::optional<std::size_t> find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index(std::string_view id) const {
    auto i = find(id);
    if (!i) throw ArgumentError("unknown node '" + std::string(id) + "'");
    return *i;
  }

  /// Nearest ancestor (or self) of the given kind.
  std::size_t ancestor_of_kind(std::size_t i, NodeKind kind) const {
    for (std::size_t cur = i; cur != kNoNode; cur = parent_[cur]) {
      if (nodes_[cur].kind == kind) return cur;
    }
    return kNoNode;
  }

  std::size_t count(NodeKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(nodes_.begin(), nodes_.end(), [&](const GridNode& n) { return n.kind == kind; }));
  }

  /// Hop distance between two nodes of the tree.
  std::size_t distance(std::size_t a, std::size_t b) const {
    std::vector<std::size_t> pa;
    for (std::size_t cur = a; cur != kNoNode; cur = parent_[cur]) pa.push_back(cur);
    std::size_t steps_b = 0;
    for (std::size_t cur = b; cur != kNoNode; cur = parent_[cur], ++steps_b) {
      auto it = std::find(pa.begin(), pa.end(), cur);
      if (it != pa.end()) return static_cast<std::size_t>(it - pa.begin()) + steps_b;
    }
    return kNoNode;
  }

  nlohmann::json to_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    nlohmann::json phases = nlohmann::json::object();
    for (const auto& n : nodes_) {
      nodes.push_back({{"id", n.id}, {"kind", to_string(n.kind)}});
      if (n.phases != 1) phases[n.id] = n.phases;
    }
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& [p, c] : edges_) edges.push_back({nodes_[p].id, nodes_[c].id});
    return {{"nodes", nodes}, {"edges", edges}, {"phases", phases}};
  }

  std::string hash() const { return json_hash(to_json()); }

 private:
  std::size_t lookup(const std::string& id, const char* role) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ValidationError(std::string(role) + " '" + id + "' is not a declared node");
    return it->second;
  }

  std::vector<GridNode> nodes_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::size_t> parent_;
  std::vector<std::vector<std::size_t>> children_;
  std::vector<std::pair<std::size_t, std::size_t>> edges_;
  std::size_t root_ = kNoNode;
};

inline GridTopology topology_from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("nodes")) throw ValidationError("topology document needs a 'nodes' array");
  std::vector<GridNode> nodes;
  for (const auto& n : doc.at("nodes")) {
    GridNode g;
    g.id = n.at("id").get<std::string>();
    const auto kind = parse_node_kind(n.at("kind").get<std::string>());
    if (!kind) throw ValidationError("node '" + g.id + "' has unknown kind '" + n.at("kind").get<std::string>() + "'");
    g.kind = *kind;
    nodes.push_back(std::move(g));
  }
  if (doc.contains("phases")) {
    for (const auto& [id, count] : doc.at("phases").items()) {
      auto it = std::find_if(nodes.begin(), nodes.end(), [&](const GridNode& g) { return g.id == id; });
      if (it == nodes.end()) throw ValidationError("phases entry for undeclared node '" + id + "'");
      it->phases = count.get<int>();
    }
  }
  std::vector<std::pair<std::string, std::string>> edges;
  if (doc.contains("edges")) {
    for (const auto& e : doc.at("edges")) {
      if (!e.is_array() || e.size() != 2) throw ValidationError("edge must be a [parent, child] pair");
      edges.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
    }
  }
  return GridTopology(std::move(nodes), edges);
}

/// Parse and validate the topology JSON document.
inline GridTopology load_topology(std::string_view document) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("topology is not valid JSON: ") + e.what());
  }
  try {
    return topology_from_json(doc);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed topology: ") + e.what());
  }
}

/// 1 global, 15 substations, 25 feeders, 28 prosumers of which 7 are three-phase.
inline GridTopology make_pilot_topology() {
  std::vector<GridNode> nodes{{"global", NodeKind::Global, 1}};
  std::vector<std::pair<std::string, std::string>> edges;
  for (int s = 1; s <= 15; ++s) {
    nodes.push_back({"s" + std::to_string(s), NodeKind::Substation, 1});
    edges.emplace_back("global", "s" + std::to_string(s));
  }
  // Substations 1..10 carry two feeders, 11..15 one.
  int f = 0;
  for (int s = 1; s <= 15; ++s) {
    for (int k = 0; k < (s <= 10 ? 2 : 1); ++k) {
      ++f;
      nodes.push_back({"f" + std::to_string(f), NodeKind::Feeder, 1});
      edges.emplace_back("s" + std::to_string(s), "f" + std::to_string(f));
    }
  }
  // Feeders 1..3 carry two prosumers, the rest one; every fourth prosumer is three-phase.
  int p = 0;
  for (int fi = 1; fi <= 25; ++fi) {
    for (int k = 0; k < (fi <= 3 ? 2 : 1); ++k) {
      ++p;
      nodes.push_back({"p" + std::to_string(p), NodeKind::Prosumer, p % 4 == 0 ? 3 : 1});
      edges.emplace_back("f" + std::to_string(fi), "p" + std::to_string(p));
    }
  }
  return GridTopology(std::move(nodes), edges);
}

// ---------------------------------------------------------------------------
// Feature schemas

struct SchemaConfig {
  std::vector<int> ar_lags{96, 144, 192};
  std::vector<std::string> single_phase_prosumer{"voltage", "energy"};
  std::vector<std::string> three_phase_prosumer{"voltage_a", "voltage_b", "voltage_c", "energy_a", "energy_b", "energy_c"};
  std::vector<std::string> feeder{"energy", "current"};
  std::vector<std::string> substation{"energy", "reactive_energy", "current", "busbar_voltage"};
  std::vector<std::string> substation_weather{"temperature", "irradiance"};
  std::vector<std::string> global{"energy", "reactive_energy"};
  /// Nodes with q <= compact_threshold get latent size min(q, compact_latent); larger nodes keep p = q.
  std::size_t compact_threshold = 8;
  std::size_t compact_latent = 6;

  nlohmann::json to_json() const {
    return {{"ar_lags", ar_lags},
            {"single_phase_prosumer", single_phase_prosumer},
            {"three_phase_prosumer", three_phase_prosumer},
            {"feeder", feeder},
            {"substation", substation},
            {"substation_weather", substation_weather},
            {"global", global},
            {"compact_threshold", compact_threshold},
            {"compact_latent", compact_latent}};
  }

  static SchemaConfig from_json(const nlohmann::json& j) {
    SchemaConfig c;
    auto opt = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    opt("ar_lags", c.ar_lags);
    opt("single_phase_prosumer", c.single_phase_prosumer);
    opt("three_phase_prosumer", c.three_phase_prosumer);
    opt("feeder", c.feeder);
    opt("substation", c.substation);
    opt("substation_weather", c.substation_weather);
    opt("global", c.global);
    opt("compact_threshold", c.compact_threshold);
    opt("compact_latent", c.compact_latent);
    return c;
  }

  int max_lag() const { return ar_lags.empty() ? 0 : *std::max_element(ar_lags.begin(), ar_lags.end()); }
};

struct Channel {
  std::string variable;
  int lag = 0;  // samples back in time; 0 = current value
  bool weather = false;
  std::string sensor_id;
};

struct NodeSchema {
  std::string node_id;
  NodeKind kind = NodeKind::Prosumer;
  std::vector<std::string> observed_variables;
  std::vector<int> ar_lags;
  std::vector<std::string> weather_covariates;
  std::size_t q = 0;
  std::size_t p = 0;
  std::vector<Channel> channels;  // variable-major: var@0, var@lag1, ..., next var

  /// Current-time prosumer voltage, the quantity the voltage-prediction service estimates.
  bool is_voltage_target(std::size_t c) const {
    const auto& ch = channels.at(c);
    return kind == NodeKind::Prosumer && ch.lag == 0 && ch.variable.starts_with("voltage");
  }

  /// Current-time electrical channels at feeder/substation/global nodes (load-dependent readings).
  bool is_load_channel(std::size_t c) const {
    const auto& ch = channels.at(c);
    return kind != NodeKind::Prosumer && ch.lag == 0 && !ch.weather;
  }

  std::optional<std::size_t> channel_index(std::string_view variable, int lag = 0) const {
    for (std::size_t c = 0; c < channels.size(); ++c) {
      if (channels[c].variable == variable && channels[c].lag == lag) return c;
    }
    return std::nullopt;
  }
};

inline std::string sensor_id_for(const std::string& node_id, const std::string& variable, bool weather) {
  return (weather ? "wx:" : "") + node_id + "." + variable;
}

inline NodeSchema make_schema(const std::string& node_id, NodeKind kind, std::vector<std::string> observed,
                              std::vector<std::string> weather, const std::vector<int>& lags, std::size_t latent) {
  NodeSchema s;
  s.node_id = node_id;
  s.kind = kind;
  s.observed_variables = std::move(observed);
  s.weather_covariates = std::move(weather);
  s.ar_lags = lags;
  auto add = [&](const std::string& var, bool wx) {
    s.channels.push_back({var, 0, wx, sensor_id_for(node_id, var, wx)});
    for (int lag : lags) s.channels.push_back({var, lag, wx, sensor_id_for(node_id, var, wx)});
  };
  for (const auto& v : s.observed_variables) add(v, false);
  for (const auto& v : s.weather_covariates) add(v, true);
  s.q = s.channels.size();
  s.p = latent;
  if (s.p == 0 || s.p > s.q) throw SchemaError("node '" + node_id + "' latent size must be in [1, q]");
  return s;
}

/// Schemas aligned with topology node indices. Pure function of its inputs.
inline std::vector<NodeSchema> derive_schemas(const GridTopology& topology, const SchemaConfig& config) {
  std::vector<NodeSchema> out;
  out.reserve(topology.size());
  const std::size_t width = 1 + config.ar_lags.size();
  for (const auto& n : topology.nodes()) {
    std::vector<std::string> observed;
    std::vector<std::string> weather;
    switch (n.kind) {
      case NodeKind::Prosumer:
        observed = n.phases == 3 ? config.three_phase_prosumer : config.single_phase_prosumer;
        break;
      case NodeKind::Feeder:
        observed = config.feeder;
        break;
      case NodeKind::Substation:
        observed = config.substation;
        weather = config.substation_weather;
        break;
      case NodeKind::Global:
        observed = config.global;
        break;
      default:
        throw SchemaError("node '" + n.id + "' has an unknown kind");
    }
    if (observed.empty()) throw SchemaError("no observed variables configured for node '" + n.id + "'");
    const std::size_t q = (observed.size() + weather.size()) * width;
    const std::size_t p = q <= config.compact_threshold ? std::min(q, config.compact_latent) : q;
    out.push_back(make_schema(n.id, n.kind, std::move(observed), std::move(weather), config.ar_lags, p));
  }
  return out;
}

inline std::size_t total_feature_dimension(const std::vector<NodeSchema>& schemas) {
  std::size_t q = 0;
  for (const auto& s : schemas) q += s.q;
  return q;
}

inline std::size_t total_latent_dimension(const std::vector<NodeSchema>& schemas) {
  std::size_t p = 0;
  for (const auto& s : schemas) p += s.p;
  return p;
}

}  // namespace gridgnn
