#pragma once

// Message-passing graph network: per-node encoders and Gaussian decoders,
// per-directed-edge message functions and per-node aggregators.
//
//   x_k(0)   = enc_k([y_k, 1 - mask_k])
//   m_kj(t)  = msg_kj([x_k(t), x_j(t)])            for every neighbour j of k
//   x_k(t+1) = agg_k([x_k(t), mean_j m_kj(t)])
//   mu_k     = dec_mu_k(x_k(T)),  var_k = exp(clamp(dec_var_k(x_k(T))))
//
// Message and aggregator weights are reused across the T steps.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gridgnn/diffcore.hpp"
#include "gridgnn/error.hpp"
#include "gridgnn/features.hpp"
#include "gridgnn/gridgraph.hpp"
#include "gridgnn/util.hpp"

namespace gridgnn {

struct GnnConfig {
  std::size_t layers = 2;                 // linear layers per MLP
  std::size_t message_passing_steps = 5;  // T
  std::size_t message_dim = 0;            // 0: destination node's latent size
  std::size_t hidden_width = 0;           // 0: max(in, out) per MLP
  bool share_by_type = false;             // share functions across nodes with equal (kind, q)
  double min_variance = 1e-6;             // standardized units
  double max_variance = 1e6;

  nlohmann::json to_json() const {
    return {{"layers", layers},
            {"message_passing_steps", message_passing_steps},
            {"message_dim", message_dim},
            {"hidden_width", hidden_width},
            {"share_by_type", share_by_type},
            {"min_variance", min_variance},
            {"max_variance", max_variance}};
  }

  static GnnConfig from_json(const nlohmann::json& j) {
    GnnConfig c;
    if (j.contains("layers")) j.at("layers").get_to(c.layers);
    if (j.contains("message_passing_steps")) j.at("message_passing_steps").get_to(c.message_passing_steps);
    if (j.contains("message_dim")) j.at("message_dim").get_to(c.message_dim);
    if (j.contains("hidden_width")) j.at("hidden_width").get_to(c.hidden_width);
    if (j.contains("share_by_type")) j.at("share_by_type").get_to(c.share_by_type);
    if (j.contains("min_variance")) j.at("min_variance").get_to(c.min_variance);
    if (j.contains("max_variance")) j.at("max_variance").get_to(c.max_variance);
    return c;
  }
};

/// Widths of an L-layer MLP whose hidden layers are `hidden` wide (0: max(in, out)).
inline std::vector<std::size_t> mlp_widths(std::size_t in, std::size_t out, std::size_t layers, std::size_t hidden = 0) {
  if (layers == 0) throw ContractError("an MLP needs at least one layer");
  std::vector<std::size_t> w{in};
  for (std::size_t l = 1; l < layers; ++l) w.push_back(hidden ? hidden : std::max(in, out));
  w.push_back(out);
  return w;
}

struct NodeState {
  std::string node_id;
  std::vector<double> x;
};

class GnnModel {
 public:
  GnnModel(GridTopology topology, std::vector<NodeSchema> schemas, GnnConfig config, std::uint64_t seed)
      : topology_(std::move(topology)), schemas_(std::move(schemas)), config_(config) {
    if (schemas_.size() != topology_.size()) throw DimensionError("one schema per topology node required");
    for (std::size_t k = 0; k < schemas_.size(); ++k) {
      if (schemas_[k].node_id != topology_.node(k).id) {
        throw DimensionError("schema order does not follow topology at node '" + topology_.node(k).id + "'");
      }
    }
    if (config_.message_passing_steps > 1000) throw ContractError("implausible message_passing_steps");
    std::mt19937_64 rng(seed);
    const std::size_t L = config_.layers;
    const std::size_t H = config_.hidden_width;
    for (std::size_t k = 0; k < schemas_.size(); ++k) {
      const auto& s = schemas_[k];
      const std::string key = node_key(k);
      NodeFunctions fns;
      fns.encoder = make_or_bind(key + "/enc", mlp_widths(2 * s.q, s.p, L, H), rng);
      fns.mean_decoder = make_or_bind(key + "/dec_mu", mlp_widths(s.p, s.q, L, H), rng);
      fns.variance_decoder = make_or_bind(key + "/dec_var", mlp_widths(s.p, s.q, L, H), rng);
      fns.aggregator = make_or_bind(key + "/agg", mlp_widths(s.p + message_dim(k), s.p, L, H), rng);
      nodes_.push_back(std::move(fns));
    }
    incoming_.assign(schemas_.size(), {});
    for (const auto& [parent, child] : topology_.edges()) {
      add_edge(parent, child, rng);
      add_edge(child, parent, rng);
    }
    standardizer_ = Standardizer::identity(schemas_);
  }

  const GridTopology& topology() const noexcept { return topology_; }
  const std::vector<NodeSchema>& schemas() const noexcept { return schemas_; }
  const GnnConfig& config() const noexcept { return config_; }
  const ParameterSet& parameters() const noexcept { return params_; }
  ParameterSet& parameters() noexcept { return params_; }
  const Standardizer& standardizer() const noexcept { return standardizer_; }
  void set_standardizer(Standardizer s) {
    s.check(schemas_);
    standardizer_ = std::move(s);
  }

  std::size_t message_dim(std::size_t k) const {
    return config_.message_dim ? config_.message_dim : schemas_.at(k).p;
  }
  std::size_t directed_edge_count() const noexcept { return edges_.size(); }

  /// Message functions into node k, as (source node, mlp) pairs.
  std::vector<std::pair<std::size_t, const Mlp*>> incoming(std::size_t k) const {
    std::vector<std::pair<std::size_t, const Mlp*>> out;
    for (std::size_t e : incoming_.at(k)) out.emplace_back(edges_[e].source, &edges_[e].fn);
    return out;
  }
  const Mlp& encoder(std::size_t k) const { return nodes_.at(k).encoder; }
  const Mlp& mean_decoder(std::size_t k) const { return nodes_.at(k).mean_decoder; }
  const Mlp& variance_decoder(std::size_t k) const { return nodes_.at(k).variance_decoder; }
  const Mlp& aggregator(std::size_t k) const { return nodes_.at(k).aggregator; }

  std::vector<Var> encode(Tape& tape, const FeatureBatch& batch) const {
    if (batch.size() != schemas_.size()) throw DimensionError("feature batch must cover every node");
    std::vector<Var> states;
    states.reserve(schemas_.size());
    for (std::size_t k = 0; k < schemas_.size(); ++k) {
      const auto& blk = batch[k];
      if (blk.values.cols() != schemas_[k].q || blk.mask.cols() != schemas_[k].q ||
          blk.values.rows() != blk.mask.rows()) {
        throw DimensionError("features at node '" + schemas_[k].node_id + "' must have " +
                             std::to_string(schemas_[k].q) + " values and mask entries");
      }
      const Var in = tape.concat({tape.constant(blk.values), tape.constant(missing_indicator(blk.mask))});
      states.push_back(mlp_forward(tape, params_, nodes_[k].encoder, in));
    }
    return states;
  }

  std::vector<Var> message_pass(Tape& tape, std::vector<Var> states) const {
    if (states.size() != schemas_.size()) throw DimensionError("one state per node required");
    for (std::size_t t = 0; t < config_.message_passing_steps; ++t) {
      std::vector<Var> next(states.size());
      for (std::size_t k = 0; k < schemas_.size(); ++k) {
        const std::size_t rows = tape.value(states[k]).rows();
        Var pooled;
        if (incoming_[k].empty()) {
          pooled = tape.constant(Tensor::matrix(rows, message_dim(k)));
        } else {
          bool first = true;
          for (std::size_t e : incoming_[k]) {
            const Var m = mlp_forward(tape, params_, edges_[e].fn, tape.concat({states[k], states[edges_[e].source]}));
            pooled = first ? m : tape.add(pooled, m);
            first = false;
          }
          if (incoming_[k].size() > 1) pooled = tape.scale(pooled, 1.0 / static_cast<double>(incoming_[k].size()));
        }
        next[k] = mlp_forward(tape, params_, nodes_[k].aggregator, tape.concat({states[k], pooled}));
      }
      states = std::move(next);
    }
    return states;
  }

  DecodedVars decode(Tape& tape, const std::vector<Var>& states) const {
    if (states.size() != schemas_.size()) throw DimensionError("one state per node required");
    DecodedVars out;
    const double lo = std::log(config_.min_variance);
    const double hi = std::log(config_.max_variance);
    for (std::size_t k = 0; k < schemas_.size(); ++k) {
      out.mean.push_back(mlp_forward(tape, params_, nodes_[k].mean_decoder, states[k]));
      out.log_variance.push_back(tape.clamp(mlp_forward(tape, params_, nodes_[k].variance_decoder, states[k]), lo, hi));
    }
    return out;
  }

  DecodedVars forward(Tape& tape, const FeatureBatch& batch) const {
    return decode(tape, message_pass(tape, encode(tape, batch)));
  }

  std::size_t parameter_count() const { return params_.scalar_count(); }

 private:
  struct NodeFunctions {
    Mlp encoder, mean_decoder, variance_decoder, aggregator;
  };
  struct EdgeFunction {
    std::size_t target;
    std::size_t source;
    Mlp fn;
  };

  std::string node_key(std::size_t k) const {
    const auto& s = schemas_[k];
    if (config_.share_by_type) return "type:" + std::string(to_string(s.kind)) + ":q" + std::to_string(s.q);
    return s.node_id;
  }

  Mlp make_or_bind(const std::string& name, std::vector<std::size_t> widths, std::mt19937_64& rng) {
    if (params_.contains(name + "/W0")) return bind_mlp(params_, name, std::move(widths));
    return add_mlp(params_, name, std::move(widths), rng);
  }

  void add_edge(std::size_t target, std::size_t source, std::mt19937_64& rng) {
    const std::string key = "msg:" + node_key(target) + "<-" + node_key(source);
    const std::size_t in = schemas_[target].p + schemas_[source].p;
    EdgeFunction e{target, source, make_or_bind(key, mlp_widths(in, message_dim(target), config_.layers, config_.hidden_width), rng)};
    incoming_[target].push_back(edges_.size());
    edges_.push_back(std::move(e));
  }

  GridTopology topology_;
  std::vector<NodeSchema> schemas_;
  GnnConfig config_;
  ParameterSet params_;
  std::vector<NodeFunctions> nodes_;
  std::vector<EdgeFunction> edges_;
  std::vector<std::vector<std::size_t>> incoming_;
  Standardizer standardizer_;
};

inline std::size_t count_parameters(const GnnModel& model) { return model.parameter_count(); }

// ---------------------------------------------------------------------------
// Single-sample convenience API (standardized features in, physical predictions out)

inline std::vector<NodeState> encode(const GnnModel& model, const Sample& sample) {
  Tape tape;
  const auto states = model.encode(tape, make_batch(model.schemas(), sample));
  std::vector<NodeState> out;
  for (std::size_t k = 0; k < states.size(); ++k) {
    const auto v = tape.value(states[k]).values();
    out.push_back({model.schemas()[k].node_id, {v.begin(), v.end()}});
  }
  return out;
}

inline std::vector<NodeState> message_pass(const GnnModel& model, const std::vector<NodeState>& states) {
  Tape tape;
  std::vector<Var> vars;
  for (std::size_t k = 0; k < states.size(); ++k) {
    if (states[k].x.size() != model.schemas().at(k).p) {
      throw DimensionError("state at node '" + states[k].node_id + "' must have length " +
                           std::to_string(model.schemas()[k].p));
    }
    vars.push_back(tape.constant(Tensor::row(states[k].x)));
  }
  vars = model.message_pass(tape, std::move(vars));
  std::vector<NodeState> out;
  for (std::size_t k = 0; k < vars.size(); ++k) {
    const auto v = tape.value(vars[k]).values();
    out.push_back({states[k].node_id, {v.begin(), v.end()}});
  }
  return out;
}

inline std::vector<NodePrediction> decode(const GnnModel& model, const std::vector<NodeState>& states) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& s : states) vars.push_back(tape.constant(Tensor::row(s.x)));
  const DecodedVars d = model.decode(tape, vars);
  GaussianOutput g;
  for (std::size_t k = 0; k < d.mean.size(); ++k) {
    g.mean.push_back(tape.value(d.mean[k]));
    Tensor v = tape.value(d.log_variance[k]);
    for (double& x : v.values()) x = std::exp(x);
    g.variance.push_back(std::move(v));
  }
  return to_physical(model.schemas(), model.standardizer(), g);
}

/// encode -> message_pass -> decode in one feed-forward pass.
inline std::vector<NodePrediction> forward(const GnnModel& model, const Sample& sample) {
  return to_physical(model.schemas(), model.standardizer(), evaluate(model, make_batch(model.schemas(), sample)));
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json schema_to_json(const NodeSchema& s) {
  return {{"node_id", s.node_id},     {"kind", to_string(s.kind)},           {"observed_variables", s.observed_variables},
          {"ar_lags", s.ar_lags},     {"weather_covariates", s.weather_covariates}, {"q", s.q},
          {"p", s.p}};
}

inline NodeSchema schema_from_json(const nlohmann::json& j) {
  const auto kind = parse_node_kind(j.at("kind").get<std::string>());
  if (!kind) throw ValidationError("schema has unknown kind");
  NodeSchema s = make_schema(j.at("node_id").get<std::string>(), *kind,
                             j.at("observed_variables").get<std::vector<std::string>>(),
                             j.at("weather_covariates").get<std::vector<std::string>>(),
                             j.at("ar_lags").get<std::vector<int>>(), j.at("p").get<std::size_t>());
  if (s.q != j.at("q").get<std::size_t>()) throw ValidationError("schema q inconsistent for '" + s.node_id + "'");
  return s;
}

/// Self-contained JSON checkpoint; `extra` (config hash, seed, ...) is merged at top level.
inline nlohmann::json save_checkpoint(const GnnModel& model, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json schemas = nlohmann::json::array();
  for (const auto& s : model.schemas()) schemas.push_back(schema_to_json(s));
  nlohmann::json j = {{"format", "gridgnn-checkpoint"},
                      {"version", 1},
                      {"topology", model.topology().to_json()},
                      {"topology_hash", model.topology().hash()},
                      {"schemas", schemas},
                      {"model", model.config().to_json()},
                      {"message_passing_steps", model.config().message_passing_steps},
                      {"message_dim", model.config().message_dim},
                      {"layers", model.config().layers},
                      {"parameters", model.parameters().to_json()},
                      {"standardization", model.standardizer().to_json(model.schemas())}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j;
}

inline GnnModel load_checkpoint(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "gridgnn-checkpoint") throw ValidationError("not a gridgnn checkpoint");
    GridTopology topo = topology_from_json(j.at("topology"));
    if (topo.hash() != j.at("topology_hash").get<std::string>()) {
      throw ValidationError("checkpoint topology hash mismatch");
    }
    std::vector<NodeSchema> schemas;
    for (const auto& s : j.at("schemas")) schemas.push_back(schema_from_json(s));
    GnnModel model(std::move(topo), std::move(schemas), GnnConfig::from_json(j.at("model")), 0);
    model.parameters().load_values(j.at("parameters"));
    model.set_standardizer(Standardizer::from_json(j.at("standardization"), model.schemas()));
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace gridgnn
