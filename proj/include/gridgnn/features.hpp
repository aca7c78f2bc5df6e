#pragma once

// Per-node feature containers shared by the graph model, the centralized
// baselines, training and imputation.

#include <nlohmann/json.hpp>

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gridgnn/diffcore.hpp"
#include "gridgnn/error.hpp"
#include "gridgnn/gridgraph.hpp"

namespace gridgnn {

/// Per-node, per-channel affine map between physical units and z-scores.
class Standardizer {
 public:
  Standardizer() = default;
  Standardizer(std::vector<std::vector<double>> mean, std::vector<std::vector<double>> std)
      : mean_(std::move(mean)), std_(std::move(std)) {
    if (mean_.size() != std_.size()) throw DimensionError("standardizer mean/std node count differ");
    for (std::size_t k = 0; k < mean_.size(); ++k) {
      if (mean_[k].size() != std_[k].size()) throw DimensionError("standardizer mean/std channel count differ");
      for (double s : std_[k]) {
        if (!(s > 0.0)) throw NumericalError("standardizer std must be positive");
      }
    }
  }

  static Standardizer identity(const std::vector<NodeSchema>& schemas) {
    std::vector<std::vector<double>> m, s;
    for (const auto& sc : schemas) {
      m.emplace_back(sc.q, 0.0);
      s.emplace_back(sc.q, 1.0);
    }
    return Standardizer(std::move(m), std::move(s));
  }

  bool empty() const noexcept { return mean_.empty(); }
  std::size_t node_count() const noexcept { return mean_.size(); }
  double mean(std::size_t node, std::size_t c) const { return mean_.at(node).at(c); }
  double std(std::size_t node, std::size_t c) const { return std_.at(node).at(c); }

  double to_standard(std::size_t node, std::size_t c, double x) const { return (x - mean(node, c)) / std(node, c); }
  double to_physical(std::size_t node, std::size_t c, double z) const { return mean(node, c) + std(node, c) * z; }
  double variance_to_physical(std::size_t node, std::size_t c, double v) const {
    const double s = std(node, c);
    return v * s * s;
  }

  void check(const std::vector<NodeSchema>& schemas) const {
    if (mean_.size() != schemas.size()) throw DimensionError("standardizer does not cover every node");
    for (std::size_t k = 0; k < schemas.size(); ++k) {
      if (mean_[k].size() != schemas[k].q) {
        throw DimensionError("standardizer channel count mismatch at node '" + schemas[k].node_id + "'");
      }
    }
  }

  nlohmann::json to_json(const std::vector<NodeSchema>& schemas) const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t k = 0; k < mean_.size(); ++k) {
      j[schemas.at(k).node_id] = {{"mean", mean_[k]}, {"std", std_[k]}};
    }
    return j;
  }

  static Standardizer from_json(const nlohmann::json& j, const std::vector<NodeSchema>& schemas) {
    std::vector<std::vector<double>> m, s;
    for (const auto& sc : schemas) {
      if (!j.contains(sc.node_id)) throw ValidationError("standardization lacks node '" + sc.node_id + "'");
      m.push_back(j.at(sc.node_id).at("mean").get<std::vector<double>>());
      s.push_back(j.at(sc.node_id).at("std").get<std::vector<double>>());
    }
    Standardizer out(std::move(m), std::move(s));
    out.check(schemas);
    return out;
  }

 private:
  std::vector<std::vector<double>> mean_;
  std::vector<std::vector<double>> std_;
};

/// One timestamp's features for every node, in standardized units.
struct Sample {
  std::int64_t timestamp = 0;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<std::uint8_t>> mask;  // 1 = observed (model input)
  // Entries scored by the loss; empty means "same as mask". Clones with hidden
  // inputs keep their true values here and in `values`.
  std::vector<std::vector<std::uint8_t>> target_mask;
  double missing_fraction = 0.0;

  const std::vector<std::vector<std::uint8_t>>& targets() const { return target_mask.empty() ? mask : target_mask; }

  void update_missing_fraction() {
    std::size_t total = 0, missing = 0;
    for (const auto& m : mask) {
      total += m.size();
      for (auto b : m) missing += b ? 0 : 1;
    }
    missing_fraction = total ? static_cast<double>(missing) / static_cast<double>(total) : 0.0;
  }

  std::size_t missing_count() const {
    std::size_t n = 0;
    for (const auto& m : mask) {
      for (auto b : m) n += b ? 0 : 1;
    }
    return n;
  }
};

inline Sample make_empty_sample(const std::vector<NodeSchema>& schemas, std::int64_t timestamp = 0) {
  Sample s;
  s.timestamp = timestamp;
  for (const auto& sc : schemas) {
    s.values.emplace_back(sc.q, 0.0);
    s.mask.emplace_back(sc.q, std::uint8_t{1});
  }
  return s;
}

/// Batched inputs: per node, values [B x q] (placeholder 0 where unobserved) and mask [B x q].
struct NodeBlock {
  Tensor values;
  Tensor mask;
};
using FeatureBatch = std::vector<NodeBlock>;

/// Rows of `samples`, using `input_masks` (if given) in place of each sample's own mask.
/// Unobserved entries are replaced by the placeholder (standardized mean, 0) unless keep_values is set.
inline FeatureBatch make_batch(const std::vector<NodeSchema>& schemas, std::span<const Sample* const> samples,
                               std::span<const std::vector<std::vector<std::uint8_t>>* const> input_masks = {},
                               bool keep_values = false) {
  const std::size_t b = samples.size();
  FeatureBatch batch(schemas.size());
  for (std::size_t k = 0; k < schemas.size(); ++k) {
    const std::size_t q = schemas[k].q;
    batch[k].values = Tensor::matrix(b, q);
    batch[k].mask = Tensor::matrix(b, q);
    for (std::size_t r = 0; r < b; ++r) {
      const Sample& s = *samples[r];
      if (s.values.size() != schemas.size() || s.values[k].size() != q || s.mask[k].size() != q) {
        throw DimensionError("sample features at node '" + schemas[k].node_id + "' do not match its schema (q=" +
                             std::to_string(q) + ")");
      }
      const auto& m = input_masks.empty() || !input_masks[r] ? s.mask[k] : (*input_masks[r])[k];
      for (std::size_t c = 0; c < q; ++c) {
        const bool obs = m[c] != 0;
        batch[k].mask(r, c) = obs ? 1.0 : 0.0;
        batch[k].values(r, c) = obs || keep_values ? s.values[k][c] : 0.0;
      }
    }
  }
  return batch;
}

inline FeatureBatch make_batch(const std::vector<NodeSchema>& schemas, const Sample& sample, bool keep_values = false) {
  const Sample* p = &sample;
  return make_batch(schemas, std::span<const Sample* const>(&p, 1), {}, keep_values);
}

/// Model-side encoding of the observed-mask: 1 where an entry is missing, 0 where observed.
inline Tensor missing_indicator(const Tensor& mask) {
  Tensor out = mask;
  for (double& v : out.values()) v = 1.0 - v;
  return out;
}

/// Per-node tape handles for the Gaussian heads; log_variance is already clamped.
struct DecodedVars {
  std::vector<Var> mean;
  std::vector<Var> log_variance;
};

/// Standardized Gaussian outputs per node, [B x q] each.
struct GaussianOutput {
  std::vector<Tensor> mean;
  std::vector<Tensor> variance;
};

/// Anything with forward(Tape&, FeatureBatch) -> DecodedVars plus schemas() and standardizer().
template <class M>
concept GaussianModel = requires(const M& m, Tape& tape, const FeatureBatch& batch) {
  { m.forward(tape, batch) } -> std::same_as<DecodedVars>;
  { m.schemas() } -> std::convertible_to<const std::vector<NodeSchema>&>;
  { m.standardizer() } -> std::convertible_to<const Standardizer&>;
  { m.parameters() } -> std::convertible_to<const ParameterSet&>;
};

template <GaussianModel M>
GaussianOutput evaluate(const M& model, const FeatureBatch& batch) {
  Tape tape;
  const DecodedVars d = model.forward(tape, batch);
  GaussianOutput out;
  for (std::size_t k = 0; k < d.mean.size(); ++k) {
    out.mean.push_back(tape.value(d.mean[k]));
    Tensor v = tape.value(d.log_variance[k]);
    for (double& x : v.values()) x = std::exp(x);
    out.variance.push_back(std::move(v));
  }
  return out;
}

/// Mean and diagonal variance for one node in physical units.
struct NodePrediction {
  std::string node_id;
  std::vector<double> mean;
  std::vector<double> variance;
};

inline std::vector<NodePrediction> to_physical(const std::vector<NodeSchema>& schemas, const Standardizer& stats,
                                               const GaussianOutput& out, std::size_t row = 0) {
  std::vector<NodePrediction> preds;
  for (std::size_t k = 0; k < schemas.size(); ++k) {
    NodePrediction p{schemas[k].node_id, {}, {}};
    for (std::size_t c = 0; c < schemas[k].q; ++c) {
      p.mean.push_back(stats.to_physical(k, c, out.mean[k](row, c)));
      p.variance.push_back(stats.variance_to_physical(k, c, out.variance[k](row, c)));
    }
    preds.push_back(std::move(p));
  }
  return preds;
}

}  // namespace gridgnn
