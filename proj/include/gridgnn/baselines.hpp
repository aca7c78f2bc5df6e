#pragma once

// Centralized benchmarks (an MLP and an auto-encoder over the flattened node
// features, both with Gaussian heads) and the accuracy metrics.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gridgnn/diffcore.hpp"
#include "gridgnn/error.hpp"
#include "gridgnn/features.hpp"
#include "gridgnn/gridgraph.hpp"
#include "gridgnn/imputation.hpp"
#include "gridgnn/training.hpp"
#include "gridgnn/util.hpp"

namespace gridgnn {

enum class BaselineKind { MLP, AE };

inline std::string_view to_string(BaselineKind k) { return k == BaselineKind::MLP ? "MLP" : "AE"; }

/// Hidden-width multiplier applied to the geometric interpolation between
/// input and output widths. Chosen once for the pilot-shaped benchmark.
inline constexpr double kDefaultWidthScale = 0.528;

/// Hidden widths round(scale * in^(1-l/L) * out^(l/L)), l = 1..L-1.
inline std::vector<std::size_t> geometric_widths(std::size_t in, std::size_t out, std::size_t layers, double scale) {
  if (layers == 0) throw ContractError("an MLP needs at least one layer");
  std::vector<std::size_t> w{in};
  for (std::size_t l = 1; l < layers; ++l) {
    const double f = static_cast<double>(l) / static_cast<double>(layers);
    const double h = scale * std::pow(static_cast<double>(in), 1.0 - f) * std::pow(static_cast<double>(out), f);
    w.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(h))));
  }
  w.push_back(out);
  return w;
}

/// One network over all nodes: input [values | missing indicators] (2Q), output [mu | log variance] (2Q),
/// with node blocks in topology order.
class CentralModel {
 public:
  CentralModel(BaselineKind kind, std::vector<NodeSchema> schemas, std::size_t layers, std::uint64_t seed,
               double width_scale = kDefaultWidthScale, double min_variance = 1e-6, double max_variance = 1e6)
      : kind_(kind), schemas_(std::move(schemas)), layers_(layers), width_scale_(width_scale),
        log_lo_(std::log(min_variance)), log_hi_(std::log(max_variance)) {
    if (schemas_.empty()) throw ContractError("baseline needs at least one node");
    std::size_t off = 0;
    for (const auto& s : schemas_) {
      offsets_.push_back(off);
      off += s.q;
    }
    total_q_ = off;
    std::mt19937_64 rng(seed);
    const std::size_t io = 2 * total_q_;
    if (kind_ == BaselineKind::MLP) {
      nets_.push_back(add_mlp(params_, "mlp", geometric_widths(io, io, layers_, width_scale_), rng));
    } else {
      const std::size_t bottleneck = total_latent_dimension(schemas_);
      nets_.push_back(add_mlp(params_, "ae/enc", geometric_widths(io, bottleneck, layers_, 1.0), rng));
      nets_.push_back(add_mlp(params_, "ae/dec", geometric_widths(bottleneck, io, layers_, 1.0), rng));
    }
    standardizer_ = Standardizer::identity(schemas_);
  }

  BaselineKind kind() const noexcept { return kind_; }
  std::size_t layers() const noexcept { return layers_; }
  const std::vector<NodeSchema>& schemas() const noexcept { return schemas_; }
  const ParameterSet& parameters() const noexcept { return params_; }
  ParameterSet& parameters() noexcept { return params_; }
  const Standardizer& standardizer() const noexcept { return standardizer_; }
  void set_standardizer(Standardizer s) {
    s.check(schemas_);
    standardizer_ = std::move(s);
  }
  std::size_t input_width() const noexcept { return 2 * total_q_; }
  std::size_t bottleneck_width() const { return kind_ == BaselineKind::AE ? nets_.front().output_width() : 0; }
  const std::vector<std::size_t>& widths() const { return nets_.front().widths; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  DecodedVars forward(Tape& tape, const FeatureBatch& batch) const {
    if (batch.size() != schemas_.size()) throw DimensionError("feature batch must cover every node");
    std::vector<Var> parts;
    for (std::size_t k = 0; k < schemas_.size(); ++k) {
      if (batch[k].values.cols() != schemas_[k].q) {
        throw DimensionError("features at node '" + schemas_[k].node_id + "' must have " + std::to_string(schemas_[k].q) +
                             " values");
      }
      parts.push_back(tape.constant(batch[k].values));
    }
    for (std::size_t k = 0; k < schemas_.size(); ++k) parts.push_back(tape.constant(missing_indicator(batch[k].mask)));
    Var h = tape.concat(std::span<const Var>(parts));
    for (const auto& net : nets_) h = mlp_forward(tape, params_, net, h);
    DecodedVars out;
    for (std::size_t k = 0; k < schemas_.size(); ++k) {
      out.mean.push_back(tape.slice(h, offsets_[k], offsets_[k] + schemas_[k].q));
      out.log_variance.push_back(
          tape.clamp(tape.slice(h, total_q_ + offsets_[k], total_q_ + offsets_[k] + schemas_[k].q), log_lo_, log_hi_));
    }
    return out;
  }

 private:
  BaselineKind kind_;
  std::vector<NodeSchema> schemas_;
  std::size_t layers_;
  double width_scale_;
  double log_lo_, log_hi_;
  std::vector<std::size_t> offsets_;
  std::size_t total_q_ = 0;
  ParameterSet params_;
  std::vector<Mlp> nets_;
  Standardizer standardizer_;
};

inline CentralModel build_baseline(BaselineKind kind, const std::vector<NodeSchema>& schemas, std::size_t layers,
                                   std::uint64_t seed = 0, double width_scale = kDefaultWidthScale) {
  return CentralModel(kind, schemas, layers, seed, width_scale);
}

inline std::size_t count_parameters(const CentralModel& m) { return m.parameter_count(); }

// ---------------------------------------------------------------------------
// Metrics

struct MapeResult {
  double value = 0.0;         // percent
  std::size_t included = 0;
  std::size_t excluded = 0;   // zero actuals
};

inline MapeResult mape_detail(std::span<const double> actual, std::span<const double> predicted) {
  if (actual.size() != predicted.size()) throw MetricError("mape: length mismatch");
  MapeResult r;
  double sum = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i] == 0.0) {
      ++r.excluded;
      continue;
    }
    sum += std::abs(actual[i] - predicted[i]) / std::abs(actual[i]);
    ++r.included;
  }
  if (r.included == 0) throw MetricError("mape: no nonzero actual values");
  r.value = 100.0 * sum / static_cast<double>(r.included);
  return r;
}

inline double mape(std::span<const double> actual, std::span<const double> predicted) {
  return mape_detail(actual, predicted).value;
}

inline double rmse(std::span<const double> actual, std::span<const double> predicted) {
  if (actual.size() != predicted.size()) throw MetricError("rmse: length mismatch");
  if (actual.empty()) throw MetricError("rmse: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double d = actual[i] - predicted[i];
    sum += d * d;
  }
  return std::sqrt(sum / static_cast<double>(actual.size()));
}

// ---------------------------------------------------------------------------
// Voltage accuracy and comparison tables

struct VoltageAccuracy {
  double mape = 0.0;
  double rmse = 0.0;
  std::size_t points = 0;
  std::vector<std::size_t> iterations;  // per sample
  std::size_t converged = 0;
};

/// Hides the voltages of `inputs`, imputes them and scores the means against the
/// observed voltages of `truth` (physical units). inputs[i] and truth[i] share a timestamp.
template <GaussianModel M>
VoltageAccuracy voltage_accuracy(const M& model, const std::vector<Sample>& inputs, const std::vector<Sample>& truth,
                                 const ImputationOptions& opt = {}) {
  if (inputs.size() != truth.size()) throw DimensionError("inputs and truth must align");
  if (inputs.empty()) throw MetricError("no test samples");
  const auto& schemas = model.schemas();
  const auto& stats = model.standardizer();
  std::vector<Sample> hidden;
  hidden.reserve(inputs.size());
  for (const auto& s : inputs) hidden.push_back(hide_voltages(schemas, s));
  const auto results = impute_all(model, std::span<const Sample>(hidden), opt);
  std::vector<double> actual, predicted;
  VoltageAccuracy acc;
  for (std::size_t i = 0; i < results.size(); ++i) {
    acc.iterations.push_back(results[i].iterations);
    acc.converged += results[i].converged ? 1 : 0;
    for (std::size_t k = 0; k < schemas.size(); ++k) {
      for (std::size_t c = 0; c < schemas[k].q; ++c) {
        if (!schemas[k].is_voltage_target(c) || !truth[i].mask[k][c]) continue;
        actual.push_back(stats.to_physical(k, c, truth[i].values[k][c]));
        predicted.push_back(stats.to_physical(k, c, results[i].filled.values[k][c]));
      }
    }
  }
  acc.mape = mape(actual, predicted);
  acc.rmse = rmse(actual, predicted);
  acc.points = actual.size();
  return acc;
}

struct ComparisonRow {
  std::string model;
  std::size_t layers = 0;
  std::size_t mp_steps = 0;  // 0 for centralized models
  std::size_t params = 0;
  double mape = 0.0;
  double rmse = 0.0;
};

inline void write_comparison_csv(const std::vector<ComparisonRow>& rows, std::ostream& out) {
  out << "model,layers,mp_steps,params,mape,rmse\n";
  for (const auto& r : rows) {
    out << r.model << ',' << r.layers << ',' << (r.mp_steps ? std::to_string(r.mp_steps) : std::string("-")) << ','
        << r.params << ',' << format_double(r.mape) << ',' << format_double(r.rmse) << '\n';
  }
}

struct SweepRow {
  double missing_rate = 0.0;
  double mape = 0.0;
  double rmse = 0.0;
};

inline void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "missing_rate,mape,rmse\n";
  for (const auto& r : rows) out << format_double(r.missing_rate) << ',' << format_double(r.mape) << ',' << format_double(r.rmse) << '\n';
}

inline const std::vector<double>& default_missing_rates() {
  static const std::vector<double> rates{0.0, 0.001, 0.01, 0.05, 0.10};
  return rates;
}

/// MAPE/RMSE of voltage prediction after injecting random missing points into `test`
/// (scored against the uncorrupted voltages). Steps before `first_step` are context only.
template <GaussianModel M>
std::vector<SweepRow> missing_rate_sweep(const M& model, const TimeSeriesDataset& test, std::size_t first_step,
                                         const std::vector<double>& rates, std::uint64_t seed,
                                         const ImputationOptions& opt = {}) {
  const SampleOptions all{1.0, first_step};
  const auto truth = build_samples(test, model.schemas(), model.standardizer(), all);
  std::vector<SweepRow> rows;
  for (double rate : rates) {
    const TimeSeriesDataset corrupted = inject_missing(test, rate, MissingPattern::Random, seed);
    const auto inputs = build_samples(corrupted, model.schemas(), model.standardizer(), all);
    const auto acc = voltage_accuracy(model, inputs, truth, opt);
    rows.push_back({rate, acc.mape, acc.rmse});
  }
  return rows;
}

}  // namespace gridgnn
