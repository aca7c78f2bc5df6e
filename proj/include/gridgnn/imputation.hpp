#pragma once

// Missing-data imputation by iterated forward inference: unobserved entries are
// refilled with the decoded means until the largest update (in z-score units)
// drops below the tolerance.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gridgnn/error.hpp"
#include "gridgnn/features.hpp"
#include "gridgnn/gridgraph.hpp"
#include "gridgnn/training.hpp"

namespace gridgnn {

enum class InitPolicy {
  Placeholder,   // standardized training mean (0)
  KeepProvided,  // start from the values already stored at unobserved entries
  Random,        // seeded standard-normal draws
};

struct ImputationOptions {
  std::size_t max_iterations = 20;
  double tolerance = 1e-3;  // normalized L-infinity update
  InitPolicy init = InitPolicy::Placeholder;
  std::uint64_t seed = 0;
  std::size_t chunk = 512;  // samples per batched forward pass
};

struct ChannelRef {
  std::size_t node = 0;
  std::size_t channel = 0;
};

struct ImputationProblem {
  Sample sample;                  // standardized; mask marks observed entries
  std::vector<ChannelRef> query;  // channels of interest; empty = every unobserved channel
  ImputationOptions options;

  void validate() const {
    for (const auto& q : query) {
      if (q.node >= sample.mask.size() || q.channel >= sample.mask[q.node].size()) {
        throw ArgumentError("query channel out of range");
      }
      if (sample.mask[q.node][q.channel]) throw ArgumentError("query channels must be unobserved");
    }
  }
};

struct ImputationResult {
  Sample filled;                            // observed entries verbatim, others imputed (mask unchanged)
  std::vector<std::vector<double>> sigma;   // standardized; 0 on observed entries
  std::size_t iterations = 0;
  bool converged = true;
  double final_update = 0.0;
};

/// Impute every sample; samples are iterated jointly but each stops on its own convergence.
template <GaussianModel M>
std::vector<ImputationResult> impute_all(const M& model, std::span<const Sample> samples, const ImputationOptions& opt = {}) {
  const auto& schemas = model.schemas();
  std::vector<ImputationResult> out(samples.size());
  std::vector<std::size_t> active;
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.values.size() != schemas.size()) throw DimensionError("sample does not cover every node");
    std::size_t observed = 0, missing = 0;
    for (const auto& m : s.mask) {
      for (auto b : m) (b ? observed : missing) += 1;
    }
    if (observed == 0) throw ArgumentError("imputation needs at least one observed entry");
    ImputationResult& r = out[i];
    r.filled = s;
    r.sigma.resize(schemas.size());
    for (std::size_t k = 0; k < schemas.size(); ++k) {
      r.sigma[k].assign(schemas[k].q, 0.0);
      for (std::size_t c = 0; c < schemas[k].q; ++c) {
        if (s.mask[k][c]) continue;
        switch (opt.init) {
          case InitPolicy::Placeholder:
            r.filled.values[k][c] = 0.0;
            break;
          case InitPolicy::KeepProvided:
            break;
          case InitPolicy::Random:
            r.filled.values[k][c] = normal(rng);
            break;
        }
      }
    }
    if (missing > 0) {
      r.converged = false;
      active.push_back(i);
    }
  }

  for (std::size_t it = 1; it <= opt.max_iterations && !active.empty(); ++it) {
    std::vector<std::size_t> still;
    for (std::size_t b = 0; b < active.size(); b += opt.chunk) {
      const std::size_t n = std::min(opt.chunk, active.size() - b);
      std::vector<const Sample*> ptrs(n);
      for (std::size_t j = 0; j < n; ++j) ptrs[j] = &out[active[b + j]].filled;
      const GaussianOutput g = evaluate(model, make_batch(schemas, std::span<const Sample* const>(ptrs), {}, true));
      for (std::size_t j = 0; j < n; ++j) {
        ImputationResult& r = out[active[b + j]];
        double update = 0.0;
        for (std::size_t k = 0; k < schemas.size(); ++k) {
          for (std::size_t c = 0; c < schemas[k].q; ++c) {
            if (r.filled.mask[k][c]) continue;
            const double mu = g.mean[k](j, c);
            update = std::max(update, std::abs(mu - r.filled.values[k][c]));
            r.filled.values[k][c] = mu;
            r.sigma[k][c] = std::sqrt(g.variance[k](j, c));
          }
        }
        if (!std::isfinite(update)) throw NumericalError("imputation produced a non-finite value");
        r.iterations = it;
        r.final_update = update;
        if (update < opt.tolerance) {
          r.converged = true;
        } else {
          still.push_back(active[b + j]);
        }
      }
    }
    active = std::move(still);
  }
  return out;
}

template <GaussianModel M>
ImputationResult impute(const M& model, const ImputationProblem& problem) {
  problem.validate();
  auto r = impute_all(model, std::span<const Sample>(&problem.sample, 1), problem.options);
  return std::move(r.front());
}

/// Imputation report in physical units.
template <GaussianModel M>
nlohmann::json imputation_report(const M& model, const ImputationResult& r) {
  const auto& schemas = model.schemas();
  const auto& stats = model.standardizer();
  nlohmann::json nodes = nlohmann::json::object();
  for (std::size_t k = 0; k < schemas.size(); ++k) {
    nlohmann::json chans = nlohmann::json::array();
    for (std::size_t c = 0; c < schemas[k].q; ++c) {
      const auto& ch = schemas[k].channels[c];
      chans.push_back({{"channel", ch.variable + "@" + std::to_string(ch.lag)},
                       {"value", stats.to_physical(k, c, r.filled.values[k][c])},
                       {"sigma", r.sigma[k][c] * stats.std(k, c)},
                       {"was_observed", r.filled.mask[k][c] != 0}});
    }
    nodes[schemas[k].node_id] = std::move(chans);
  }
  return {{"timestamp", format_rfc3339(r.filled.timestamp)},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"final_update", r.final_update},
          {"nodes", std::move(nodes)}};
}

/// Voltage estimate for one prosumer phase, in volts.
struct VoltagePrediction {
  std::string node_id;
  std::string variable;  // "voltage", "voltage_a", ...
  std::size_t node = 0;
  std::size_t channel = 0;
  std::int64_t timestamp = 0;
  double mean = 0.0;
  double sigma = 0.0;
  bool was_observed = false;

  double lower() const { return mean - 2.0 * sigma; }
  double upper() const { return mean + 2.0 * sigma; }
};

struct VoltageForecast {
  std::vector<VoltagePrediction> voltages;
  std::size_t iterations = 0;
  bool converged = true;
};

inline std::vector<VoltagePrediction> voltage_predictions(const std::vector<NodeSchema>& schemas, const Standardizer& stats,
                                                          const ImputationResult& r) {
  std::vector<VoltagePrediction> out;
  for (std::size_t k = 0; k < schemas.size(); ++k) {
    for (std::size_t c = 0; c < schemas[k].q; ++c) {
      if (!schemas[k].is_voltage_target(c)) continue;
      out.push_back({schemas[k].node_id, schemas[k].channels[c].variable, k, c, r.filled.timestamp,
                     stats.to_physical(k, c, r.filled.values[k][c]), r.sigma[k][c] * stats.std(k, c),
                     r.filled.mask[k][c] != 0});
    }
  }
  return out;
}

/// Voltage mean and sigma for every prosumer phase of each sample. Callers hide the
/// voltage inputs first (see hide_voltages); observed voltages are echoed with sigma 0.
template <GaussianModel M>
std::vector<VoltageForecast> predict_voltages(const M& model, std::span<const Sample> samples, const ImputationOptions& opt = {}) {
  const auto results = impute_all(model, samples, opt);
  std::vector<VoltageForecast> out;
  out.reserve(results.size());
  for (const auto& r : results) {
    out.push_back({voltage_predictions(model.schemas(), model.standardizer(), r), r.iterations, r.converged});
  }
  return out;
}

template <GaussianModel M>
VoltageForecast predict_voltages(const M& model, const Sample& sample, const ImputationOptions& opt = {}) {
  return predict_voltages(model, std::span<const Sample>(&sample, 1), opt).front();
}

}  // namespace gridgnn
