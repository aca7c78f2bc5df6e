#pragma once

// Sample assembly, the masked Gaussian negative log-likelihood and the Adam
// training loop with voltage-missing augmentation and early stopping.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gridgnn/diffcore.hpp"
#include "gridgnn/error.hpp"
#include "gridgnn/features.hpp"
#include "gridgnn/gridgraph.hpp"
#include "gridgnn/gridsim.hpp"
#include "gridgnn/util.hpp"

namespace gridgnn {

/// Input value fed to the model at unobserved entries during training.
enum class HiddenFill {
  Placeholder,  // standardized training mean (0)
  Noise,        // fresh standard-normal draws each batch
};

inline std::string_view to_string(HiddenFill f) { return f == HiddenFill::Noise ? "noise" : "placeholder"; }

struct TrainingConfig {
  double learning_rate = 0.01;
  std::size_t max_batch_size = 5000;
  std::size_t batch_size = 256;  // clipped to max_batch_size
  double missing_threshold = 0.10;
  bool augmentation_enabled = true;
  std::size_t early_stopping_patience = 10;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  // Extra random hiding of input entries per epoch (targets kept); 0 disables.
  double input_mask_rate = 0.0;
  double validation_fraction = 1.0 / 12.0;
  HiddenFill hidden_fill = HiddenFill::Placeholder;
  // With input hiding, score only the entries hidden from the input.
  bool score_hidden_only = false;
  // Per-sample probability of hiding one group from TrainingOptions::hiding_groups (see bid_hiding_groups).
  double bid_hiding_rate = 0.0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
    if (!(missing_threshold >= 0.0 && missing_threshold <= 1.0)) throw ValidationError("missing_threshold must lie in [0, 1]");
    if (max_batch_size == 0 || batch_size == 0) throw ValidationError("batch sizes must be positive");
    if (!(input_mask_rate >= 0.0 && input_mask_rate < 1.0)) throw ValidationError("input_mask_rate must lie in [0, 1)");
    if (!(bid_hiding_rate >= 0.0 && bid_hiding_rate <= 1.0)) throw ValidationError("bid_hiding_rate must lie in [0, 1]");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw ValidationError("validation_fraction must lie in (0, 1)");
  }

  std::size_t effective_batch_size() const { return std::min(batch_size, max_batch_size); }

  nlohmann::json to_json() const {
    return {{"learning_rate", learning_rate},
            {"max_batch_size", max_batch_size},
            {"batch_size", batch_size},
            {"missing_threshold", missing_threshold},
            {"augmentation_enabled", augmentation_enabled},
            {"early_stopping_patience", early_stopping_patience},
            {"max_epochs", max_epochs},
            {"seed", seed},
            {"input_mask_rate", input_mask_rate},
            {"validation_fraction", validation_fraction},
            {"hidden_fill", std::string(to_string(hidden_fill))},
            {"score_hidden_only", score_hidden_only},
            {"bid_hiding_rate", bid_hiding_rate}};
  }

  static TrainingConfig from_json(const nlohmann::json& j) {
    TrainingConfig c;
    try {
      if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
      if (j.contains("max_batch_size")) j.at("max_batch_size").get_to(c.max_batch_size);
      if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
      if (j.contains("missing_threshold")) j.at("missing_threshold").get_to(c.missing_threshold);
      if (j.contains("augmentation_enabled")) j.at("augmentation_enabled").get_to(c.augmentation_enabled);
      if (j.contains("early_stopping_patience")) j.at("early_stopping_patience").get_to(c.early_stopping_patience);
      if (j.contains("max_epochs")) j.at("max_epochs").get_to(c.max_epochs);
      if (j.contains("seed")) j.at("seed").get_to(c.seed);
      if (j.contains("input_mask_rate")) j.at("input_mask_rate").get_to(c.input_mask_rate);
      if (j.contains("validation_fraction")) j.at("validation_fraction").get_to(c.validation_fraction);
      if (j.contains("bid_hiding_rate")) j.at("bid_hiding_rate").get_to(c.bid_hiding_rate);
      if (j.contains("score_hidden_only")) j.at("score_hidden_only").get_to(c.score_hidden_only);
      if (j.contains("hidden_fill")) {
        const auto f = j.at("hidden_fill").get<std::string>();
        if (f != "placeholder" && f != "noise") throw ValidationError("hidden_fill must be placeholder or noise");
        c.hidden_fill = f == "noise" ? HiddenFill::Noise : HiddenFill::Placeholder;
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("training config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Samples

/// Per-channel mean/std over the observed points of steps [begin, end).
/// Lagged channels reuse the statistics of their base series.
inline Standardizer fit_standardizer(const TimeSeriesDataset& ds, const std::vector<NodeSchema>& schemas, std::size_t begin,
                                     std::size_t end) {
  if (begin >= end || end > ds.length()) throw DatasetError("empty standardization range");
  std::vector<std::vector<double>> mean, stdev;
  for (const auto& s : schemas) {
    std::vector<double> m(s.q), sd(s.q);
    for (std::size_t c = 0; c < s.q; ++c) {
      const auto& ch = s.channels[c];
      const Series& series = ds.at(ch.sensor_id);
      double sum = 0.0, sq = 0.0;
      std::size_t n = 0;
      for (std::size_t t = begin; t < end; ++t) {
        if (series.missing[t]) continue;
        sum += series.values[t];
        ++n;
      }
      const double mu = n ? sum / static_cast<double>(n) : 0.0;
      for (std::size_t t = begin; t < end; ++t) {
        if (series.missing[t]) continue;
        const double d = series.values[t] - mu;
        sq += d * d;
      }
      const double var = n > 1 ? sq / static_cast<double>(n - 1) : 0.0;
      m[c] = mu;
      sd[c] = var > 1e-18 ? std::sqrt(var) : 1.0;
    }
    mean.push_back(std::move(m));
    stdev.push_back(std::move(sd));
  }
  return Standardizer(std::move(mean), std::move(stdev));
}

struct SampleOptions {
  double missing_threshold = 0.10;
  std::size_t begin = 0;  // first candidate step (raised to the lag horizon)
  std::size_t end = std::numeric_limits<std::size_t>::max();
};

/// One standardized Sample per eligible step; steps whose missing fraction exceeds the threshold are dropped.
inline std::vector<Sample> build_samples(const TimeSeriesDataset& ds, const std::vector<NodeSchema>& schemas,
                                         const Standardizer& stats, const SampleOptions& opt = {}) {
  stats.check(schemas);
  std::size_t max_lag = 0;
  for (const auto& s : schemas) {
    for (const auto& ch : s.channels) max_lag = std::max<std::size_t>(max_lag, static_cast<std::size_t>(ch.lag));
  }
  // Resolve every channel's series once.
  std::vector<std::vector<const Series*>> src(schemas.size());
  for (std::size_t k = 0; k < schemas.size(); ++k) {
    for (const auto& ch : schemas[k].channels) src[k].push_back(&ds.at(ch.sensor_id));
  }
  const std::size_t first = std::max(opt.begin, max_lag);
  const std::size_t last = std::min(opt.end, ds.length());
  std::vector<Sample> out;
  for (std::size_t t = first; t < last; ++t) {
    Sample s;
    s.timestamp = ds.timestamp(t);
    s.values.resize(schemas.size());
    s.mask.resize(schemas.size());
    for (std::size_t k = 0; k < schemas.size(); ++k) {
      const std::size_t q = schemas[k].q;
      s.values[k].assign(q, 0.0);
      s.mask[k].assign(q, 0);
      for (std::size_t c = 0; c < q; ++c) {
        const std::size_t at = t - static_cast<std::size_t>(schemas[k].channels[c].lag);
        if (!src[k][c]->missing[at]) {
          s.values[k][c] = stats.to_standard(k, c, src[k][c]->values[at]);
          s.mask[k][c] = 1;
        }
      }
    }
    s.update_missing_fraction();
    if (s.missing_fraction > opt.missing_threshold) continue;
    out.push_back(std::move(s));
  }
  if (out.empty()) throw DatasetError("no eligible samples (lag horizon " + std::to_string(max_lag) + ", missing threshold " +
                                      format_double(opt.missing_threshold) + ")");
  return out;
}

/// Copy of `s` whose current-time prosumer voltage inputs are hidden; the loss still scores them.
inline Sample hide_voltages(const std::vector<NodeSchema>& schemas, const Sample& s) {
  Sample c = s;
  c.target_mask = s.targets();
  for (std::size_t k = 0; k < schemas.size(); ++k) {
    for (std::size_t ch = 0; ch < schemas[k].q; ++ch) {
      if (schemas[k].is_voltage_target(ch)) c.mask[k][ch] = 0;
    }
  }
  c.update_missing_fraction();
  return c;
}

/// Input followed by one voltage-hidden clone per sample.
inline std::vector<Sample> augment_voltage_missing(const std::vector<NodeSchema>& schemas, const std::vector<Sample>& samples) {
  if (samples.empty()) throw ContractError("augmentation needs at least one sample");
  std::vector<Sample> out = samples;
  out.reserve(2 * samples.size());
  for (const auto& s : samples) out.push_back(hide_voltages(schemas, s));
  return out;
}

/// Chronological split: the final `fraction` of samples becomes validation.
inline std::pair<std::vector<Sample>, std::vector<Sample>> split_chronological(std::vector<Sample> samples, double fraction) {
  if (samples.size() < 2) throw DatasetError("need at least two samples to split");
  std::size_t nval = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(samples.size())));
  nval = std::clamp<std::size_t>(nval, 1, samples.size() - 1);
  std::vector<Sample> val(std::make_move_iterator(samples.end() - static_cast<std::ptrdiff_t>(nval)),
                          std::make_move_iterator(samples.end()));
  samples.resize(samples.size() - nval);
  return {std::move(samples), std::move(val)};
}

// ---------------------------------------------------------------------------
// Loss

/// Sum over nodes and scored entries of 0.5 log var + 0.5 (y - mu)^2 / var, recorded on the tape.
inline Var nll_loss(Tape& tape, const DecodedVars& pred, const FeatureBatch& targets) {
  if (pred.mean.size() != targets.size()) throw DimensionError("prediction/target node count differ");
  Var total;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const Var y = tape.constant(targets[k].values);
    const Var m = tape.constant(targets[k].mask);
    const Var d = tape.sub(y, pred.mean[k]);
    const Var precision = tape.exp(tape.scale(pred.log_variance[k], -1.0));
    const Var term = tape.add(tape.scale(pred.log_variance[k], 0.5), tape.scale(tape.mul(tape.mul(d, d), precision), 0.5));
    const Var node = tape.reduce_sum(tape.mul(term, m));
    total = k == 0 ? node : tape.add(total, node);
  }
  return total;
}

/// Plain evaluation of the same objective from means and variances.
inline double nll_loss(std::span<const Tensor> mean, std::span<const Tensor> variance, std::span<const Tensor> target,
                       std::span<const Tensor> mask) {
  if (mean.size() != variance.size() || mean.size() != target.size() || mean.size() != mask.size()) {
    throw DimensionError("nll_loss argument node counts differ");
  }
  double loss = 0.0;
  for (std::size_t k = 0; k < mean.size(); ++k) {
    if (mean[k].size() != variance[k].size() || mean[k].size() != target[k].size() || mean[k].size() != mask[k].size()) {
      throw DimensionError("nll_loss shapes differ at node " + std::to_string(k));
    }
    for (std::size_t i = 0; i < mean[k].size(); ++i) {
      if (mask[k][i] == 0.0) continue;
      const double v = variance[k][i];
      if (!(v > 0.0)) throw ContractError("variance must be positive");
      const double d = target[k][i] - mean[k][i];
      loss += 0.5 * std::log(v) + 0.5 * d * d / v;
    }
  }
  return loss;
}

/// Targets (true values) and the scored-entry mask of each sample, batched.
inline FeatureBatch make_targets(const std::vector<NodeSchema>& schemas, std::span<const Sample* const> samples) {
  std::vector<const std::vector<std::vector<std::uint8_t>>*> masks;
  masks.reserve(samples.size());
  for (const Sample* s : samples) masks.push_back(&s->targets());
  return make_batch(schemas, samples, masks, true);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_nll = 0.0;  // per sample
  double val_nll = 0.0;    // per sample
  double wall_seconds = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;  // epoch 0 = initialization
  std::size_t best_epoch = 0;
  double best_val_nll = std::numeric_limits<double>::infinity();
  bool stopped_early = false;

  void write_csv(std::ostream& out) const {
    out << "epoch,train_nll,val_nll,wall_seconds\n";
    for (const auto& e : epochs) {
      out << e.epoch << ',' << format_double(e.train_nll) << ',' << format_double(e.val_nll) << ','
          << format_double(e.wall_seconds) << '\n';
    }
  }
};

template <class M>
concept TrainableModel = GaussianModel<M> && requires(M& m) {
  { m.parameters() } -> std::same_as<ParameterSet&>;
};

/// Mean per-sample NLL over `samples`, evaluated in chunks.
template <GaussianModel M>
double mean_nll(const M& model, std::span<const Sample* const> samples, std::size_t chunk = 512) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t b = 0; b < samples.size(); b += chunk) {
    const auto part = samples.subspan(b, std::min(chunk, samples.size() - b));
    Tape tape;
    const DecodedVars d = model.forward(tape, make_batch(model.schemas(), part));
    total += tape.value(nll_loss(tape, d, make_targets(model.schemas(), part))).item();
  }
  return total / static_cast<double>(samples.size());
}

template <GaussianModel M>
double mean_nll(const M& model, const std::vector<Sample>& samples, std::size_t chunk = 512) {
  std::vector<const Sample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return mean_nll(model, std::span<const Sample* const>(ptrs), chunk);
}

/// Entries hidden together, as (node, channel) pairs.
using ChannelGroup = std::vector<std::pair<std::size_t, std::size_t>>;

/// One group per prosumer, shaped like a bid query: the current-time load channels of the
/// prosumer's feeder and substation plus every voltage target except the prosumer's own.
inline std::vector<ChannelGroup> bid_hiding_groups(const GridTopology& topology, const std::vector<NodeSchema>& schemas) {
  std::vector<ChannelGroup> out;
  for (std::size_t p = 0; p < topology.size(); ++p) {
    if (topology.node(p).kind != NodeKind::Prosumer) continue;
    const std::size_t feeder = topology.ancestor_of_kind(p, NodeKind::Feeder);
    if (feeder == kNoNode) continue;
    const std::size_t substation = topology.ancestor_of_kind(feeder, NodeKind::Substation);
    ChannelGroup g;
    for (std::size_t k = 0; k < schemas.size(); ++k) {
      const bool loads = k == feeder || k == substation;
      for (std::size_t c = 0; c < schemas[k].q; ++c) {
        if ((loads && schemas[k].is_load_channel(c)) || (k != p && schemas[k].is_voltage_target(c))) g.emplace_back(k, c);
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

struct TrainingOptions {
  std::ostream* log = nullptr;        // one line per epoch when set
  std::vector<ChannelGroup> hiding_groups;  // used when bid_hiding_rate > 0
};

/// Adam on shuffled mini-batches with early stopping on validation NLL; the model ends at its best-validation parameters.
template <TrainableModel M>
TrainingHistory train(M& model, const std::vector<Sample>& train_samples, const std::vector<Sample>& validation_samples,
                      const TrainingConfig& config, const TrainingOptions& options = {}) {
  config.validate();
  TrainingHistory history;
  const auto clock_start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  };
  if (train_samples.empty()) throw DatasetError("no training samples");
  if (validation_samples.empty()) throw DatasetError("no validation samples");
  const auto& schemas = model.schemas();

  std::vector<Sample> train_set = config.augmentation_enabled ? augment_voltage_missing(schemas, train_samples) : train_samples;
  std::vector<Sample> val_set =
      config.augmentation_enabled ? augment_voltage_missing(schemas, validation_samples) : validation_samples;
  // Random input hiding (targets kept). Validation sees one fixed draw of it.
  using Mask = std::vector<std::vector<std::uint8_t>>;
  const bool bid_hiding = config.bid_hiding_rate > 0.0 && !options.hiding_groups.empty();
  const bool hiding = config.input_mask_rate > 0.0 || bid_hiding;
  std::bernoulli_distribution hide(config.input_mask_rate), hide_group(config.bid_hiding_rate);
  std::uniform_int_distribution<std::size_t> pick_group(0, bid_hiding ? options.hiding_groups.size() - 1 : 0);
  auto draw_hiding = [&](std::mt19937_64& g, const Sample& s, Mask& input, Mask& scored) {
    input = s.mask;
    if (config.input_mask_rate > 0.0) {
      for (auto& node : input) {
        for (auto& m : node) {
          if (m && hide(g)) m = 0;
        }
      }
    }
    if (bid_hiding && hide_group(g)) {
      for (auto [k, c] : options.hiding_groups[pick_group(g)]) input[k][c] = 0;
    }
    scored = s.targets();
    if (config.score_hidden_only) {
      for (std::size_t k = 0; k < scored.size(); ++k) {
        for (std::size_t c = 0; c < scored[k].size(); ++c) {
          if (input[k][c]) scored[k][c] = 0;
        }
      }
    }
  };
  if (hiding) {
    std::mt19937_64 vrng(config.seed ^ 0x9e3779b97f4a7c15ull);
    for (auto& s : val_set) {
      Mask input, scored;
      draw_hiding(vrng, s, input, scored);
      s.mask = std::move(input);
      s.target_mask = std::move(scored);
      s.update_missing_fraction();
    }
  }
  std::vector<const Sample*> train_ptrs, val_ptrs;
  for (const auto& s : train_set) train_ptrs.push_back(&s);
  for (const auto& s : val_set) val_ptrs.push_back(&s);

  const double init_val = mean_nll(model, std::span<const Sample* const>(val_ptrs));
  const double init_train = mean_nll(model, std::span<const Sample* const>(train_ptrs));
  history.epochs.push_back({0, init_train, init_val, elapsed()});
  history.best_val_nll = init_val;
  history.best_epoch = 0;
  if (!std::isfinite(init_val) || !std::isfinite(init_train)) throw TrainingError("non-finite loss at initialization", 0, 0);

  ParameterSet& params = model.parameters();
  ParameterSet best = params;
  AdamState adam;
  params.zero_grad();
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  const std::size_t bs = config.effective_batch_size();
  std::size_t since_best = 0;

  // Scratch masks for random input hiding.
  std::vector<Mask> hidden, scored;
  std::vector<const Mask*> mask_ptrs, scored_ptrs;
  std::normal_distribution<double> fill;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0, batch_no = 0; b < order.size(); b += bs, ++batch_no) {
      const std::size_t n = std::min(bs, order.size() - b);
      std::vector<const Sample*> batch(n);
      for (std::size_t i = 0; i < n; ++i) batch[i] = train_ptrs[order[b + i]];
      mask_ptrs.assign(n, nullptr);
      scored_ptrs.clear();
      for (const Sample* s : batch) scored_ptrs.push_back(&s->targets());
      if (hiding) {
        hidden.resize(n);
        scored.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
          draw_hiding(rng, *batch[i], hidden[i], scored[i]);
          mask_ptrs[i] = &hidden[i];
          scored_ptrs[i] = &scored[i];
        }
      }
      FeatureBatch inputs = make_batch(schemas, std::span<const Sample* const>(batch), mask_ptrs);
      if (config.hidden_fill == HiddenFill::Noise) {
        for (auto& blk : inputs) {
          for (std::size_t i = 0; i < blk.values.size(); ++i) {
            if (blk.mask[i] == 0.0) blk.values[i] = fill(rng);
          }
        }
      }
      Tape tape;
      const DecodedVars d = model.forward(tape, inputs);
      const Var total = nll_loss(tape, d, make_batch(schemas, std::span<const Sample* const>(batch), scored_ptrs, true));
      const double value = tape.value(total).item();
      if (!std::isfinite(value)) {
        throw TrainingError("training loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_no),
                            epoch, batch_no);
      }
      epoch_loss += value;
      const Var loss = tape.scale(total, 1.0 / static_cast<double>(n));
      tape.backward(loss, params);
      adam_step(params, adam, config.learning_rate);
    }
    const double val = mean_nll(model, std::span<const Sample* const>(val_ptrs));
    if (!std::isfinite(val)) throw TrainingError("validation loss became non-finite at epoch " + std::to_string(epoch), epoch, 0);
    history.epochs.push_back({epoch, epoch_loss / static_cast<double>(order.size()), val, elapsed()});
    if (options.log) {
      *options.log << "epoch " << epoch << " train_nll " << format_double(history.epochs.back().train_nll) << " val_nll "
                   << format_double(val) << '\n';
      options.log->flush();
    }
    if (val < history.best_val_nll) {
      history.best_val_nll = val;
      history.best_epoch = epoch;
      best.copy_values_from(params);
      since_best = 0;
    } else if (++since_best >= config.early_stopping_patience) {
      history.stopped_early = true;
      break;
    }
  }
  params.copy_values_from(best);
  params.zero_grad();
  return history;
}

}  // namespace gridgnn
