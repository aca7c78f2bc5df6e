#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "gridgnn/gridsim.hpp"
#include "gridgnn/mpnn.hpp"
#include "gridgnn/training.hpp"
#include "oracles.hpp"

using namespace gridgnn;

namespace {

constexpr std::int64_t kStart = 1557878400;  // 2019-05-15T00:00:00Z

struct SmallSetup {
  GridTopology topology = fixture::chain4();
  std::vector<NodeSchema> schemas = derive_schemas(topology, fixture::tiny_schema_config());
  TimeSeriesDataset ds = simulate(make_default_spec(topology, 1), kStart, 4 * kStepsPerDay, 2).dataset;
  Standardizer stats = fit_standardizer(ds, schemas, 0, ds.length());
};

double single_entry_nll(double y, double mu, double var) {
  const Tensor m = Tensor::scalar(mu), v = Tensor::scalar(var), t = Tensor::scalar(y), k = Tensor::scalar(1.0);
  return nll_loss(std::span<const Tensor>(&m, 1), std::span<const Tensor>(&v, 1), std::span<const Tensor>(&t, 1),
                  std::span<const Tensor>(&k, 1));
}

}  // namespace

TEST(BuildSamples, FullyObservedGivesOneSamplePerStepAfterLags) {
  SmallSetup s;
  SampleOptions opt;
  const auto samples = build_samples(s.ds, s.schemas, s.stats, opt);
  EXPECT_EQ(samples.size(), s.ds.length() - 96);
  // Year-scale arithmetic with the default lag horizon
  EXPECT_EQ(365u * kStepsPerDay - kDefaultLagHorizon, 35040u - 192u);
  for (const auto& x : samples) EXPECT_EQ(x.missing_fraction, 0.0);
  EXPECT_EQ(samples.front().timestamp, s.ds.timestamp(96));
}

TEST(BuildSamples, DropsStepsAboveMissingThreshold) {
  SmallSetup s;
  // Hide every series at step 200: all current-time entries (half of each node) go missing.
  for (auto& series : s.ds.series()) series.missing[200] = 1;
  const std::size_t total = total_feature_dimension(s.schemas);
  std::size_t hidden = 0;
  for (const auto& sc : s.schemas) {
    for (const auto& ch : sc.channels) hidden += ch.lag == 0 ? 1 : 0;
  }
  ASSERT_GT(static_cast<double>(hidden) / static_cast<double>(total), 0.10);
  const auto samples = build_samples(s.ds, s.schemas, s.stats);
  for (const auto& x : samples) EXPECT_NE(x.timestamp, s.ds.timestamp(200));
  SampleOptions loose;
  loose.missing_threshold = 1.0;
  EXPECT_EQ(build_samples(s.ds, s.schemas, s.stats, loose).size(), s.ds.length() - 96);
}

TEST(BuildSamples, MissingFractionMatchesMask) {
  SmallSetup s;
  const auto ds = inject_missing(s.ds, 0.05, MissingPattern::Random, 3);
  SampleOptions opt;
  opt.missing_threshold = 1.0;
  for (const auto& x : build_samples(ds, s.schemas, s.stats, opt)) {
    EXPECT_DOUBLE_EQ(x.missing_fraction,
                     static_cast<double>(x.missing_count()) / static_cast<double>(total_feature_dimension(s.schemas)));
  }
}

TEST(BuildSamples, EmptyEligibleSetIsDatasetError) {
  SmallSetup s;
  SampleOptions opt;
  opt.end = 50;  // before the lag horizon
  EXPECT_THROW(build_samples(s.ds, s.schemas, s.stats, opt), DatasetError);
}

TEST(Augment, DoublesAndHidesOnlyVoltages) {
  SmallSetup s;
  SampleOptions opt;
  opt.end = 196;
  const auto samples = build_samples(s.ds, s.schemas, s.stats, opt);
  ASSERT_EQ(samples.size(), 100u);
  const auto out = augment_voltage_missing(s.schemas, samples);
  ASSERT_EQ(out.size(), 200u);
  const Sample& clone = out[100];
  for (std::size_t k = 0; k < s.schemas.size(); ++k) {
    for (std::size_t c = 0; c < s.schemas[k].q; ++c) {
      EXPECT_EQ(clone.values[k][c], samples[0].values[k][c]);
      EXPECT_EQ(clone.targets()[k][c], samples[0].mask[k][c]);
      EXPECT_EQ(clone.mask[k][c] == 0, s.schemas[k].is_voltage_target(c) || samples[0].mask[k][c] == 0);
    }
  }
}

TEST(SplitChronological, FinalTwelfthIsValidation) {
  std::vector<Sample> v(120);
  for (std::size_t i = 0; i < v.size(); ++i) v[i].timestamp = static_cast<std::int64_t>(i);
  const auto [train, val] = split_chronological(v, 1.0 / 12.0);
  EXPECT_EQ(train.size(), 110u);
  EXPECT_EQ(val.size(), 10u);
  EXPECT_LT(train.back().timestamp, val.front().timestamp);
}

TEST(NllLoss, WorkedValues) {
  EXPECT_DOUBLE_EQ(single_entry_nll(0.3, 0.3, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(single_entry_nll(1.0, 0.0, 1.0), 0.5);
  EXPECT_NEAR(single_entry_nll(2.0, 0.0, 4.0), 0.5 * std::log(4.0) + 0.5, 1e-15);
  EXPECT_NEAR(single_entry_nll(2.0, 0.0, 4.0), 1.1931471805599454, 1e-12);
  EXPECT_THROW(single_entry_nll(1.0, 0.0, 0.0), ContractError);
}

TEST(NllLoss, TapeAndPlainAgree) {
  std::mt19937_64 rng(4);
  SmallSetup s;
  const GnnModel m(s.topology, s.schemas, GnnConfig{}, 5);
  const Sample a = fixture::random_sample(s.schemas, rng, 0.3);
  const Sample* rows[] = {&a};
  const FeatureBatch in = make_batch(s.schemas, std::span<const Sample* const>(rows));
  const FeatureBatch target = make_targets(s.schemas, std::span<const Sample* const>(rows));
  Tape tape;
  const double taped = tape.value(nll_loss(tape, m.forward(tape, in), target)).item();
  const GaussianOutput g = evaluate(m, in);
  std::vector<Tensor> y, mask;
  for (const auto& blk : target) {
    y.push_back(blk.values);
    mask.push_back(blk.mask);
  }
  EXPECT_NEAR(taped, nll_loss(g.mean, g.variance, y, mask), 1e-9 * std::abs(taped));
}

// Arbitrary values at unobserved entries leave the loss unchanged.
TEST(NllLoss, UnobservedEntriesDoNotContribute) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> mu, var, y, mask;
    for (int k = 0; k < 3; ++k) {
      Tensor a({2, 4}), b({2, 4}), c({2, 4}), m({2, 4});
      std::normal_distribution<double> n;
      std::bernoulli_distribution obs(0.6);
      for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = n(rng);
        b[i] = std::exp(n(rng));
        c[i] = n(rng);
        m[i] = obs(rng) ? 1.0 : 0.0;
      }
      mu.push_back(a);
      var.push_back(b);
      y.push_back(c);
      mask.push_back(m);
    }
    const double before = nll_loss(mu, var, y, mask);
    for (std::size_t k = 0; k < y.size(); ++k) {
      for (std::size_t i = 0; i < y[k].size(); ++i) {
        if (mask[k][i] == 0.0) y[k][i] += 1e3 * (static_cast<double>(i) - 3.5);
      }
    }
    EXPECT_EQ(nll_loss(mu, var, y, mask), before);
  }
}

// dL/dmu = (mu - y)/var; dL/dvar = 0.5 (1/var - (y - mu)^2/var^2).
TEST(NllLoss, GradientsMatchClosedFormAndFiniteDifferences) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 10; ++trial) {
    const double y = n(rng), mu0 = n(rng), var0 = std::exp(n(rng));
    ParameterSet params;
    params.add("mu", Tensor::scalar(mu0));
    params.add("logvar", Tensor::scalar(std::log(var0)));
    auto build = [&](Tape& t) {
      DecodedVars d;
      d.mean.push_back(t.parameter(params, 0));
      d.log_variance.push_back(t.parameter(params, 1));
      FeatureBatch target(1);
      target[0].values = Tensor::scalar(y);
      target[0].mask = Tensor::scalar(1.0);
      return nll_loss(t, d, target);
    };
    {
      Tape t;
      t.backward(build(t), params);
    }
    const double dmu = (mu0 - y) / var0;
    const double dvar = 0.5 * (1.0 / var0 - (y - mu0) * (y - mu0) / (var0 * var0));
    EXPECT_LT(oracle::relative_error(params.grad(0).item(), dmu), 1e-10);
    EXPECT_LT(oracle::relative_error(params.grad(1).item(), dvar * var0), 1e-10);  // chain rule through log var
    const auto fd = oracle::finite_difference(params, [&] {
      Tape t;
      return t.value(build(t)).item();
    });
    EXPECT_LT(oracle::relative_error(fd[0][0], dmu), 1e-6);
    // Derivative with respect to the variance itself by a direct difference quotient.
    const double h = 1e-6 * var0;
    const double fd_var = (single_entry_nll(y, mu0, var0 + h) - single_entry_nll(y, mu0, var0 - h)) / (2.0 * h);
    EXPECT_LT(oracle::relative_error(fd_var, dvar, 1e-8), 1e-5);
  }
}

TEST(TrainingConfig, DefaultsAndValidation) {
  const TrainingConfig c;
  EXPECT_EQ(c.learning_rate, 0.01);
  EXPECT_EQ(c.max_batch_size, 5000u);
  EXPECT_EQ(c.missing_threshold, 0.10);
  EXPECT_TRUE(c.augmentation_enabled);
  EXPECT_EQ(c.early_stopping_patience, 10u);
  EXPECT_THROW(TrainingConfig::from_json({{"learning_rate", 0.0}}), ValidationError);
  EXPECT_THROW(TrainingConfig::from_json({{"missing_threshold", 1.5}}), ValidationError);
  EXPECT_THROW(TrainingConfig::from_json({{"max_epochs", "many"}}), ValidationError);
  EXPECT_EQ(TrainingConfig::from_json(c.to_json()).to_json(), c.to_json());
  TrainingConfig big;
  big.batch_size = 10000;
  EXPECT_EQ(big.effective_batch_size(), 5000u);
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  SmallSetup s;
  GnnModel m(s.topology, s.schemas, GnnConfig{}, 8);
  const auto before = m.parameters().to_json();
  const auto [tr, val] = split_chronological(build_samples(s.ds, s.schemas, s.stats), 1.0 / 12.0);
  TrainingConfig cfg;
  cfg.max_epochs = 0;
  const auto h = train(m, tr, val, cfg);
  EXPECT_EQ(m.parameters().to_json(), before);
  ASSERT_EQ(h.epochs.size(), 1u);
  EXPECT_EQ(h.best_epoch, 0u);
}

TEST(Train, BestCheckpointImprovesAndHistoryIsSeedDeterministic) {
  SmallSetup s;
  const auto [tr, val] = split_chronological(build_samples(s.ds, s.schemas, s.stats), 1.0 / 12.0);
  TrainingConfig cfg;
  cfg.max_epochs = 6;
  cfg.batch_size = 32;
  cfg.seed = 9;
  auto run = [&](std::vector<double>& curve, std::string& params) {
    GnnModel m(s.topology, s.schemas, GnnConfig{}, 10);
    m.set_standardizer(s.stats);
    const auto h = train(m, tr, val, cfg);
    for (const auto& e : h.epochs) {
      curve.push_back(e.train_nll);
      curve.push_back(e.val_nll);
    }
    params = m.parameters().to_json().dump();
    // best checkpoint restored: its validation NLL equals the recorded best
    std::vector<Sample> vaug = augment_voltage_missing(s.schemas, val);
    EXPECT_NEAR(mean_nll(m, vaug), h.best_val_nll, 1e-9 * std::abs(h.best_val_nll));
    EXPECT_LE(h.best_val_nll, h.epochs.front().val_nll);
    std::vector<Sample> taug = augment_voltage_missing(s.schemas, tr);
    EXPECT_LE(mean_nll(m, taug), h.epochs.front().train_nll);
    return h;
  };
  std::vector<double> a, b;
  std::string pa, pb;
  const auto ha = run(a, pa);
  run(b, pb);
  EXPECT_EQ(a, b);
  EXPECT_EQ(pa, pb);
  std::ostringstream csv;
  ha.write_csv(csv);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "epoch,train_nll,val_nll,wall_seconds");
}

TEST(Train, EarlyStoppingHonoursPatience) {
  SmallSetup s;
  const auto [tr, val] = split_chronological(build_samples(s.ds, s.schemas, s.stats), 1.0 / 12.0);
  GnnModel m(s.topology, s.schemas, GnnConfig{}, 11);
  TrainingConfig cfg;
  cfg.learning_rate = 5.0;  // far too large: validation stops improving quickly
  cfg.early_stopping_patience = 2;
  cfg.max_epochs = 50;
  try {
    const auto h = train(m, tr, val, cfg);
    EXPECT_TRUE(h.stopped_early);
    EXPECT_EQ(h.epochs.size() - 1, h.best_epoch + 2);
  } catch (const TrainingError& e) {
    // divergence is also an acceptable outcome and must name the epoch
    EXPECT_GE(e.epoch(), 1);
  }
}

TEST(Train, NonFiniteLossIsTrainingError) {
  SmallSetup s;
  const auto [tr, val] = split_chronological(build_samples(s.ds, s.schemas, s.stats), 1.0 / 12.0);
  GnnModel m(s.topology, s.schemas, GnnConfig{}, 12);
  m.parameters().value(0)[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train(m, tr, val, TrainingConfig{}), TrainingError);
}

TEST(TrainingConfig, HidingOptionsRoundTrip) {
  TrainingConfig c;
  c.input_mask_rate = 0.2;
  c.bid_hiding_rate = 0.3;
  c.hidden_fill = HiddenFill::Noise;
  c.score_hidden_only = true;
  const TrainingConfig back = TrainingConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hidden_fill, HiddenFill::Noise);
  EXPECT_EQ(c.to_json().at("hidden_fill"), "noise");
  EXPECT_THROW(TrainingConfig::from_json({{"bid_hiding_rate", -0.1}}), ValidationError);
  EXPECT_THROW(TrainingConfig::from_json({{"input_mask_rate", 1.5}}), ValidationError);
  EXPECT_THROW(TrainingConfig::from_json({{"hidden_fill", "zeros"}}), ValidationError);
}

TEST(BidHidingGroups, LoadsAboveAndOtherVoltages) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const GridTopology t = fixture::random_tree(rng, 10);
    const auto schemas = derive_schemas(t, fixture::tiny_schema_config());
    const auto groups = bid_hiding_groups(t, schemas);
    std::size_t g = 0;
    for (std::size_t p = 0; p < t.size(); ++p) {
      if (t.node(p).kind != NodeKind::Prosumer) continue;
      ASSERT_LT(g, groups.size());
      const std::size_t f = t.parent(p), s = t.parent(f);
      std::set<std::pair<std::size_t, std::size_t>> expected;
      for (std::size_t k = 0; k < t.size(); ++k) {
        for (std::size_t c = 0; c < schemas[k].q; ++c) {
          const auto& ch = schemas[k].channels[c];
          const bool voltage = ch.lag == 0 && ch.variable.rfind("voltage", 0) == 0 && t.node(k).kind == NodeKind::Prosumer;
          const bool load = (k == f || k == s) && ch.lag == 0 && !ch.weather;
          if (load || (voltage && k != p)) expected.emplace(k, c);
        }
      }
      const std::set<std::pair<std::size_t, std::size_t>> got(groups[g].begin(), groups[g].end());
      EXPECT_EQ(got, expected);
      ++g;
    }
    EXPECT_EQ(g, groups.size());
  }
}

TEST(Train, BidHidingWithoutGroupsIsPlainTraining) {
  SmallSetup s;
  const auto [tr, val] = split_chronological(build_samples(s.ds, s.schemas, s.stats), 1.0 / 12.0);
  TrainingConfig cfg;
  cfg.max_epochs = 2;
  cfg.batch_size = 32;
  auto params = [&](const TrainingConfig& c, const TrainingOptions& o) {
    GnnModel m(s.topology, s.schemas, GnnConfig{}, 13);
    m.set_standardizer(s.stats);
    train(m, tr, val, c, o);
    return m.parameters().to_json().dump();
  };
  const std::string plain = params(cfg, {});
  TrainingConfig hiding = cfg;
  hiding.bid_hiding_rate = 1.0;
  EXPECT_EQ(params(hiding, {}), plain);
  TrainingOptions with_groups;
  with_groups.hiding_groups = bid_hiding_groups(s.topology, s.schemas);
  const std::string a = params(hiding, with_groups);
  EXPECT_NE(a, plain);
  EXPECT_EQ(params(hiding, with_groups), a);
}

TEST(Train, ScoreHiddenOnlyIgnoresVisibleEntries) {
  SmallSetup s;
  const auto [tr, val] = split_chronological(build_samples(s.ds, s.schemas, s.stats), 1.0 / 12.0);
  TrainingConfig cfg;
  cfg.max_epochs = 1;
  cfg.batch_size = 32;
  cfg.augmentation_enabled = false;
  cfg.input_mask_rate = 0.3;
  cfg.score_hidden_only = true;
  GnnModel m(s.topology, s.schemas, GnnConfig{}, 14);
  m.set_standardizer(s.stats);
  const auto h = train(m, tr, val, cfg);
  // Validation is scored on roughly 30% of entries, so its NLL differs from the all-entry value.
  std::vector<Sample> all_val(val.begin(), val.end());
  EXPECT_TRUE(std::isfinite(h.best_val_nll));
  EXPECT_NE(h.best_val_nll, mean_nll(m, all_val));
}
