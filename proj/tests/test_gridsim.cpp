#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "gridgnn/gridsim.hpp"

using namespace gridgnn;

namespace {

constexpr std::int64_t kStart = 1557878400;  // 2019-05-15T00:00:00Z

RadialNetwork single_line(double r, double x) {
  RadialNetwork net;
  net.parent = {0, 0};
  net.line = {{}, {r, x}};
  net.source_voltage = 240.0;
  return net;
}

SyntheticGridSpec quiet_spec(GridTopology t) {
  SyntheticGridSpec s = make_default_spec(std::move(t), 3);
  for (auto& e : s.elements) {
    e.demand_kw = 0.0;
    e.pv_kw = 0.0;
  }
  s.unmetered_global_kw = 0.0;
  s.noise = NoiseParams{0, 0, 0, 0, 0, 0, 0, 0, 0};
  return s;
}

/// Random radial network with buses in topological order.
RadialNetwork random_network(std::mt19937_64& rng, std::size_t n) {
  RadialNetwork net;
  net.parent.push_back(0);
  net.line.push_back({});
  std::uniform_real_distribution<double> imp(0.0, 0.1);
  for (std::size_t j = 1; j < n; ++j) {
    net.parent.push_back(std::uniform_int_distribution<std::size_t>(0, j - 1)(rng));
    net.line.push_back({imp(rng), imp(rng)});
  }
  return net;
}

std::vector<double> scaled(std::vector<double> v, double f) {
  for (double& x : v) x *= f;
  return v;
}

// Joint density of the chain x0 -> x1 -> x2 integrated on a grid to give E[x0, x1 | x2].
std::pair<double, double> chain_posterior_by_quadrature(double root_std, double a1, double s1, double a2, double s2, double x2) {
  const double lo = -8.0 * root_std, hi = 8.0 * root_std;
  const int n = 1601;
  const double h = (hi - lo) / (n - 1);
  double z = 0.0, m0 = 0.0, m1 = 0.0;
  auto logn = [](double x, double sd) { return -0.5 * (x / sd) * (x / sd); };
  for (int i = 0; i < n; ++i) {
    const double x0 = lo + i * h;
    for (int j = 0; j < n; ++j) {
      const double x1 = lo + j * h;
      const double w = std::exp(logn(x0, root_std) + logn(x1 - a1 * x0, s1) + logn(x2 - a2 * x1, s2));
      z += w;
      m0 += w * x0;
      m1 += w * x1;
    }
  }
  return {m0 / z, m1 / z};
}

}  // namespace

TEST(LinearVoltages, SingleLineDrop) {
  const RadialNetwork net = single_line(0.5, 0.0);
  const std::vector<double> q{0.0, 0.0};
  EXPECT_DOUBLE_EQ(linear_voltages(net, std::vector<double>{0.0, 480.0}, q)[1], 239.0);
  EXPECT_DOUBLE_EQ(linear_voltages(net, std::vector<double>{0.0, -480.0}, q)[1], 241.0);
}

TEST(LinearVoltages, NonTopologicalOrderUnsupported) {
  RadialNetwork net;
  net.parent = {0, 2, 0};
  net.line.assign(3, {0.1, 0.0});
  const std::vector<double> z(3, 0.0);
  EXPECT_THROW(linear_voltages(net, z, z), UnsupportedError);
}

TEST(LinearVoltages, DoublingLoadsDoublesDrops) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const RadialNetwork net = random_network(rng, 12);
    std::vector<double> p(12), q(12);
    std::normal_distribution<double> n(0.0, 2000.0);
    for (std::size_t i = 0; i < 12; ++i) {
      p[i] = n(rng);
      q[i] = 0.3 * p[i];
    }
    const auto v1 = linear_voltages(net, p, q);
    const auto v2 = linear_voltages(net, scaled(p, 2.0), scaled(q, 2.0));
    for (std::size_t j = 0; j < 12; ++j) EXPECT_NEAR(240.0 - v2[j], 2.0 * (240.0 - v1[j]), 1e-9);
  }
}

TEST(LinearVoltages, Superposition) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const RadialNetwork net = random_network(rng, 10);
    std::vector<double> pa(10), pb(10), pab(10);
    std::normal_distribution<double> n(0.0, 1500.0);
    for (std::size_t i = 0; i < 10; ++i) {
      pa[i] = n(rng);
      pb[i] = n(rng);
      pab[i] = pa[i] + pb[i];
    }
    const auto va = linear_voltages(net, pa, scaled(pa, 0.3));
    const auto vb = linear_voltages(net, pb, scaled(pb, 0.3));
    const auto vab = linear_voltages(net, pab, scaled(pab, 0.3));
    for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(240.0 - vab[j], (240.0 - va[j]) + (240.0 - vb[j]), 1e-9);
  }
}

// More load at one bus never raises any voltage.
TEST(LinearVoltages, MonotonicInLoad) {
  const Simulation sim = simulate(make_pilot_spec(4), kStart, 192, 5);
  const GroundTruth& g = sim.truth;
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> bus(1, g.load_w.size() - 1), step(0, 191);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = step(rng);
    std::vector<double> extra(g.load_w.size(), 0.0);
    extra[bus(rng)] = 5000.0;
    const auto before = g.voltages(t);
    const auto after = g.voltages(t, extra);
    for (std::size_t j = 0; j < before.size(); ++j) EXPECT_LE(after[j], before[j] + 1e-12);
  }
}

TEST(Simulate, ZeroLoadAndNoiseGivesSourceVoltage) {
  const Simulation sim = simulate(quiet_spec(make_pilot_topology()), kStart, 192, 7);
  std::size_t checked = 0;
  for (const auto& s : sim.dataset.series()) {
    if (s.sensor_id.find(".voltage") == std::string::npos && s.sensor_id.find("busbar_voltage") == std::string::npos) continue;
    for (double v : s.values) EXPECT_EQ(v, 240.0) << s.sensor_id;
    ++checked;
  }
  EXPECT_EQ(checked, 21u + 7u * 3u + 15u);
}

TEST(Simulate, SeedDeterminismAndSensitivity) {
  const auto spec = make_default_spec(fixture::chain4(), 8);
  const auto a = simulate(spec, kStart, 200, 9).dataset;
  const auto b = simulate(spec, kStart, 200, 9).dataset;
  const auto c = simulate(spec, kStart, 200, 10).dataset;
  ASSERT_EQ(a.series().size(), b.series().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.series().size(); ++i) {
    EXPECT_EQ(a.series()[i].values, b.series()[i].values);
    differs |= a.series()[i].values != c.series()[i].values;
  }
  EXPECT_TRUE(differs);
}

TEST(Simulate, PilotSensorsAndPlausibleVoltages) {
  const auto ds = simulate(make_pilot_spec(), kStart, 7 * kStepsPerDay, 11).dataset;
  EXPECT_NE(ds.find("p1.voltage"), nullptr);
  EXPECT_NE(ds.find("p4.voltage_c"), nullptr);
  EXPECT_NE(ds.find("wx:s3.irradiance"), nullptr);
  EXPECT_NE(ds.find("global.reactive_energy"), nullptr);
  double lo = 1e9, hi = -1e9;
  for (const auto& s : ds.series()) {
    if (s.sensor_id.find(".voltage") == std::string::npos) continue;
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  EXPECT_GT(lo, 216.0);
  EXPECT_LT(hi, 253.0);
  EXPECT_GT(hi, 240.0);  // PV export produces some overvoltage
}

TEST(Simulate, TooShortAndOffGridRejected) {
  const auto spec = make_default_spec(fixture::chain4(), 1);
  EXPECT_THROW(simulate(spec, kStart, 100, 1), ArgumentError);
  EXPECT_THROW(simulate(spec, kStart + 60, 200, 1), ArgumentError);
}

TEST(Spec, JsonRoundTripPreservesHash) {
  const auto spec = make_pilot_spec(12);
  const auto back = SyntheticGridSpec::from_json(nlohmann::json::parse(spec.to_json().dump()));
  EXPECT_EQ(back.hash(), spec.hash());
  auto bad = spec.to_json();
  bad["elements"]["p1"]["r"] = -1.0;
  EXPECT_THROW(SyntheticGridSpec::from_json(bad), ValidationError);
}

TEST(InjectMissing, ExactCounts) {
  TimeSeriesDataset ds(kStart, 100);
  for (int i = 0; i < 10; ++i) ds.add_series("x" + std::to_string(i));
  ASSERT_EQ(ds.point_count(), 1000u);
  EXPECT_EQ(inject_missing(ds, 0.0, MissingPattern::Random, 1).missing_count(), 0u);
  EXPECT_EQ(inject_missing(ds, 0.10, MissingPattern::Random, 1).missing_count(), 100u);
  EXPECT_EQ(inject_missing(ds, 0.10, MissingPattern::Burst, 1).missing_count(), 100u);
  EXPECT_EQ(inject_missing(ds, 0.001, MissingPattern::Random, 1).missing_count(), 1u);
  EXPECT_EQ(inject_missing(ds, 0.0999, MissingPattern::Random, 1).missing_count(), 99u);
  EXPECT_THROW(inject_missing(ds, 1.0, MissingPattern::Random, 1), ArgumentError);
  EXPECT_THROW(inject_missing(ds, -0.1, MissingPattern::Random, 1), ArgumentError);
}

TEST(InjectMissing, ReproduciblePerSeed) {
  const auto ds = simulate(make_default_spec(fixture::chain4(), 2), kStart, 200, 3).dataset;
  const auto a = inject_missing(ds, 0.05, MissingPattern::Random, 4);
  const auto b = inject_missing(ds, 0.05, MissingPattern::Random, 4);
  const auto c = inject_missing(ds, 0.05, MissingPattern::Random, 5);
  bool differs = false;
  for (std::size_t i = 0; i < a.series().size(); ++i) {
    EXPECT_EQ(a.series()[i].missing, b.series()[i].missing);
    differs |= a.series()[i].missing != c.series()[i].missing;
  }
  EXPECT_TRUE(differs);
}

TEST(InjectMissing, BurstsAreContiguous) {
  TimeSeriesDataset ds(kStart, 2000);
  for (int i = 0; i < 5; ++i) ds.add_series("x" + std::to_string(i));
  const auto out = inject_missing(ds, 0.05, MissingPattern::Burst, 6);
  std::size_t runs = 0;
  for (const auto& s : out.series()) {
    for (std::size_t t = 0; t < s.missing.size(); ++t) runs += s.missing[t] && (t == 0 || !s.missing[t - 1]) ? 1 : 0;
  }
  // 500 points in gaps of 4..96 steps: far fewer runs than points
  EXPECT_LT(runs, 150u);
  EXPECT_GT(runs, 0u);
}

TEST(DatasetCsv, RoundTripWithWeatherSplit) {
  auto ds = simulate(make_default_spec(fixture::chain4(), 2), kStart, 200, 3).dataset;
  ds = inject_missing(ds, 0.02, MissingPattern::Random, 1);
  std::stringstream main, wx;
  write_dataset_csv(ds, main, false);
  write_dataset_csv(ds, wx, true);
  EXPECT_EQ(main.str().substr(0, 33), "timestamp,sensor_id,value,quality");
  const auto back = read_dataset_csv({&main, &wx});
  ASSERT_EQ(back.length(), ds.length());
  EXPECT_EQ(back.start(), ds.start());
  for (const auto& s : ds.series()) {
    const Series* b = back.find(s.sensor_id);
    ASSERT_NE(b, nullptr) << s.sensor_id;
    EXPECT_EQ(b->missing, s.missing);
    EXPECT_EQ(b->values, s.values);
  }
}

TEST(DatasetCsv, RejectsOffGridTimestampsAndBadQuality) {
  std::istringstream off("timestamp,sensor_id,value,quality\n2019-05-15T00:00:00Z,a,1,ok\n2019-05-15T00:07:00Z,a,2,ok\n");
  EXPECT_THROW(read_dataset_csv({&off}), DatasetError);
  std::istringstream bad("timestamp,sensor_id,value,quality\n2019-05-15T00:00:00Z,a,1,good\n");
  EXPECT_THROW(read_dataset_csv({&bad}), DatasetError);
  std::istringstream gap("timestamp,sensor_id,value,quality\n2019-05-15T00:00:00Z,a,1,ok\n2019-05-15T00:30:00Z,a,2,ok\n");
  const auto ds = read_dataset_csv({&gap});
  EXPECT_EQ(ds.length(), 3u);
  EXPECT_EQ(ds.at("a").missing, (std::vector<std::uint8_t>{0, 1, 0}));
}

TEST(ExactConditional, BivariateTextbook) {
  LinearGaussianModel m{Eigen::Vector2d::Zero(), Eigen::Matrix2d{{1.0, 0.5}, {0.5, 1.0}}};
  const auto c = exact_conditional(m, {{1, 2.0}});
  ASSERT_EQ(c.free, (std::vector<std::size_t>{0}));
  EXPECT_NEAR(c.mean(0), 1.0, 1e-15);
  EXPECT_NEAR(c.covariance(0, 0), 0.75, 1e-15);
}

TEST(ExactConditional, NothingObservedReturnsPrior) {
  const auto m = chain_model(1.0, {0.8, 0.5}, {0.6, 0.7});
  const auto c = exact_conditional(m, {});
  EXPECT_EQ(c.mean, m.mean);
  EXPECT_EQ(c.covariance, m.covariance);
}

TEST(ExactConditional, SingularObservedBlockIsNumericalError) {
  LinearGaussianModel m{Eigen::Vector2d::Zero(), Eigen::Matrix2d{{1.0, 1.0}, {1.0, 1.0}}};
  EXPECT_THROW(exact_conditional(m, {{0, 1.0}, {1, 1.0}}), NumericalError);
}

TEST(ExactConditional, ChainMatchesQuadrature) {
  const double root = 1.0, a1 = 0.8, s1 = 0.6, a2 = 0.5, s2 = 0.7;
  const auto m = chain_model(root, {a1, a2}, {s1, s2});
  for (double x2 : {-1.5, 0.4, 2.0}) {
    const auto c = exact_conditional(m, {{2, x2}});
    const auto [q0, q1] = chain_posterior_by_quadrature(root, a1, s1, a2, s2, x2);
    EXPECT_NEAR(c.mean(0), q0, 1e-3);
    EXPECT_NEAR(c.mean(1), q1, 1e-3);
  }
}

TEST(ExactConditional, SampleMomentsMatchModel) {
  const auto m = with_noisy_readings(chain_model(1.0, {0.8, 0.5}, {0.6, 0.7}), 0.2);
  const Eigen::MatrixXd x = sample_gaussian(m, 50000, 3);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  const Eigen::MatrixXd cov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
  EXPECT_LT((cov - m.covariance).cwiseAbs().maxCoeff(), 0.03);
  EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.02);
}
