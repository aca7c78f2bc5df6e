#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "fixtures.hpp"
#include "gridgnn/baselines.hpp"
#include "gridgnn/mpnn.hpp"
#include "oracles.hpp"

using namespace gridgnn;

namespace {

// Dense layers in -> h -> ... -> out, each with a bias.
std::size_t dense_count(const std::vector<std::size_t>& w) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) n += w[i] * w[i + 1] + w[i + 1];
  return n;
}

}  // namespace

TEST(Mape, WorkedValues) {
  const std::vector<double> a{200, 100}, p{202, 99};
  EXPECT_NEAR(mape(a, p), 1.0, 1e-12);
  EXPECT_EQ(mape(a, a), 0.0);
}

TEST(Mape, ZeroActualsAreExcludedAndCounted) {
  const std::vector<double> a{0, 200, 0}, p{5, 204, 1};
  const auto r = mape_detail(a, p);
  EXPECT_EQ(r.included, 1u);
  EXPECT_EQ(r.excluded, 2u);
  EXPECT_NEAR(r.value, 2.0, 1e-12);
  const std::vector<double> zeros{0, 0};
  EXPECT_THROW(mape(zeros, zeros), MetricError);
  EXPECT_THROW(mape(std::vector<double>{1}, std::vector<double>{1, 2}), MetricError);
}

TEST(Rmse, WorkedValues) {
  const std::vector<double> a{0, 0}, p{3, 4};
  EXPECT_NEAR(rmse(a, p), 3.5355339059327378, 1e-12);
  EXPECT_EQ(rmse(p, p), 0.0);
  EXPECT_THROW(rmse(std::vector<double>{}, std::vector<double>{}), MetricError);
  EXPECT_THROW(rmse(std::vector<double>{1}, std::vector<double>{}), MetricError);
}

TEST(Metrics, NonNegativeAndZeroOnlyWhenEqual) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(200.0, 260.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(8), p(8);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = p[i] = u(rng);
    EXPECT_EQ(mape(a, p), 0.0);
    EXPECT_EQ(rmse(a, p), 0.0);
    p[trial % 8] += 0.5;
    EXPECT_GT(mape(a, p), 0.0);
    EXPECT_GT(rmse(a, p), 0.0);
  }
}

TEST(GeometricWidths, InterpolatesBetweenInputAndOutput) {
  EXPECT_EQ(geometric_widths(100, 1, 2, 1.0), (std::vector<std::size_t>{100, 10, 1}));
  EXPECT_EQ(geometric_widths(8, 1000, 3, 1.0), (std::vector<std::size_t>{8, 40, 200, 1000}));
  EXPECT_EQ(geometric_widths(50, 50, 2, 0.5), (std::vector<std::size_t>{50, 25, 50}));
  EXPECT_EQ(geometric_widths(7, 3, 1, 1.0), (std::vector<std::size_t>{7, 3}));
  EXPECT_THROW(geometric_widths(7, 3, 0, 1.0), ContractError);
}

TEST(BuildBaseline, FeatureParityWithGraphSums) {
  const GridTopology t = make_pilot_topology();
  const auto schemas = derive_schemas(t, SchemaConfig{});
  std::size_t q = 0, p = 0;
  for (const auto& s : schemas) {
    q += s.q;
    p += s.p;
  }
  for (auto kind : {BaselineKind::MLP, BaselineKind::AE}) {
    for (std::size_t layers : {2u, 3u}) {
      const CentralModel m = build_baseline(kind, schemas, layers);
      EXPECT_EQ(m.input_width(), 2 * q);
      EXPECT_EQ(m.widths().front(), 2 * q);
      if (kind == BaselineKind::AE) {
        EXPECT_EQ(m.bottleneck_width(), p);
      }
    }
  }
}

TEST(BuildBaseline, ParameterCountsMatchDenseLayers) {
  const GridTopology t = make_pilot_topology();
  const auto schemas = derive_schemas(t, SchemaConfig{});
  const std::size_t io = build_baseline(BaselineKind::MLP, schemas, 2).input_width();
  for (std::size_t layers : {2u, 3u}) {
    const CentralModel mlp = build_baseline(BaselineKind::MLP, schemas, layers);
    EXPECT_EQ(count_parameters(mlp), dense_count(geometric_widths(io, io, layers, kDefaultWidthScale)));
    const CentralModel ae = build_baseline(BaselineKind::AE, schemas, layers);
    const std::size_t b = ae.bottleneck_width();
    EXPECT_EQ(count_parameters(ae),
              dense_count(geometric_widths(io, b, layers, 1.0)) + dense_count(geometric_widths(b, io, layers, 1.0)));
  }
}

TEST(BuildBaseline, PilotMlpDwarfsGnn) {
  const GridTopology t = make_pilot_topology();
  const auto schemas = derive_schemas(t, SchemaConfig{});
  GnnConfig cfg;
  cfg.layers = 2;
  cfg.message_passing_steps = 5;
  const GnnModel gnn(t, schemas, cfg, 0);
  const CentralModel mlp = build_baseline(BaselineKind::MLP, schemas, 2);
  EXPECT_GT(count_parameters(mlp), 5 * gnn.parameters().scalar_count());
}

TEST(BuildBaseline, SingleNodeTopology) {
  const GridTopology t({{"g", NodeKind::Global, 1}}, {});
  const auto schemas = derive_schemas(t, fixture::tiny_schema_config());
  const CentralModel m = build_baseline(BaselineKind::MLP, schemas, 2, 3);
  const Sample s = make_empty_sample(schemas);
  const Sample* rows[] = {&s};
  Tape tape;
  const DecodedVars d = m.forward(tape, make_batch(schemas, std::span<const Sample* const>(rows)));
  ASSERT_EQ(d.mean.size(), 1u);
  EXPECT_EQ(tape.value(d.mean[0]).cols(), schemas[0].q);
  EXPECT_THROW(build_baseline(BaselineKind::MLP, {}, 2), ContractError);
}

TEST(CentralModel, LossGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (auto kind : {BaselineKind::MLP, BaselineKind::AE}) {
    const GridTopology t = fixture::chain4();
    CentralModel m = build_baseline(kind, derive_schemas(t, fixture::tiny_schema_config()), 2, 5, 1.0);
    std::vector<Sample> samples;
    for (int i = 0; i < 2; ++i) samples.push_back(fixture::random_sample(m.schemas(), rng, 0.3));
    const Sample* rows[] = {&samples[0], &samples[1]};
    const FeatureBatch in = make_batch(m.schemas(), std::span<const Sample* const>(rows));
    const FeatureBatch target = make_targets(m.schemas(), std::span<const Sample* const>(rows));
    auto loss_value = [&] {
      Tape tape;
      return tape.value(nll_loss(tape, m.forward(tape, in), target)).item();
    };
    m.parameters().zero_grad();
    {
      Tape tape;
      tape.backward(nll_loss(tape, m.forward(tape, in), target), m.parameters());
    }
    const auto fd = oracle::finite_difference(m.parameters(), loss_value);
    for (std::size_t p = 0; p < m.parameters().size(); ++p) {
      for (std::size_t i = 0; i < fd[p].size(); ++i) {
        ASSERT_LT(oracle::relative_error(m.parameters().grad(p)[i], fd[p][i]), 1e-4) << m.parameters().id(p);
      }
    }
  }
}

TEST(Reports, CsvHeadersMirrorTables) {
  std::ostringstream cmp, sweep;
  write_comparison_csv({{"GNN", 2, 5, 100, 0.8, 2.4}, {"MLP", 2, 0, 900, 0.9, 2.6}}, cmp);
  EXPECT_EQ(cmp.str().substr(0, cmp.str().find('\n')), "model,layers,mp_steps,params,mape,rmse");
  EXPECT_NE(cmp.str().find("MLP,2,-,900,"), std::string::npos);
  write_sweep_csv({{0.0, 0.8, 2.4}, {0.1, 0.85, 2.5}}, sweep);
  EXPECT_EQ(sweep.str().substr(0, sweep.str().find('\n')), "missing_rate,mape,rmse");
  EXPECT_EQ(default_missing_rates(), (std::vector<double>{0.0, 0.001, 0.01, 0.05, 0.10}));
}
