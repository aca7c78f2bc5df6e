#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "gridgnn/imputation.hpp"
#include "gridgnn/mpnn.hpp"

using namespace gridgnn;

namespace {

GnnModel tiny_model(std::uint64_t seed, std::size_t steps = 2) {
  GnnConfig cfg;
  cfg.message_passing_steps = steps;
  const GridTopology t = fixture::chain4();
  return GnnModel(t, derive_schemas(t, fixture::tiny_schema_config()), cfg, seed);
}

// Scales every weight so the forward map is a contraction in the fed-back values.
void shrink(GnnModel& m, double factor) {
  auto& p = m.parameters();
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (double& v : p.value(i).values()) v *= factor;
  }
}

Sample with_some_missing(const GnnModel& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Sample s;
  do {
    s = fixture::random_sample(m.schemas(), rng, 0.4);
  } while (s.missing_count() == 0 || s.missing_fraction == 1.0);
  return s;
}

}  // namespace

TEST(Impute, NothingMissingIsZeroIterationsAndVerbatim) {
  const GnnModel m = tiny_model(1);
  std::mt19937_64 rng(2);
  const Sample s = fixture::random_sample(m.schemas(), rng);
  const auto r = impute(m, ImputationProblem{s, {}, {}});
  EXPECT_EQ(r.iterations, 0u);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.filled.values, s.values);
  EXPECT_EQ(r.filled.mask, s.mask);
  for (const auto& node : r.sigma) {
    for (double v : node) EXPECT_EQ(v, 0.0);
  }
}

TEST(Impute, ObservedEntriesArePreservedExactly) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const GnnModel m = tiny_model(seed);
    const Sample s = with_some_missing(m, seed + 100);
    const auto r = impute(m, ImputationProblem{s, {}, {}});
    for (std::size_t k = 0; k < s.values.size(); ++k) {
      for (std::size_t c = 0; c < s.values[k].size(); ++c) {
        if (s.mask[k][c]) {
          EXPECT_EQ(r.filled.values[k][c], s.values[k][c]);
          EXPECT_EQ(r.sigma[k][c], 0.0);
        } else {
          EXPECT_GT(r.sigma[k][c], 0.0);
        }
      }
    }
    EXPECT_EQ(r.filled.mask, s.mask);
  }
}

TEST(Impute, FinalUpdateIsWithinToleranceWhenConverged) {
  GnnModel m = tiny_model(3);
  shrink(m, 0.5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = impute(m, ImputationProblem{with_some_missing(m, seed), {}, {}});
    ASSERT_TRUE(r.converged);
    EXPECT_LE(r.final_update, 1e-3);
    EXPECT_GE(r.iterations, 1u);
    EXPECT_LE(r.iterations, 20u);
  }
}

TEST(Impute, IdempotentAtFixpoint) {
  GnnModel m = tiny_model(4);
  shrink(m, 0.5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ImputationOptions tight;
    tight.tolerance = 1e-12;
    tight.max_iterations = 500;
    const auto first = impute(m, ImputationProblem{with_some_missing(m, seed), {}, tight});
    ASSERT_TRUE(first.converged);
    ImputationOptions again;
    again.init = InitPolicy::KeepProvided;
    const auto second = impute(m, ImputationProblem{first.filled, {}, again});
    EXPECT_EQ(second.iterations, 1u);
    EXPECT_LT(second.final_update, again.tolerance);
  }
}

TEST(Impute, NonConvergenceIsFlaggedNotThrown) {
  const GnnModel m = tiny_model(5);
  ImputationOptions one;
  one.max_iterations = 1;
  one.tolerance = 0.0;
  const auto r = impute(m, ImputationProblem{with_some_missing(m, 6), {}, one});
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 1u);
}

TEST(Impute, RandomInitIsSeeded) {
  GnnModel m = tiny_model(7);
  ImputationOptions o;
  o.init = InitPolicy::Random;
  o.seed = 11;
  o.max_iterations = 2;
  const Sample s = with_some_missing(m, 8);
  const auto a = impute(m, ImputationProblem{s, {}, o});
  const auto b = impute(m, ImputationProblem{s, {}, o});
  EXPECT_EQ(a.filled.values, b.filled.values);
}

TEST(Impute, BatchedEqualsOneByOne) {
  const GnnModel m = tiny_model(9);
  std::vector<Sample> samples;
  for (std::uint64_t seed = 0; seed < 6; ++seed) samples.push_back(with_some_missing(m, seed));
  ImputationOptions o;
  o.chunk = 4;
  const auto all = impute_all(m, std::span<const Sample>(samples), o);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto one = impute(m, ImputationProblem{samples[i], {}, o});
    EXPECT_EQ(all[i].iterations, one.iterations);
    for (std::size_t k = 0; k < one.filled.values.size(); ++k) {
      for (std::size_t c = 0; c < one.filled.values[k].size(); ++c) {
        EXPECT_NEAR(all[i].filled.values[k][c], one.filled.values[k][c], 1e-12);
      }
    }
  }
}

TEST(Impute, Errors) {
  const GnnModel m = tiny_model(10);
  Sample none = make_empty_sample(m.schemas());
  for (auto& node : none.mask) std::fill(node.begin(), node.end(), std::uint8_t{0});
  EXPECT_THROW(impute(m, ImputationProblem{none, {}, {}}), ArgumentError);
  std::mt19937_64 rng(1);
  const Sample full = fixture::random_sample(m.schemas(), rng);
  EXPECT_THROW(impute(m, ImputationProblem{full, {{0, 0}}, {}}), ArgumentError);
  EXPECT_THROW(impute(m, ImputationProblem{full, {{99, 0}}, {}}), ArgumentError);
}

TEST(ImputationReport, HasPerChannelFieldsInPhysicalUnits) {
  GnnModel m = tiny_model(12);
  const std::size_t n = m.schemas().size();
  std::vector<std::vector<double>> mean(n), sd(n);
  for (std::size_t k = 0; k < n; ++k) {
    mean[k].assign(m.schemas()[k].q, 230.0);
    sd[k].assign(m.schemas()[k].q, 2.0);
  }
  m.set_standardizer(Standardizer(mean, sd));
  const Sample s = with_some_missing(m, 13);
  const auto r = impute(m, ImputationProblem{s, {}, {}});
  const auto j = imputation_report(m, r);
  EXPECT_EQ(j.at("iterations").get<std::size_t>(), r.iterations);
  EXPECT_EQ(j.at("converged").get<bool>(), r.converged);
  const auto& p = j.at("nodes").at("p");
  ASSERT_EQ(p.size(), m.schemas()[3].q);
  for (std::size_t c = 0; c < p.size(); ++c) {
    EXPECT_NEAR(p[c].at("value").get<double>(), 230.0 + 2.0 * r.filled.values[3][c], 1e-9);
    EXPECT_NEAR(p[c].at("sigma").get<double>(), 2.0 * r.sigma[3][c], 1e-12);
    EXPECT_EQ(p[c].at("was_observed").get<bool>(), s.mask[3][c] != 0);
  }
}

TEST(PredictVoltages, TwoSigmaBandAndEcho) {
  const GnnModel m = tiny_model(14);
  std::mt19937_64 rng(15);
  const Sample full = fixture::random_sample(m.schemas(), rng);

  const auto echo = predict_voltages(m, full);
  EXPECT_EQ(echo.iterations, 0u);
  ASSERT_FALSE(echo.voltages.empty());
  for (const auto& v : echo.voltages) {
    EXPECT_TRUE(v.was_observed);
    EXPECT_EQ(v.mean, full.values[v.node][v.channel]);
    EXPECT_EQ(v.sigma, 0.0);
  }

  const auto pred = predict_voltages(m, hide_voltages(m.schemas(), full));
  for (const auto& v : pred.voltages) {
    EXPECT_FALSE(v.was_observed);
    EXPECT_GT(v.sigma, 0.0);
    EXPECT_DOUBLE_EQ(v.upper() - v.mean, 2.0 * v.sigma);
    EXPECT_DOUBLE_EQ(v.mean - v.lower(), 2.0 * v.sigma);
  }
}
