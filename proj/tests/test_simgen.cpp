#include <cmath>
#include <filesystem>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "cytomix/errors.hpp"
#include "cytomix/llmm.hpp"
#include "cytomix/simgen.hpp"

using namespace cytomix;

namespace {

PlmmTruth two_marker_truth() {
  PlmmTruth t;
  t.markers = {"m1", "m2"};
  t.beta = Eigen::MatrixXd::Constant(2, 2, std::log(5.0));
  t.sigma_cond1 = t.sigma_cond2 = t.sigma_donor = Eigen::VectorXd::Zero(2);
  t.omega_cond1 = t.omega_cond2 = t.omega_donor = Eigen::MatrixXd::Identity(2, 2);
  return t;
}

double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd ca = a.array() - a.mean(), cb = b.array() - b.mean();
  return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

// Population coefficients of X in the linear regression of X on (1, Y1, Y2)
// for the scenario, from the implied covariance of (X, Y1, Y2).
Eigen::Vector2d partial_regression(const DagScenario& s) {
  const double vx = 0.25;
  double y2x = s.b, y1x = 0.0, y1y2 = 0.0;  // Y1 = y1x X + y1y2 Y2 + e1
  if (s.kind == DagKind::no_confounder) y1x = s.a;
  if (s.kind == DagKind::pipe) y1y2 = s.c;
  if (s.kind == DagKind::collider) {
    y1x = s.a;
    y1y2 = s.c;
  }
  const double v2 = y2x * y2x * vx + s.noise2 * s.noise2;
  const double c2x = y2x * vx;
  const double c12 = y1x * c2x + y1y2 * v2;
  const double c1x = y1x * vx + y1y2 * c2x;
  const double v1 = y1x * y1x * vx + y1y2 * y1y2 * v2 + 2 * y1x * y1y2 * c2x + s.noise1 * s.noise1;
  Eigen::Matrix2d S;
  S << v1, c12, c12, v2;
  return S.ldlt().solve(Eigen::Vector2d(c1x, c2x));
}

LogisticFit pooled_fit(const DagSimulation& sim) {
  const LlmmData d = LlmmData::from_table(sim.transformed);
  Eigen::MatrixXd X(d.n_cells(), 3);
  X.col(0).setOnes();
  X.rightCols(2) = d.x;
  Eigen::VectorXd y(d.n_cells());
  for (Eigen::Index i = 0; i < y.size(); ++i) y[i] = d.y[static_cast<std::size_t>(i)];
  return logistic_regression(X, y, 0.0);
}

}  // namespace

TEST(SimulatePlmm, ZeroScalesGiveMeanFive) {
  const auto sim = simulate_plmm(two_marker_truth(), {10, 1000}, 1);
  const auto& t = sim.table;
  for (int c = 0; c < 2; ++c) {
    for (Eigen::Index j = 0; j < 2; ++j) {
      double sum = 0.0;
      int n = 0;
      for (Eigen::Index i = 0; i < t.n_cells(); ++i) {
        if (t.condition_index(i) != c) continue;
        sum += static_cast<double>(t.counts()(i, j));
        ++n;
      }
      EXPECT_EQ(n, 10000);
      EXPECT_NEAR(sum / n, 5.0, 3 * std::sqrt(5.0 / n));
    }
  }
  EXPECT_TRUE(sim.cell_effects.isZero(0.0));
  EXPECT_TRUE(sim.donor_effects.isZero(0.0));
}

TEST(SimulatePlmm, LatentCorrelationRecovered) {
  PlmmTruth t = two_marker_truth();
  t.sigma_cond2.setConstant(0.5);
  t.omega_cond2(0, 1) = t.omega_cond2(1, 0) = 0.8;
  const auto sim = simulate_plmm(t, {10, 1000}, 2);
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < sim.table.n_cells(); ++i) {
    if (sim.table.condition_index(i) == 1) rows.push_back(i);
  }
  const Eigen::MatrixXd b = sim.cell_effects(rows, Eigen::all);
  EXPECT_NEAR(correlation(b.col(0), b.col(1)), 0.8, 0.05);
}

TEST(SimulatePlmm, SameSeedSameTable) {
  PlmmTruth t = two_marker_truth();
  t.sigma_cond1.setConstant(0.3);
  t.sigma_donor.setConstant(0.2);
  EXPECT_TRUE(simulate_plmm(t, {3, 50}, 7).table == simulate_plmm(t, {3, 50}, 7).table);
  EXPECT_FALSE(simulate_plmm(t, {3, 50}, 7).table == simulate_plmm(t, {3, 50}, 8).table);
}

TEST(SimulatePlmm, OverflowRejected) {
  PlmmTruth t = two_marker_truth();
  t.beta(1, 0) = 31.0;
  EXPECT_THROW(simulate_plmm(t, {2, 5}, 1), ParameterError);
}

TEST(SimulatePlmm, InvalidTruthRejected) {
  PlmmTruth t = two_marker_truth();
  t.sigma_donor[0] = -1.0;
  EXPECT_THROW(t.validate(), ParameterError);
  t = two_marker_truth();
  t.omega_cond1(0, 1) = t.omega_cond1(1, 0) = 1.5;
  EXPECT_THROW(t.validate(), ParameterError);
}

TEST(SimulateDag, EveryDonorPaired) {
  DagScenario s;
  s.donors = 30;
  s.cells_per_donor = 2;
  const auto sim = simulate_dag(s, 3);
  EXPECT_TRUE(sim.counts->paired());
  EXPECT_EQ(sim.counts->n_cells(), 60);
  s.cells_per_donor = 1;
  EXPECT_THROW(simulate_dag(s, 3), ParameterError);
}

TEST(SimulateDag, SignsMatchPartialRegression) {
  for (DagKind kind : {DagKind::no_confounder, DagKind::pipe, DagKind::collider}) {
    DagScenario s;
    s.kind = kind;
    s.cells_per_donor = 2000;
    s.donors = 10;
    const Eigen::Vector2d oracle = partial_regression(s);
    const auto fit = pooled_fit(simulate_dag(s, 4, 1.0));
    ASSERT_TRUE(fit.converged);
    for (int j = 0; j < 2; ++j) {
      const double se = std::sqrt(fit.cov(j + 1, j + 1));
      if (std::abs(oracle[j]) < 1e-12) {
        EXPECT_LT(std::abs(fit.beta[j + 1]), 3 * se) << to_string(kind) << " Y" << j + 1;
      } else {
        EXPECT_EQ(fit.beta[j + 1] > 0, oracle[j] > 0) << to_string(kind) << " Y" << j + 1;
        EXPECT_GT(std::abs(fit.beta[j + 1]), 3 * se) << to_string(kind) << " Y" << j + 1;
      }
    }
  }
}

TEST(SimulateDag, NullScenarioHasNoSignal) {
  DagScenario s;
  s.a = s.b = s.c = 0.0;
  s.cells_per_donor = 1000;
  const auto fit = pooled_fit(simulate_dag(s, 5, 1.0));
  for (int j = 1; j < 3; ++j) EXPECT_LT(std::abs(fit.beta[j]), 3 * std::sqrt(fit.cov(j, j)));
}

TEST(SimulateDag, NegativeScaleRejected) {
  DagScenario s;
  s.noise1 = -1.0;
  EXPECT_THROW(s.validate(), ParameterError);
  EXPECT_THROW(dag_kind_from_string("fork"), ConfigError);
}

TEST(SimulateLlmm, ShapesAndDeterminism) {
  LlmmTruth t;
  t.markers = {"a", "b"};
  t.beta = Eigen::Vector3d(0.1, 0.5, -0.5);
  t.sigma_donor = Eigen::Vector3d(0.2, 0.2, 0.2);
  t.omega_donor = Eigen::Matrix3d::Identity();
  const auto s1 = simulate_llmm(t, 4, 25, 9), s2 = simulate_llmm(t, 4, 25, 9);
  EXPECT_EQ(s1.data.n_cells(), 100);
  EXPECT_EQ(s1.donor_effects.rows(), 4);
  EXPECT_EQ(s1.donor_effects.cols(), 3);
  EXPECT_TRUE(s1.data.x == s2.data.x);
  EXPECT_EQ(s1.data.y, s2.data.y);
}

TEST(GroundTruthJson, RoundTripAndResimulate) {
  GroundTruth g;
  g.seed = 123;
  PlmmTruth t = two_marker_truth();
  t.beta(1, 1) = 2.25;
  t.sigma_cond1.setConstant(0.3);
  t.omega_cond2(0, 1) = t.omega_cond2(1, 0) = 0.6;
  t.sigma_cond2.setConstant(0.4);
  g.plmm = t;
  g.layout = {3, 40};
  const std::string text = truth_to_json(g);
  const GroundTruth back = truth_from_json(text);
  EXPECT_EQ(truth_to_json(back), text);
  EXPECT_TRUE(resimulate(back) == simulate_plmm(t, g.layout, 123).table);

  const auto path = std::filesystem::temp_directory_path() / "cytomix_truth_test.json";
  write_truth(g, path);
  EXPECT_TRUE(resimulate(read_truth(path)) == resimulate(g));
  std::filesystem::remove(path);

  GroundTruth dag;
  dag.seed = 5;
  dag.dag = DagScenario{};
  dag.dag->cells_per_donor = 20;
  EXPECT_EQ(truth_to_json(truth_from_json(truth_to_json(dag))), truth_to_json(dag));
  EXPECT_TRUE(resimulate(truth_from_json(truth_to_json(dag))) == resimulate(dag));
}

TEST(GroundTruthJson, MalformedRejected) {
  EXPECT_THROW(truth_from_json("{not json"), SchemaError);
  EXPECT_THROW(truth_from_json(R"({"schema":"other","version":1})"), SchemaError);
}
