// Acceptance runner: one PASS/FAIL line per criterion, exit 1 on any failure.
// Pass criterion names as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cytomix/diagnostics.hpp"
#include "cytomix/draws.hpp"
#include "cytomix/llmm.hpp"
#include "cytomix/pipeline.hpp"
#include "cytomix/plmm.hpp"
#include "cytomix/prob_core.hpp"
#include "cytomix/sampler.hpp"
#include "cytomix/simgen.hpp"

using namespace cytomix;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradientRelTol = 1e-5;
constexpr double kFdStep = 1e-5;
constexpr double kGradientPointSd = 0.5;  // wider points reach |log p| ~ 1e7, where a 1e-5 step is roundoff-bound
constexpr int kGradientPoints = 100;
constexpr double kLkjKsMax = 0.01;
constexpr double kHalfCauchyMedianRel = 0.02;
constexpr double kMomentSes = 3.0;
constexpr double kRhatMax = 1.01;
constexpr double kCoverageMin = 0.86;
constexpr int kCorrIncreaseMin = 18;
constexpr double kPpcCalibrationMin = 0.90;
constexpr double kMomHmcSds = 2.0;
constexpr double kMomTruthAbs = 0.15;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << x;
  return s.str();
}

// Largest |analytic - central difference| / max(1, |central difference|).
double worst_gradient_error(const Model& m, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, kGradientPointSd);
  double worst = 0.0;
  for (int rep = 0; rep < kGradientPoints; ++rep) {
    Eigen::VectorXd q(m.dimension());
    for (auto& x : q) x = z(rng);
    Eigen::VectorXd g(m.dimension());
    m.log_density(q, &g);
    for (Eigen::Index k = 0; k < q.size(); ++k) {
      Eigen::VectorXd a = q, b = q;
      a[k] += kFdStep;
      b[k] -= kFdStep;
      const double fd = (m.log_density(a, nullptr) - m.log_density(b, nullptr)) / (2 * kFdStep);
      worst = std::max(worst, std::abs(g[k] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

Outcome gradients() {
  PlmmTruth t;
  t.markers = {"m1", "m2", "m3"};
  t.beta = Eigen::MatrixXd::Constant(2, 3, 1.0);
  t.sigma_cond1 = t.sigma_cond2 = Eigen::VectorXd::Constant(3, 0.5);
  t.sigma_donor = Eigen::VectorXd::Constant(3, 0.3);
  t.omega_cond1 = t.omega_cond2 = t.omega_donor = Eigen::MatrixXd::Identity(3, 3);
  // 3 donors x 2 conditions x 9 cells, trimmed to the first 50 cells.
  const auto sim = simulate_plmm(t, {3, 9}, 1);
  std::vector<Eigen::Index> rows(50);
  for (Eigen::Index i = 0; i < 50; ++i) rows[static_cast<std::size_t>(i)] = i;
  const auto pd = std::make_shared<const PlmmData>(PlmmData::from_table(sim.table.select_rows(rows)));

  LlmmTruth lt;
  lt.markers = {"m1", "m2", "m3"};
  lt.beta = Eigen::Vector4d(0.2, 0.5, -0.5, 0.3);
  lt.sigma_donor = Eigen::VectorXd::Constant(4, 0.4);
  lt.omega_donor = Eigen::MatrixXd::Identity(4, 4);
  const auto ld = std::make_shared<const LlmmData>(simulate_llmm(lt, 4, 10, 2).data);

  std::mt19937_64 rng(3);
  double worst_plmm = 0.0;
  for (auto form : {Parameterization::donor_contrasts, Parameterization::non_centered,
                    Parameterization::centered}) {
    worst_plmm = std::max(worst_plmm, worst_gradient_error(PlmmModel(pd, {}, form), rng));
  }
  const double worst_llmm = worst_gradient_error(LlmmModel(ld), rng);
  return {worst_plmm < kGradientRelTol && worst_llmm < kGradientRelTol && pd->n_cells() == 50,
          "PLMM N=" + std::to_string(pd->n_cells()) + " max rel err " + fmt(worst_plmm) +
              ", LLMM N=" + std::to_string(ld->n_cells()) + " max rel err " + fmt(worst_llmm)};
}

Outcome priors() {
  Rng rng = make_rng(11, 0);
  const int n = 100000;
  std::vector<double> r(n);
  for (auto& x : r) x = prob::sample_lkj_corr_cholesky(2, 1.0, rng).correlation()(0, 1);
  std::sort(r.begin(), r.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double cdf = (r[static_cast<std::size_t>(i)] + 1.0) / 2.0;
    ks = std::max({ks, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
  }
  std::vector<double> s(n);
  for (auto& x : s) x = prob::sample_half_cauchy(2.5, rng);
  const double med = quantile(s, 0.5);
  const double rel = std::abs(med - 2.5) / 2.5;
  return {ks < kLkjKsMax && rel < kHalfCauchyMedianRel,
          "LKJ(1) J=2 KS " + fmt(ks) + ", half-Cauchy(2.5) median " + fmt(med)};
}

class Gaussian2d : public Model {
 public:
  explicit Gaussian2d(double rho) {
    S_ << 1.0, rho, rho, 1.0;
    P_ = S_.inverse();
  }
  Eigen::Index dimension() const override { return 2; }
  double log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const override {
    const Eigen::Vector2d Pq = P_ * q;
    if (grad) *grad = -Pq;
    return -0.5 * q.dot(Pq);
  }
  Eigen::Matrix2d S_, P_;
};

Outcome sampler() {
  const Gaussian2d model(0.7);
  SamplerConfig c;
  c.chains = 8;
  c.warmup = 500;
  c.iterations = 5500;
  c.seed = 5;
  const auto res = run_chains(model, c, {Eigen::VectorXd::Zero(2)});
  const auto& d = res.draws;
  // Moments: E x, E y, E x^2, E y^2, E xy against 0, 0, 1, 1, 0.7.
  const Eigen::VectorXd x = d.values.col(0), y = d.values.col(1);
  const std::vector<std::pair<Eigen::VectorXd, double>> moments = {
      {x, 0.0}, {y, 0.0}, {x.array().square(), 1.0}, {y.array().square(), 1.0}, {x.cwiseProduct(y), 0.7}};
  double worst = 0.0;
  for (const auto& [v, truth] : moments) {
    ChainSet chains;
    for (int k = 0; k < c.chains; ++k) chains.push_back(v.segment(k * 5000, 5000));
    worst = std::max(worst, std::abs(v.mean() - truth) / mcse_mean(chains));
  }
  const double rhat = res.diagnostics.max_r_hat();
  return {d.num_draws() == 40000 && worst < kMomentSes && rhat < kRhatMax,
          "worst moment error " + fmt(worst, 3) + " MCSE, max R-hat " + fmt(rhat, 5)};
}

PlmmTruth recovery_truth() {
  PlmmTruth t;
  t.markers = {"m1", "m2", "m3"};
  t.beta.resize(2, 3);
  t.beta << 1.5, 1.0, 2.0,  //
      2.0, 1.0, 2.0;
  t.sigma_cond1 = Eigen::Vector3d(0.5, 0.5, 0.5);
  t.sigma_cond2 = Eigen::Vector3d(0.5, 0.5, 0.5);
  t.sigma_donor = Eigen::Vector3d(0.3, 0.3, 0.3);
  t.omega_cond1 = t.omega_cond2 = t.omega_donor = Eigen::MatrixXd::Identity(3, 3);
  t.omega_cond1(0, 1) = t.omega_cond1(1, 0) = 0.1;
  t.omega_cond2(0, 1) = t.omega_cond2(1, 0) = 0.6;
  return t;
}

Outcome plmm_recovery() {
  const PlmmTruth truth = recovery_truth();
  int covered = 0, checked = 0, p12_above = 0;
  double worst_rhat = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const auto sim = simulate_plmm(truth, {8, 200}, 1000 + static_cast<std::uint64_t>(rep));
    const auto data = std::make_shared<const PlmmData>(PlmmData::from_table(sim.table));
    const PlmmModel model(data);
    SamplerConfig c;  // defaults: 8 chains, 125 retained draws each
    c.seed = 2000 + static_cast<std::uint64_t>(rep);
    const auto res = run_chains(model, c, plmm_init(model, c.chains, c.seed).inits);
    worst_rhat = std::max(worst_rhat, res.diagnostics.max_r_hat());
    // Every beta entry, both conditions.
    for (int cond = 0; cond < 2; ++cond) {
      for (int j = 0; j < 3; ++j) {
        const Eigen::Index p = res.draws.column(beta_name(cond, truth.markers[static_cast<std::size_t>(j)]));
        const auto s = summarize_sample({res.draws.values.col(p).begin(), res.draws.values.col(p).end()}, "", "");
        covered += (s.q025 <= truth.beta(cond, j) && truth.beta(cond, j) <= s.q975);
        ++checked;
      }
    }
    p12_above += corr_increase_probability(res.draws, truth.markers).p_hat(0, 1) > 0.5;
  }
  const double coverage = static_cast<double>(covered) / checked;
  return {coverage >= kCoverageMin && p12_above >= kCorrIncreaseMin,
          "beta coverage " + std::to_string(covered) + "/" + std::to_string(checked) + ", p12 > 0.5 in " +
              std::to_string(p12_above) + "/20, worst max R-hat " + fmt(worst_rhat)};
}

Outcome ppc_calibration() {
  PlmmTruth t;
  t.markers = {"pSTAT1", "pSTAT3", "pSTAT5"};
  t.beta.resize(2, 3);
  t.beta << 1.2, 0.8, 1.5,  //
      1.6, 0.9, 1.4;
  t.sigma_cond1 = t.sigma_cond2 = Eigen::Vector3d(0.6, 0.6, 0.6);
  t.sigma_donor = Eigen::Vector3d(0.3, 0.3, 0.3);
  t.omega_cond1 = t.omega_cond2 = t.omega_donor = Eigen::MatrixXd::Identity(3, 3);
  t.omega_cond2(0, 1) = t.omega_cond2(1, 0) = 0.4;
  const SubsetSpec subset_a = signaling_subsets()[0];
  int inside = 0;
  for (int rep = 0; rep < 50; ++rep) {
    const auto sim = simulate_plmm(t, {4, 50}, 3000 + static_cast<std::uint64_t>(rep));
    const auto data = std::make_shared<const PlmmData>(PlmmData::from_table(sim.table));
    const PlmmModel model(data);
    SamplerConfig c;
    c.chains = 4;
    c.seed = 4000 + static_cast<std::uint64_t>(rep);
    const auto res = run_chains(model, c, plmm_init(model, c.chains, c.seed).inits);
    const auto ppc = posterior_predictive(res.draws, *data, {subset_a}, 100, c.seed);
    inside += ppc[0].observed_in_central_interval(0.95);
  }
  const double rate = inside / 50.0;
  return {rate >= kPpcCalibrationMin, "subset A observed inside central 95% in " + std::to_string(inside) + "/50"};
}

// Coefficients of X regressed on (Y1, Y2), and of X on Y2 alone, from the
// collider's implied covariance.
std::pair<Eigen::Vector2d, double> collider_oracle(const DagScenario& s) {
  const double vx = 0.25;
  const double v2 = s.b * s.b * vx + s.noise2 * s.noise2;
  const double c2x = s.b * vx;
  const double c1x = s.a * vx + s.c * c2x;
  const double c12 = s.a * c2x + s.c * v2;
  const double v1 = s.a * s.a * vx + s.c * s.c * v2 + 2 * s.a * s.c * c2x + s.noise1 * s.noise1;
  Eigen::Matrix2d S;
  S << v1, c12, c12, v2;
  return {S.ldlt().solve(Eigen::Vector2d(c1x, c2x)), c2x / v2};
}

QuantileSummary llmm_coefficient(const LlmmData& data, const std::string& coef, std::uint64_t seed) {
  const LlmmModel model(std::make_shared<const LlmmData>(data));
  SamplerConfig c;
  c.chains = 4;
  c.warmup = 300;
  c.iterations = 800;
  c.seed = seed;
  const auto res = run_chains(model, c, llmm_init(model, c.chains, seed));
  for (const auto& r : llmm_fixed_effect_summary(res.draws, data.coefficient_names())) {
    if (r.marker == coef) return r;
  }
  throw std::runtime_error("coefficient " + coef + " missing");
}

Outcome collider() {
  DagScenario s;
  s.kind = DagKind::collider;
  s.a = 1.0;
  s.b = 0.5;
  s.c = 1.0;
  s.donors = 8;
  s.cells_per_donor = 250;
  s.donor_scale = 0.2;
  const auto sim = simulate_dag(s, 7);
  const LlmmData data = LlmmData::from_table(sim.transformed);
  const std::string y1 = data.markers[0], y2 = data.markers[1];
  const auto [joint_oracle, marginal_oracle] = collider_oracle(s);

  const QuantileSummary joint = llmm_coefficient(data, y2, 8);
  const QuantileSummary alone = llmm_coefficient(data.exclude_markers({y1}), y2, 9);

  // Marginal contrast from a PLMM fit to the count-scale export.
  const auto pdata = std::make_shared<const PlmmData>(PlmmData::from_table(*sim.counts, {y2}));
  const PlmmModel pm(pdata);
  SamplerConfig c;
  c.chains = 4;
  c.seed = 10;
  const auto pres = run_chains(pm, c, plmm_init(pm, c.chains, c.seed).inits);
  QuantileSummary marginal;
  for (const auto& r : fixed_effect_summary(pres.draws, {y2})) {
    if (r.quantity == "beta_diff") marginal = r;
  }
  const bool ok = joint.q975 < 0 && marginal.q025 > 0 && alone.q025 > 0 && joint_oracle[1] < 0 &&
                  marginal_oracle > 0;
  return {ok, "joint Y2 CI [" + fmt(joint.q025) + ", " + fmt(joint.q975) + "] (oracle " + fmt(joint_oracle[1]) +
                  "), PLMM contrast CI [" + fmt(marginal.q025) + ", " + fmt(marginal.q975) + "] (oracle " +
                  fmt(marginal_oracle) + "), Y1 excluded CI [" + fmt(alone.q025) + ", " + fmt(alone.q975) + "]"};
}

Outcome mom_vs_hmc() {
  LlmmTruth t;
  t.markers = {"m1", "m2", "m3"};
  t.beta = Eigen::Vector4d(-0.5, 0.8, -0.6, 0.4);
  t.sigma_donor = Eigen::VectorXd::Constant(4, 0.3);
  t.omega_donor = Eigen::MatrixXd::Identity(4, 4);
  const auto sim = simulate_llmm(t, 20, 500, 12);
  const MomEstimate mom = llmm_mom_fit(sim.data);
  const LlmmModel model(std::make_shared<const LlmmData>(sim.data));
  SamplerConfig c;
  c.seed = 13;
  const auto res = run_chains(model, c, llmm_init(model, c.chains, c.seed));
  double worst_sd = 0.0, worst_truth = 0.0;
  const auto names = sim.data.coefficient_names();
  for (std::size_t k = 0; k < names.size(); ++k) {
    const Eigen::VectorXd v = res.draws.values.col(res.draws.column(llmm_beta_name(names[k])));
    const double mean = v.mean();
    const double sd = std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
    const auto i = static_cast<Eigen::Index>(k);
    worst_sd = std::max(worst_sd, std::abs(mom.beta_hat[i] - mean) / sd);
    worst_truth = std::max(worst_truth, std::abs(mom.beta_hat[i] - t.beta[i]));
  }
  return {worst_sd < kMomHmcSds && worst_truth < kMomTruthAbs,
          "max |MoM - HMC mean| " + fmt(worst_sd, 3) + " posterior SD, max |MoM - truth| " + fmt(worst_truth, 3) +
              ", HMC max R-hat " + fmt(res.diagnostics.max_r_hat())};
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "cytomix_acceptance_determinism";
  fs::remove_all(dir);
  RunConfig sim = RunConfig::parse(R"({"seed": 31, "simulate": {"kind": "plmm",
    "markers": ["a", "b"], "beta": [[1.0, 2.0], [1.3, 2.0]],
    "sigma_cond1": [0.4, 0.4], "sigma_cond2": [0.4, 0.4], "sigma_donor": [0.2, 0.2],
    "omega_cond1": [[1, 0], [0, 1]], "omega_cond2": [[1, 0.3], [0.3, 1]], "omega_donor": [[1, 0], [0, 1]],
    "donors": 4, "cells_per_condition": 40}})");
  sim.output_dir = dir / "sim";
  std::ostringstream log;
  cmd_simulate(sim, log);
  bool same = true;
  std::string detail;
  for (const std::string model : {"plmm", "llmm"}) {
    std::vector<std::string> bytes;
    for (const char* run : {"r1", "r2"}) {
      RunConfig c;
      c.input = dir / "sim" / "cells.csv";
      c.output_dir = dir / (model + run);
      c.model = model;
      c.seed = 17;
      c.sampler.chains = 3;
      c.sampler.iterations = 150;
      c.sampler.warmup = 75;
      c.sampler.threads = 2;
      cmd_fit(c, log);
      bytes.push_back(read_bytes(c.output_dir / "draws.csv"));
    }
    same = same && !bytes[0].empty() && bytes[0] == bytes[1];
    detail += model + (bytes[0] == bytes[1] ? " identical (" : " differ (") + sha256_hex(bytes[0]).substr(0, 12) + ") ";
  }
  fs::remove_all(dir);
  return {same, detail};
}

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {"gradient-correctness", gradients},   {"prior-correctness", priors},
      {"sampler-correctness", sampler},       {"plmm-posterior-recovery", plmm_recovery},
      {"ppc-calibration", ppc_calibration},   {"collider-phenomenon", collider},
      {"mom-vs-hmc-agreement", mom_vs_hmc},   {"determinism", determinism},
  };
  const std::set<std::string> only(argv + 1, argv + argc);
  bool all_pass = true;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.name)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << " (" << fmt(secs, 3) << " s): " << o.detail << std::endl;
  }
  if (only.empty() || only.count("pregnancy-replication")) {
    std::cout << "NOT RUN pregnancy-replication: optional; needs the public NK cell data set, which is not "
                 "bundled"
              << std::endl;
  }
  return all_pass ? 0 : 1;
}
