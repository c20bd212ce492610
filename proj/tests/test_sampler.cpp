#include <atomic>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "cytomix/diagnostics.hpp"
#include "cytomix/errors.hpp"
#include "cytomix/sampler.hpp"

using namespace cytomix;

namespace {

// Zero-mean Gaussian with the given precision.
class GaussianModel : public Model {
 public:
  explicit GaussianModel(Eigen::MatrixXd precision) : P_(std::move(precision)) {}
  Eigen::Index dimension() const override { return P_.rows(); }
  double log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const override {
    const Eigen::VectorXd Pq = P_ * q;
    if (grad) *grad = -Pq;
    return -0.5 * q.dot(Pq);
  }

 private:
  Eigen::MatrixXd P_;
};

// x ~ N(0, 1), y | x ~ N(b x^2, 1).
class BananaModel : public Model {
 public:
  explicit BananaModel(double b) : b_(b) {}
  Eigen::Index dimension() const override { return 2; }
  double log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const override {
    const double r = q[1] - b_ * q[0] * q[0];
    if (grad) {
      (*grad)[0] = -q[0] + 2.0 * b_ * q[0] * r;
      (*grad)[1] = -r;
    }
    return -0.5 * q[0] * q[0] - 0.5 * r * r;
  }
  double b_;
};

// Fails after a fixed number of density evaluations.
class FailingModel : public Model {
 public:
  FailingModel(const Model& inner, long budget) : inner_(inner), left_(budget) {}
  Eigen::Index dimension() const override { return inner_.dimension(); }
  double log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const override {
    if (--left_ < 0) throw std::runtime_error("simulated crash");
    return inner_.log_density(q, grad);
  }
  std::vector<std::string> output_names() const override { return inner_.output_names(); }

 private:
  const Model& inner_;
  mutable std::atomic<long> left_;
};

class NanModel : public Model {
 public:
  Eigen::Index dimension() const override { return 1; }
  double log_density(const Eigen::VectorXd&, Eigen::VectorXd* grad) const override {
    if (grad) grad->setZero(1);
    return std::numeric_limits<double>::quiet_NaN();
  }
  std::string nonfinite_term(const Eigen::VectorXd&) const override { return "test term"; }
};

GradientFn gaussian_fn(const Eigen::MatrixXd& P) {
  return [P](const Eigen::VectorXd& q, Eigen::VectorXd& g) {
    g = -P * q;
    return -0.5 * q.dot(P * q);
  };
}

Eigen::MatrixXd correlated_precision(double rho) {
  Eigen::MatrixXd S(2, 2);
  S << 1.0, rho, rho, 1.0;
  return S.inverse();
}

std::vector<double> column(const PosteriorDraws& d, Eigen::Index p) {
  return {d.values.col(p).data(), d.values.col(p).data() + d.num_draws()};
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST(Leapfrog, FreeParticle) {
  const GradientFn zero = [](const Eigen::VectorXd&, Eigen::VectorXd& g) {
    g.setZero(2);
    return 0.0;
  };
  const Eigen::Vector2d q(1.0, -2.0), p(0.5, 3.0);
  const auto r = leapfrog(q, p, 0.1, 1, zero);
  EXPECT_TRUE(r.q.isApprox(q + 0.1 * p));
  EXPECT_TRUE(r.p.isApprox(p));
  EXPECT_FALSE(r.divergent);
}

TEST(Leapfrog, EnergyErrorIsSecondOrder) {
  const auto fn = gaussian_fn(Eigen::MatrixXd::Identity(1, 1));
  const Eigen::VectorXd q = Eigen::VectorXd::Constant(1, 1.0), p = Eigen::VectorXd::Constant(1, 0.7);
  auto energy_error = [&](double eps) {
    const int steps = static_cast<int>(std::lround(1.0 / eps));
    const auto r = leapfrog(q, p, eps, steps, fn);
    const double h0 = 0.5 * q.squaredNorm() + 0.5 * p.squaredNorm();
    const double h1 = -r.log_density + 0.5 * r.p.squaredNorm();
    return std::abs(h1 - h0);
  };
  const double e1 = energy_error(0.2), e2 = energy_error(0.1), e3 = energy_error(0.05);
  EXPECT_NEAR(e1 / e2, 4.0, 0.6);
  EXPECT_NEAR(e2 / e3, 4.0, 0.6);
}

TEST(Leapfrog, ReversibleOnRandomQuadratic) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd A(5, 5);
  for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = n(rng);
  const Eigen::MatrixXd P = A * A.transpose() + Eigen::MatrixXd::Identity(5, 5);
  Eigen::VectorXd q(5), p(5), m(5);
  for (Eigen::Index i = 0; i < 5; ++i) {
    q[i] = n(rng);
    p[i] = n(rng);
    m[i] = 0.5 + std::abs(n(rng));
  }
  const auto fwd = leapfrog(q, p, 0.05, 20, gaussian_fn(P), m);
  const auto back = leapfrog(fwd.q, -fwd.p, 0.05, 20, gaussian_fn(P), m);
  EXPECT_LT((back.q - q).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((back.p + p).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Leapfrog, PreservesVolume) {
  // Jacobian of one step on a non-quadratic target.
  const BananaModel banana(0.8);
  const GradientFn fn = [&](const Eigen::VectorXd& q, Eigen::VectorXd& g) {
    g.resize(2);
    return banana.log_density(q, &g);
  };
  const Eigen::Vector4d z0(0.3, -0.4, 0.9, 0.2);
  auto step = [&](const Eigen::Vector4d& z) {
    const auto r = leapfrog(z.head(2), z.tail(2), 0.2, 1, fn);
    Eigen::Vector4d out;
    out << r.q, r.p;
    return out;
  };
  Eigen::Matrix4d jac;
  for (int k = 0; k < 4; ++k) {
    Eigen::Vector4d a = z0, b = z0;
    a[k] += 1e-6;
    b[k] -= 1e-6;
    jac.col(k) = (step(a) - step(b)) / 2e-6;
  }
  EXPECT_NEAR(jac.determinant(), 1.0, 1e-8);
}

TEST(Leapfrog, NonFiniteGradientIsDivergent) {
  const GradientFn bad = [](const Eigen::VectorXd& q, Eigen::VectorXd& g) {
    g = Eigen::VectorXd::Constant(q.size(), q[0] > 0.5 ? NAN : -q[0]);
    return -0.5 * q.squaredNorm();
  };
  const auto r = leapfrog(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1), 0.3, 10, bad);
  EXPECT_TRUE(r.divergent);
}

TEST(DualAveraging, DirectionOfTravel) {
  StepSizeAdapter all_accept(0.8);
  all_accept.restart(0.1);
  double prev = all_accept.learn(1.0);
  for (int t = 0; t < 10; ++t) {
    const double eps = all_accept.learn(1.0);
    EXPECT_GT(eps, prev);
    prev = eps;
  }
  StepSizeAdapter all_reject(0.8);
  all_reject.restart(0.1);
  prev = all_reject.learn(0.0);
  for (int t = 0; t < 10; ++t) {
    const double eps = all_reject.learn(0.0);
    EXPECT_LT(eps, prev);
    prev = eps;
  }
}

TEST(DualAveraging, ConvergesOnStationaryStream) {
  // Acceptance tracks a smooth function of eps with 0.8 at eps = 0.5.
  StepSizeAdapter a(0.8);
  a.restart(0.05);
  double eps = 0.05, last_bar = 0.0, change = 1.0;
  for (int t = 0; t < 2000; ++t) {
    const double accept = std::exp(-std::pow(eps / 0.5, 2) * -std::log(0.8));
    eps = a.learn(accept);
    const double bar = a.final_step_size();
    if (t > 0) change = std::abs(bar - last_bar) / last_bar;
    last_bar = bar;
  }
  EXPECT_LT(change, 0.01);
  EXPECT_NEAR(a.final_step_size(), 0.5, 0.05);

  const std::vector<double> history(500, 0.8);
  const double e1 = adapt_step_size(std::span<const double>(history.data(), 499), 0.3, 0.8);
  const double e2 = adapt_step_size(history, 0.3, 0.8);
  EXPECT_LT(std::abs(e2 - e1) / e1, 0.01);
}

TEST(Hmc, StandardGaussianMoments) {
  const GaussianModel model(Eigen::MatrixXd::Identity(2, 2));
  SamplerConfig c;
  c.chains = 1;
  c.warmup = 500;
  c.iterations = 50500;
  c.seed = 9;
  const auto res = run_chains(model, c, {Eigen::VectorXd::Zero(2)});
  for (Eigen::Index p = 0; p < 2; ++p) {
    const auto x = column(res.draws, p);
    const double se = mcse_mean({res.draws.values.col(p)});
    EXPECT_LT(std::abs(mean_of(x)), 3 * se);
    double v = 0.0;
    for (double xi : x) v += xi * xi;
    EXPECT_NEAR(v / static_cast<double>(x.size()), 1.0, 0.05);
  }
  const double cov = (res.draws.values.col(0).array() * res.draws.values.col(1).array()).mean();
  EXPECT_NEAR(cov, 0.0, 0.05);
}

TEST(Hmc, AdaptedAcceptanceNearTarget) {
  // Equicorrelated 10-d Gaussian with scales from 0.5 to 5.
  const int d = 10;
  Eigen::MatrixXd S = Eigen::MatrixXd::Constant(d, d, 0.5);
  S.diagonal().setOnes();
  const Eigen::VectorXd scale = Eigen::VectorXd::LinSpaced(d, 0.5, 5.0);
  S = scale.asDiagonal() * S * scale.asDiagonal();
  const GaussianModel model(S.inverse());
  SamplerConfig c;
  c.chains = 4;
  c.warmup = 500;
  c.iterations = 2500;
  c.target_accept = 0.8;
  const auto res = run_chains(model, c, {Eigen::VectorXd::Zero(d)});
  for (double a : res.diagnostics.accept_rate) {
    EXPECT_GE(a, 0.7) << a;
    EXPECT_LE(a, 0.9) << a;
  }
}

TEST(Hmc, BananaMatchesRandomWalkMetropolis) {
  const BananaModel model(0.5);
  // Independent oracle: long random-walk Metropolis run.
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(2);
  double lp = model.log_density(x, nullptr);
  const int n_rwm = 2'000'000;
  Eigen::Vector3d rwm_sum = Eigen::Vector3d::Zero();
  for (int t = 0; t < n_rwm; ++t) {
    Eigen::VectorXd prop = x;
    prop[0] += 0.9 * n(rng);
    prop[1] += 0.9 * n(rng);
    const double lp_prop = model.log_density(prop, nullptr);
    if (std::log(u(rng)) < lp_prop - lp) {
      x = prop;
      lp = lp_prop;
    }
    rwm_sum += Eigen::Vector3d(x[0], x[1], x[0] * x[0]);
  }
  const Eigen::Vector3d rwm = rwm_sum / n_rwm;

  SamplerConfig c;
  c.chains = 4;
  c.warmup = 500;
  c.iterations = 10500;
  const auto res = run_chains(model, c, {Eigen::VectorXd::Zero(2)});
  const Eigen::VectorXd xs = res.draws.values.col(0), ys = res.draws.values.col(1);
  const Eigen::VectorXd x2 = xs.array().square();
  const std::vector<Eigen::VectorXd> cx = res.draws.by_chain(0), cy = res.draws.by_chain(1);
  std::vector<Eigen::VectorXd> cx2;
  for (const auto& v : cx) cx2.push_back(v.array().square());
  // RWM error is small next to HMC's at these run lengths; allow 4 HMC SEs.
  EXPECT_NEAR(xs.mean(), rwm[0], 4 * mcse_mean(cx) + 0.01);
  EXPECT_NEAR(ys.mean(), rwm[1], 4 * mcse_mean(cy) + 0.01);
  EXPECT_NEAR(x2.mean(), rwm[2], 4 * mcse_mean(cx2) + 0.01);
}

TEST(RunChains, DrawCounts) {
  const GaussianModel model(Eigen::MatrixXd::Identity(1, 1));
  SamplerConfig c;  // 8 chains, 325 iterations, 200 warmup
  auto res = run_chains(model, c, {Eigen::VectorXd::Zero(1)});
  EXPECT_EQ(res.draws.num_draws(), 1000);
  EXPECT_EQ(res.draws.num_chains(), 8);
  EXPECT_EQ(res.draws.iteration.front(), 201);

  c.chains = 1;
  c.iterations = 2;
  c.warmup = 1;
  res = run_chains(model, c, {Eigen::VectorXd::Zero(1)});
  EXPECT_EQ(res.draws.num_draws(), 1);
  EXPECT_TRUE(std::isnan(res.diagnostics.r_hat[0]));
}

TEST(RunChains, IdenticalAcrossThreadCounts) {
  const GaussianModel model(correlated_precision(0.5));
  SamplerConfig c;
  c.iterations = 150;
  c.warmup = 100;
  c.seed = 31;
  c.threads = 1;
  const auto a = run_chains(model, c, {Eigen::VectorXd::Zero(2)});
  c.threads = 8;
  const auto b = run_chains(model, c, {Eigen::VectorXd::Zero(2)});
  EXPECT_TRUE(a.draws.values == b.draws.values);
}

TEST(RunChains, ChainStreamsIndependentOfChainCount) {
  const GaussianModel model(Eigen::MatrixXd::Identity(2, 2));
  SamplerConfig c;
  c.iterations = 60;
  c.warmup = 30;
  c.chains = 2;
  const auto a = run_chains(model, c, {Eigen::VectorXd::Zero(2)});
  c.chains = 5;
  const auto b = run_chains(model, c, {Eigen::VectorXd::Zero(2)});
  EXPECT_TRUE(a.draws.values == b.draws.values.topRows(a.draws.num_draws()));
}

TEST(RunChains, AllInitsNonFiniteNamesTerm) {
  const NanModel model;
  SamplerConfig c;
  try {
    run_chains(model, c, {Eigen::VectorXd::Zero(1)});
    FAIL();
  } catch (const InitializationError& e) {
    EXPECT_NE(std::string(e.what()).find("test term"), std::string::npos);
  }
}

TEST(RunChains, InvalidConfigRejected) {
  const GaussianModel model(Eigen::MatrixXd::Identity(1, 1));
  SamplerConfig c;
  c.warmup = c.iterations;
  EXPECT_THROW(run_chains(model, c, {Eigen::VectorXd::Zero(1)}), ConfigError);
  c = {};
  c.chains = 0;
  EXPECT_THROW(run_chains(model, c, {Eigen::VectorXd::Zero(1)}), ConfigError);
}

TEST(Checkpoint, ChainSaveLoadContinuesIdentically) {
  const GaussianModel model(correlated_precision(0.3));
  SamplerConfig c;
  c.iterations = 120;
  c.warmup = 60;
  Chain full(model, c, 0, Eigen::VectorXd::Zero(2));
  while (!full.done()) full.iterate();

  Chain first(model, c, 0, Eigen::VectorXd::Zero(2));
  for (int t = 0; t < 45; ++t) first.iterate();  // stop inside warmup
  std::stringstream state;
  first.save(state);
  Chain resumed(model, c, 0, Eigen::VectorXd::Zero(2));
  resumed.load(state);
  while (!resumed.done()) resumed.iterate();
  ASSERT_EQ(resumed.outputs().size(), full.outputs().size());
  for (std::size_t k = 0; k < full.outputs().size(); ++k) {
    EXPECT_TRUE(resumed.outputs()[k] == full.outputs()[k]);
  }
}

TEST(Checkpoint, ResumeAfterCrashIsBitIdentical) {
  const GaussianModel model(correlated_precision(0.6));
  SamplerConfig c;
  c.chains = 3;
  c.iterations = 200;
  c.warmup = 100;
  const auto reference = run_chains(model, c, {Eigen::VectorXd::Zero(2)});

  const auto dir = std::filesystem::temp_directory_path() / "cytomix_ckpt_test";
  std::filesystem::remove_all(dir);
  const FailingModel crashing(model, 1000);
  EXPECT_THROW(run_chains(crashing, c, {Eigen::VectorXd::Zero(2)}, CheckpointOptions{dir, 7, false}),
               std::runtime_error);
  ASSERT_TRUE(std::filesystem::exists(dir / "chain_0.ckpt"));
  const auto resumed = run_chains(model, c, {Eigen::VectorXd::Zero(2)}, CheckpointOptions{dir, 7, true});
  EXPECT_TRUE(resumed.draws.values == reference.draws.values);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MismatchedConfigRejected) {
  const GaussianModel model(Eigen::MatrixXd::Identity(1, 1));
  SamplerConfig c;
  c.iterations = 50;
  c.warmup = 20;
  Chain a(model, c, 0, Eigen::VectorXd::Zero(1));
  std::stringstream state;
  a.save(state);
  c.seed = 2;
  Chain b(model, c, 0, Eigen::VectorXd::Zero(1));
  EXPECT_THROW(b.load(state), ConfigError);
}

TEST(Divergences, CountedNotDropped) {
  // A cliff: density is -inf for x > 3, so long trajectories diverge.
  class Cliff : public Model {
   public:
    Eigen::Index dimension() const override { return 1; }
    double log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const override {
      if (grad) grad->setConstant(1, -q[0]);
      return q[0] > 1.0 ? -std::numeric_limits<double>::infinity() : -0.5 * q[0] * q[0];
    }
  } model;
  SamplerConfig c;
  c.chains = 2;
  c.iterations = 400;
  c.warmup = 100;
  const auto res = run_chains(model, c, {Eigen::VectorXd::Zero(1)});
  EXPECT_GT(res.diagnostics.total_divergences(), 0);
  EXPECT_EQ(res.draws.num_draws(), 600);
  EXPECT_LE(res.draws.values.maxCoeff(), 1.0);
}
