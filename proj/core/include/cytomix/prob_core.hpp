#pragma once

#include <cstdint>

#include <Eigen/Core>

#include "cytomix/random.hpp"

namespace cytomix {

/// Lower-triangular Cholesky factor of a correlation matrix: unit-norm rows
/// and a positive diagonal, so L * L^T has a unit diagonal.
class CorrelationCholesky {
 public:
  /// Validates `L`; throws DomainError when it is not a correlation factor.
  explicit CorrelationCholesky(Eigen::MatrixXd L, double tol = 1e-8);

  static CorrelationCholesky identity(Eigen::Index dim);
  /// Cholesky factor of a correlation matrix; throws DomainError if `omega`
  /// is not symmetric positive definite with unit diagonal.
  static CorrelationCholesky from_correlation(const Eigen::MatrixXd& omega);

  Eigen::Index dim() const { return L_.rows(); }
  const Eigen::MatrixXd& matrix() const { return L_; }
  Eigen::MatrixXd correlation() const { return L_ * L_.transpose(); }

 private:
  Eigen::MatrixXd L_;
};

/// Strictly positive standard deviations.
class ScaleVector {
 public:
  explicit ScaleVector(Eigen::VectorXd sigma);
  static ScaleVector ones(Eigen::Index dim) { return ScaleVector(Eigen::VectorXd::Ones(dim)); }

  Eigen::Index size() const { return sigma_.size(); }
  const Eigen::VectorXd& values() const { return sigma_; }

 private:
  Eigen::VectorXd sigma_;
};

namespace prob {

inline constexpr double kLogTwoPi = 1.8378770664093454836;

/// log(1 + exp(x)) without overflow.
double log1p_exp(double x);
/// 1 / (1 + exp(-x)).
double inv_logit(double x);

/// k * log_mu - exp(log_mu) - log(k!). Throws DomainError for k < 0.
double poisson_log_pmf(std::int64_t k, double log_mu);

/// y * eta - log(1 + exp(eta)). Throws DomainError unless y is 0 or 1.
double bernoulli_logit_log_pmf(int y, double eta);

/// Normal(0, sd^2) log density; -inf when sd <= 0.
double normal_prior_log_density(double x, double sd);

/// Half-Cauchy(0, scale) log density; throws DomainError for s <= 0.
double half_cauchy_log_density(double s, double scale);
/// d/ds of half_cauchy_log_density.
double half_cauchy_log_density_ds(double s, double scale);

/// Unnormalized LKJ(eta) log density expressed on the Cholesky factor. It
/// includes the L -> L L^T Jacobian, so sampling L with it targets LKJ on
/// the correlation matrix.
double lkj_corr_cholesky_log_density(const CorrelationCholesky& L, double eta);
/// Same on a raw factor; adds d/dL (only the diagonal is nonzero) to `dL`.
double lkj_corr_cholesky_log_density(const Eigen::MatrixXd& L, double eta, Eigen::MatrixXd* dL);

/// log N(x | 0, diag(sigma) L L^T diag(sigma)) via one triangular solve.
double mvn_log_density_chol(const Eigen::VectorXd& x, const ScaleVector& sigma,
                            const CorrelationCholesky& L);

struct MvnGradient {
  double value = 0.0;
  Eigen::VectorXd d_x;
  Eigen::VectorXd d_sigma;
  /// Lower triangle only.
  Eigen::MatrixXd d_L;
};

/// Value and gradient of the zero-mean MVN log density on raw inputs.
MvnGradient mvn_log_density_chol_grad(const Eigen::VectorXd& x, const Eigen::VectorXd& sigma,
                                      const Eigen::MatrixXd& L);

// Samplers. All take the generator explicitly.

double sample_half_cauchy(double scale, Rng& rng);
/// LKJ(eta) draw via independent Beta-distributed canonical partial correlations.
CorrelationCholesky sample_lkj_corr_cholesky(Eigen::Index dim, double eta, Rng& rng);

}  // namespace prob
}  // namespace cytomix
