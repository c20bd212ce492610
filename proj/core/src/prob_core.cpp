#include "cytomix/prob_core.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include <Eigen/Cholesky>

#include "cytomix/errors.hpp"

namespace cytomix {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

CorrelationCholesky::CorrelationCholesky(Eigen::MatrixXd L, double tol) : L_{std::move(L)} {
  if (L_.rows() != L_.cols() || L_.rows() == 0) {
    throw DomainError("correlation Cholesky factor must be square and non-empty");
  }
  if (!L_.allFinite()) throw DomainError("correlation Cholesky factor has non-finite entries");
  for (Eigen::Index i = 0; i < L_.rows(); ++i) {
    if (!(L_(i, i) > 0.0)) throw DomainError("correlation Cholesky factor needs a positive diagonal");
    for (Eigen::Index j = i + 1; j < L_.cols(); ++j) {
      if (std::abs(L_(i, j)) > tol) throw DomainError("correlation Cholesky factor must be lower triangular");
      L_(i, j) = 0.0;
    }
    if (std::abs(L_.row(i).squaredNorm() - 1.0) > tol) {
      throw DomainError("correlation Cholesky factor rows must have unit norm");
    }
  }
}

CorrelationCholesky CorrelationCholesky::identity(Eigen::Index dim) {
  return CorrelationCholesky(Eigen::MatrixXd::Identity(dim, dim));
}

CorrelationCholesky CorrelationCholesky::from_correlation(const Eigen::MatrixXd& omega) {
  if (omega.rows() != omega.cols()) throw DomainError("correlation matrix must be square");
  if (!omega.isApprox(omega.transpose(), 1e-10)) throw DomainError("correlation matrix must be symmetric");
  for (Eigen::Index i = 0; i < omega.rows(); ++i) {
    if (std::abs(omega(i, i) - 1.0) > 1e-10) throw DomainError("correlation matrix needs a unit diagonal");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success) throw DomainError("correlation matrix is not positive definite");
  Eigen::MatrixXd L = llt.matrixL();
  // Renormalize rows against rounding.
  for (Eigen::Index i = 0; i < L.rows(); ++i) L.row(i) /= L.row(i).norm();
  return CorrelationCholesky(std::move(L));
}

ScaleVector::ScaleVector(Eigen::VectorXd sigma) : sigma_{std::move(sigma)} {
  for (Eigen::Index j = 0; j < sigma_.size(); ++j) {
    if (!(sigma_[j] > 0.0) || !std::isfinite(sigma_[j])) {
      throw DomainError("scale entries must be positive and finite");
    }
  }
}

namespace prob {

double log1p_exp(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double inv_logit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double poisson_log_pmf(std::int64_t k, double log_mu) {
  if (k < 0) throw DomainError("Poisson count must be non-negative");
  if (std::isnan(log_mu)) return std::numeric_limits<double>::quiet_NaN();
  if (log_mu == -kInf) return k == 0 ? 0.0 : -kInf;
  const double kd = static_cast<double>(k);
  return kd * log_mu - std::exp(log_mu) - std::lgamma(kd + 1.0);
}

double bernoulli_logit_log_pmf(int y, double eta) {
  if (y != 0 && y != 1) throw DomainError("Bernoulli outcome must be 0 or 1");
  // log pi = -log1p_exp(-eta); log(1 - pi) = -log1p_exp(eta).
  return y == 1 ? -log1p_exp(-eta) : -log1p_exp(eta);
}

double normal_prior_log_density(double x, double sd) {
  if (!(sd > 0.0)) return -kInf;
  const double z = x / sd;
  return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * z * z;
}

double half_cauchy_log_density(double s, double scale) {
  if (!(s > 0.0)) throw DomainError("half-Cauchy argument must be positive");
  if (!(scale > 0.0)) throw DomainError("half-Cauchy scale must be positive");
  const double r = s / scale;
  return std::log(2.0) - std::log(std::numbers::pi * scale) - std::log1p(r * r);
}

double half_cauchy_log_density_ds(double s, double scale) {
  return -2.0 * s / (scale * scale + s * s);
}

double lkj_corr_cholesky_log_density(const Eigen::MatrixXd& L, double eta, Eigen::MatrixXd* dL) {
  const Eigen::Index K = L.rows();
  double lp = 0.0;
  // Row i contributes (K - i - 1 + 2 eta - 2) log L_ii.
  for (Eigen::Index i = 1; i < K; ++i) {
    const double coef = static_cast<double>(K - i - 1) + 2.0 * eta - 2.0;
    const double d = L(i, i);
    if (!(d > 0.0)) return -kInf;
    lp += coef * std::log(d);
    if (dL) (*dL)(i, i) += coef / d;
  }
  return lp;
}

double lkj_corr_cholesky_log_density(const CorrelationCholesky& L, double eta) {
  if (!(eta > 0.0)) throw DomainError("LKJ shape must be positive");
  return lkj_corr_cholesky_log_density(L.matrix(), eta, nullptr);
}

double mvn_log_density_chol(const Eigen::VectorXd& x, const ScaleVector& sigma,
                            const CorrelationCholesky& L) {
  if (x.size() != sigma.size() || x.size() != L.dim()) {
    throw DimensionError("mvn_log_density_chol: dimension mismatch");
  }
  const Eigen::VectorXd scaled = x.cwiseQuotient(sigma.values());
  const Eigen::VectorXd w = L.matrix().triangularView<Eigen::Lower>().solve(scaled);
  const double n = static_cast<double>(x.size());
  return -0.5 * n * kLogTwoPi - sigma.values().array().log().sum() -
         L.matrix().diagonal().array().log().sum() - 0.5 * w.squaredNorm();
}

MvnGradient mvn_log_density_chol_grad(const Eigen::VectorXd& x, const Eigen::VectorXd& sigma,
                                      const Eigen::MatrixXd& L) {
  if (x.size() != sigma.size() || x.size() != L.rows() || L.rows() != L.cols()) {
    throw DimensionError("mvn_log_density_chol_grad: dimension mismatch");
  }
  const Eigen::Index J = x.size();
  MvnGradient g;
  const Eigen::VectorXd scaled = x.cwiseQuotient(sigma);
  const auto tri = L.triangularView<Eigen::Lower>();
  const Eigen::VectorXd w = tri.solve(scaled);
  const Eigen::VectorXd v = tri.transpose().solve(w);
  g.value = -0.5 * static_cast<double>(J) * kLogTwoPi - sigma.array().log().sum() -
            L.diagonal().array().log().sum() - 0.5 * w.squaredNorm();
  g.d_x = -v.cwiseQuotient(sigma);
  g.d_sigma = (v.cwiseProduct(scaled) - Eigen::VectorXd::Ones(J)).cwiseQuotient(sigma);
  g.d_L = (v * w.transpose()).triangularView<Eigen::Lower>();
  g.d_L.diagonal() -= L.diagonal().cwiseInverse();
  return g;
}

double sample_half_cauchy(double scale, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return std::abs(scale * std::tan(std::numbers::pi * (u(rng) - 0.5)));
}

CorrelationCholesky sample_lkj_corr_cholesky(Eigen::Index dim, double eta, Rng& rng) {
  if (!(eta > 0.0)) throw DomainError("LKJ shape must be positive");
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(dim, dim);
  L(0, 0) = 1.0;
  // The partial correlation at (row i, column j) is Beta(a_j, a_j) on (-1, 1)
  // with a_j = eta + (dim - 2 - j) / 2.
  Eigen::VectorXd remaining = Eigen::VectorXd::Ones(dim);
  for (Eigen::Index j = 0; j < dim - 1; ++j) {
    const double a = eta + 0.5 * static_cast<double>(dim - 2 - j);
    std::gamma_distribution<double> gamma(a, 1.0);
    for (Eigen::Index i = j + 1; i < dim; ++i) {
      const double g1 = gamma(rng);
      const double g2 = gamma(rng);
      const double cpc = 2.0 * g1 / (g1 + g2) - 1.0;
      L(i, j) = cpc * std::sqrt(remaining[i]);
      remaining[i] *= 1.0 - cpc * cpc;
    }
  }
  for (Eigen::Index i = 1; i < dim; ++i) L(i, i) = std::sqrt(remaining[i]);
  for (Eigen::Index i = 0; i < dim; ++i) L.row(i) /= L.row(i).norm();
  return CorrelationCholesky(std::move(L));
}

}  // namespace prob
}  // namespace cytomix
