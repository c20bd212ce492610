#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cytomix/data_model.hpp"
#include "cytomix/draws.hpp"
#include "cytomix/sampler.hpp"
#include "cytomix/transforms.hpp"

namespace cytomix {

inline constexpr const char* kInterceptName = "(Intercept)";

/// Transformed marker predictors with the condition as binary response.
struct LlmmData {
  /// N x J predictors on the transformed-expression scale.
  Eigen::MatrixXd x;
  /// 1 for the non-reference condition.
  std::vector<int> y;
  std::vector<int> donor;
  std::vector<std::string> markers;
  std::vector<std::string> donors;
  std::array<std::string, 2> condition_levels;

  Eigen::Index n_cells() const { return x.rows(); }
  Eigen::Index n_markers() const { return x.cols(); }
  Eigen::Index n_donors() const { return static_cast<Eigen::Index>(donors.size()); }

  /// Coefficient labels: intercept first, then markers.
  std::vector<std::string> coefficient_names() const;

  /// Throws PairingError unless every donor is observed in both conditions
  /// and `require_paired` is false.
  static LlmmData from_table(const TransformedTable& table,
                             const std::vector<std::string>& markers = {},
                             bool require_paired = true);

  /// Copy without the listed predictors. Throws NotFoundError for unknown
  /// markers and ParameterError when nothing would remain.
  LlmmData exclude_markers(const std::vector<std::string>& exclude) const;
};

/// Per-marker centering and scaling. Coefficients fitted on the
/// standardized design map back through beta_raw = T beta_std.
struct Standardization {
  Eigen::VectorXd center;
  Eigen::VectorXd scale;

  /// Pooled mean and sample sd; columns with zero spread keep scale 1.
  static Standardization fit(const Eigen::MatrixXd& x);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
  /// (J+1) x (J+1) matrix taking standardized coefficients to raw ones.
  Eigen::MatrixXd to_raw() const;
};

struct LlmmPriors {
  double beta_sd = 7.0;
  double sigma_scale = 2.5;
  double lkj_eta = 1.0;
};

/// Constrained LLMM parameters on the standardized design.
struct LlmmParams {
  Eigen::VectorXd beta;     // J+1
  Eigen::MatrixXd z_donor;  // D x (J+1), standardized
  Eigen::VectorXd sigma_donor;
  Eigen::MatrixXd L_donor;
};

/// y_i ~ Bernoulli(logit^-1(eta_i)), eta_i = x~_i'(beta + u_d(i)), x~ = (1, x),
/// u_d = diag(sigma) L z_d with z_d standard normal.
///
/// Unconstrained layout: beta (J+1), donor latents (D(J+1)), log scales
/// (J+1), correlation block ((J+1)J/2).
class LlmmModel : public Model {
 public:
  explicit LlmmModel(std::shared_ptr<const LlmmData> data, LlmmPriors priors = {});

  Eigen::Index dimension() const override { return map_.dimension(); }
  double log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const override;
  /// beta[...] on the raw predictor scale; sigma_donor_std[...] and
  /// omega_donor_std[...] on the standardized scale.
  std::vector<std::string> output_names() const override;
  Eigen::VectorXd output_values(const Eigen::VectorXd& q) const override;
  std::string nonfinite_term(const Eigen::VectorXd& q) const override;

  double log_likelihood(const Eigen::VectorXd& q) const;

  Eigen::VectorXd to_unconstrained(const LlmmParams& params) const;
  LlmmParams from_unconstrained(const Eigen::VectorXd& q) const;

  const UnconstrainedMap& map() const { return map_; }
  const LlmmData& data() const { return *data_; }
  const Standardization& standardization() const { return std_; }
  /// (J+1) x N standardized design with a leading row of ones.
  const Eigen::MatrixXd& design() const { return design_; }

 private:
  struct Terms {
    double likelihood = 0.0;
    double donor_effects = 0.0;
    double beta_prior = 0.0;
    double sigma_prior = 0.0;
    double lkj_prior = 0.0;
    double jacobian = 0.0;
    double total() const {
      return likelihood + donor_effects + beta_prior + sigma_prior + lkj_prior + jacobian;
    }
  };
  Terms evaluate(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const;

  std::shared_ptr<const LlmmData> data_;
  LlmmPriors priors_;
  Standardization std_;
  Eigen::MatrixXd design_;
  UnconstrainedMap map_;
};

/// Starting points: zero coefficients and latents, unit scales with a small
/// per-chain jitter, identity correlation.
std::vector<Eigen::VectorXd> llmm_init(const LlmmModel& model, int chains, std::uint64_t seed);

std::string llmm_beta_name(const std::string& coefficient);

/// Median and 95% interval per coefficient (intercept included).
std::vector<QuantileSummary> llmm_fixed_effect_summary(const PosteriorDraws& draws,
                                                       const std::vector<std::string>& coefficients);

// Method of moments

struct MomOptions {
  /// Ridge added to separated per-donor fits.
  double ridge = 1e-4;
  int max_iterations = 100;
  double tolerance = 1e-8;
  int threads = 1;
};

struct MomDonorFit {
  std::string donor;
  /// Raw predictor scale.
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;
  bool ridge = false;
};

struct MomEstimate {
  std::vector<std::string> coefficients;
  /// Raw predictor scale.
  Eigen::VectorXd beta_hat;
  Eigen::MatrixXd cov_hat;
  /// Standard error of beta_hat from the spread of per-donor estimates.
  Eigen::VectorXd beta_se;
  std::vector<MomDonorFit> donor_fits;
  std::vector<std::string> dropped_donors;
  bool psd_projected = false;
  std::vector<std::string> warnings;

  bool ridge_used() const;
  /// "ridge;dropped-donor;psd-projected" subset, empty when clean.
  std::string flags() const;
  /// beta_hat with a normal-approximation 95% interval.
  std::vector<QuantileSummary> summary() const;
};

/// Per-donor logistic MLEs averaged; random-effect covariance from their
/// spread minus the mean sampling covariance, projected to the PSD cone.
MomEstimate llmm_mom_fit(const LlmmData& data, const MomOptions& options = {});

struct LogisticFit {
  Eigen::VectorXd beta;
  /// Inverse of the (ridge-augmented) observed information.
  Eigen::MatrixXd cov;
  bool converged = false;
  int iterations = 0;
};

/// Newton-Raphson logistic regression on a design whose columns are
/// predictors (include the intercept column yourself).
LogisticFit logistic_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double ridge,
                                int max_iterations = 100, double tolerance = 1e-8);

/// Nearest PSD matrix in Frobenius norm (negative eigenvalues clipped).
Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m, bool* changed = nullptr);

}  // namespace cytomix
