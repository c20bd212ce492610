#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cytomix/data_model.hpp"
#include "cytomix/draws.hpp"
#include "cytomix/sampler.hpp"
#include "cytomix/transforms.hpp"

namespace cytomix {

/// Count data in the shape the Poisson log-normal mixed model consumes.
struct PlmmData {
  /// J x N: column i holds the counts of cell i.
  Eigen::MatrixXd counts;
  std::vector<int> condition;
  std::vector<int> donor;
  std::vector<std::string> markers;
  std::vector<std::string> donors;
  std::array<std::string, 2> condition_levels;
  /// sum over cells and markers of log(y!).
  double log_factorial_sum = 0.0;

  Eigen::Index n_cells() const { return counts.cols(); }
  Eigen::Index n_markers() const { return counts.rows(); }
  Eigen::Index n_donors() const { return static_cast<Eigen::Index>(donors.size()); }

  /// Uses `markers` (all functional markers when empty) in the given order.
  static PlmmData from_table(const CellTable& table, const std::vector<std::string>& markers = {});
};

struct PlmmPriors {
  double beta_sd = 7.0;
  double sigma_scale = 2.5;
  double lkj_eta = 1.0;
};

/// non_centered: cell and donor effects are scaled standard-normal latents.
/// centered: both are sampled directly.
/// donor_contrasts: cell effects non-centered; donor effects rotated onto an
/// orthonormal basis whose mean component is non-centered and whose D-1
/// contrasts are sampled directly, with the intercepts sampled as
/// beta + mean(u). Same posterior; the data pin the contrasts and the
/// intercepts, so this avoids the beta/u ridge and the donor-scale funnel
/// when donors contribute many cells.
enum class Parameterization { non_centered, centered, donor_contrasts };

/// Constrained PLMM parameters. `z_cell` holds standard-normal latents
/// (the effects b themselves when centered). `z_donor` holds
/// standard-normal latents in the non-centered form and the effects u
/// otherwise.
struct PlmmParams {
  Eigen::MatrixXd beta;     // 2 x J
  Eigen::MatrixXd z_cell;   // N x J
  Eigen::MatrixXd z_donor;  // D x J
  Eigen::VectorXd sigma_cond1, sigma_cond2, sigma_donor;
  Eigen::MatrixXd L_cond1, L_cond2, L_donor;
};

/// y_ij ~ Poisson(mu_ij), log mu_ij = beta_{c(i)j} + b_ij + u_{d(i)j}, with
/// b_i ~ N(0, diag(s_c) Omega_c diag(s_c)) per condition and
/// u_d ~ N(0, diag(s_donor) Omega_donor diag(s_donor)).
///
/// Unconstrained layout: beta (2J), cell latents (NJ), donor latents (DJ),
/// three log-scale vectors (3J), three correlation blocks (3 J(J-1)/2).
class PlmmModel : public Model {
 public:
  explicit PlmmModel(std::shared_ptr<const PlmmData> data, PlmmPriors priors = {},
                     Parameterization parameterization = Parameterization::donor_contrasts);

  Eigen::Index dimension() const override { return map_.dimension(); }
  double log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const override;
  std::vector<std::string> output_names() const override;
  Eigen::VectorXd output_values(const Eigen::VectorXd& q) const override;
  std::string nonfinite_term(const Eigen::VectorXd& q) const override;

  /// Poisson log likelihood alone.
  double log_likelihood(const Eigen::VectorXd& q) const;

  Eigen::VectorXd to_unconstrained(const PlmmParams& params) const;
  PlmmParams from_unconstrained(const Eigen::VectorXd& q) const;

  const UnconstrainedMap& map() const { return map_; }
  const PlmmData& data() const { return *data_; }
  Parameterization parameterization() const { return parameterization_; }

 private:
  struct Terms {
    double likelihood = 0.0;
    double cell_effects = 0.0;
    double donor_effects = 0.0;
    double beta_prior = 0.0;
    double sigma_prior = 0.0;
    double lkj_prior = 0.0;
    double jacobian = 0.0;
    double total() const {
      return likelihood + cell_effects + donor_effects + beta_prior + sigma_prior + lkj_prior +
             jacobian;
    }
  };
  Terms evaluate(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const;
  Eigen::MatrixXd donor_mean(const ConstrainedValues& v) const;     // J x 1
  Eigen::MatrixXd fixed_effects(const ConstrainedValues& v) const;  // J x 2
  Eigen::MatrixXd donor_effects(const ConstrainedValues& v) const;  // J x D

  std::shared_ptr<const PlmmData> data_;
  PlmmPriors priors_;
  Parameterization parameterization_;
  Eigen::MatrixXd helmert_;
  UnconstrainedMap map_;
};

struct PlmmInit {
  std::vector<Eigen::VectorXd> inits;
  std::vector<std::string> warnings;
};

/// Per-chain starting points: beta at the log mean count per condition and
/// marker (log(mean + 0.5) with a warning for all-zero markers), latents at
/// zero, scales at 1 with a small per-chain jitter, identity correlations.
PlmmInit plmm_init(const PlmmModel& model, int chains, std::uint64_t seed);

// Posterior predictive checks

enum class SubsetPredicate { gt_median, le_median, eq_zero, gt_zero };

SubsetPredicate subset_predicate_from_string(const std::string& s);
std::string to_string(SubsetPredicate p);

/// Cells satisfying every (marker, predicate) term. Medians are taken over
/// all cells of the table, both conditions pooled.
struct SubsetSpec {
  std::string name;
  std::vector<std::pair<std::string, SubsetPredicate>> terms;
};

/// The four signaling subsets: A (pSTAT1, pSTAT3, pSTAT5 bright),
/// B (pSTAT1 bright, pSTAT3 and pSTAT5 dim), C (pERK1/2 zero, pMAPKAPK2
/// bright), D (pERK1/2 nonzero, pMAPKAPK2 bright).
std::vector<SubsetSpec> signaling_subsets();

/// Fraction of cells in the subset; `counts` is J x N.
double subset_fraction(const Eigen::MatrixXd& counts, const std::vector<std::string>& markers,
                       const SubsetSpec& spec);

struct PpcResult {
  std::string stat_name;
  double observed = 0.0;
  std::vector<double> replicated;

  /// True when `observed` lies in the central `mass` interval of replicates.
  bool observed_in_central_interval(double mass = 0.95) const;
};

/// Replicates the full count table for `n_rep` evenly spaced draws. Cell
/// effects are redrawn; donor effects come from the draw unless
/// `redraw_donor_effects` is set. Replicate r uses stream r split from
/// `seed`, so results do not depend on `threads`.
std::vector<PpcResult> posterior_predictive(const PosteriorDraws& draws, const PlmmData& data,
                                            const std::vector<SubsetSpec>& specs, int n_rep,
                                            std::uint64_t seed, bool redraw_donor_effects = false,
                                            int threads = 1);

// Posterior summaries

/// Median and 95% interval of beta_cond1, beta_cond2 and beta_diff per marker.
std::vector<QuantileSummary> fixed_effect_summary(const PosteriorDraws& draws,
                                                  const std::vector<std::string>& markers);

/// Scale summaries for sigma_cond1, sigma_cond2 and sigma_donor.
std::vector<QuantileSummary> scale_summary(const PosteriorDraws& draws,
                                           const std::vector<std::string>& markers);

/// Posterior median correlation matrix for "cond1", "cond2" or "donor".
Eigen::MatrixXd correlation_median(const PosteriorDraws& draws,
                                   const std::vector<std::string>& markers,
                                   const std::string& which);

struct CorrIncreaseSummary {
  std::vector<std::string> markers;
  /// Symmetric; the diagonal is NaN.
  Eigen::MatrixXd p_hat;
  /// Histogram of upper-triangle values over equal-width bins on [0, 1].
  std::vector<double> bin_edges;
  std::vector<int> bin_counts;
};

/// p_ij = (1/K) sum_k I(Omega_cond2_ij > Omega_cond1_ij); ties count as 0.
CorrIncreaseSummary corr_increase_probability(const PosteriorDraws& draws,
                                              const std::vector<std::string>& markers,
                                              int bins = 20);

// Parameter names shared by the draws file, summaries and PPC.
std::string beta_name(int condition, const std::string& marker);
std::string sigma_name(const std::string& block, const std::string& marker);
std::string omega_name(const std::string& block, const std::string& a, const std::string& b);
std::string donor_effect_name(const std::string& donor, const std::string& marker);

}  // namespace cytomix
