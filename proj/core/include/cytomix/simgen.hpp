#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cytomix/data_model.hpp"
#include "cytomix/llmm.hpp"

namespace cytomix {

/// Generative PLMM settings. Scales may be zero (no variation).
struct PlmmTruth {
  std::vector<std::string> markers;
  std::array<std::string, 2> condition_levels{"cond1", "cond2"};
  Eigen::MatrixXd beta;  // 2 x J
  Eigen::VectorXd sigma_cond1, sigma_cond2, sigma_donor;
  /// Correlation matrices.
  Eigen::MatrixXd omega_cond1, omega_cond2, omega_donor;

  /// Throws ParameterError on inconsistent shapes, negative scales or a
  /// correlation matrix that is not positive definite with unit diagonal.
  void validate() const;
};

struct PlmmLayout {
  int donors = 8;
  int cells_per_condition = 200;
};

struct PlmmSimulation {
  CellTable table;
  /// N x J cell effects b and D x J donor effects u actually drawn.
  Eigen::MatrixXd cell_effects;
  Eigen::MatrixXd donor_effects;
};

/// Forward simulation: donor effects first, then per donor and condition
/// the cell effects and Poisson counts. Donors are "D01", "D02", ...; cell
/// type "sim". Throws ParameterError if any log mean exceeds 30.
PlmmSimulation simulate_plmm(const PlmmTruth& truth, const PlmmLayout& layout, std::uint64_t seed);

enum class DagKind { no_confounder, pipe, collider };

std::string to_string(DagKind kind);
DagKind dag_kind_from_string(const std::string& s);

/// Linear-Gaussian instantiation of the three condition/marker DAGs:
///   no_confounder: Y1 = a X + e1,        Y2 = b X + e2
///   pipe:          Y1 = c Y2 + e1,       Y2 = b X + e2
///   collider:      Y1 = a X + c Y2 + e1, Y2 = b X + e2
/// plus a per-donor N(0, donor_scale^2) shift on each variable.
struct DagScenario {
  DagKind kind = DagKind::collider;
  double a = 1.0;
  double b = 0.5;
  double c = 1.0;
  double noise1 = 1.0;
  double noise2 = 1.0;
  int cells_per_donor = 500;
  int donors = 10;
  double donor_scale = 0.0;

  void validate() const;
};

struct DagSimulation {
  /// Y1, Y2 on the transformed scale; condition is X.
  TransformedTable transformed;
  /// Counts from sinh(v) * cofactor, rounded and clipped at zero. Only
  /// approximately consistent with `transformed`.
  std::shared_ptr<const CellTable> counts;
};

/// X ~ Bernoulli(0.5) per cell. A donor left with a single level gets its
/// first cell flipped so every donor is paired.
DagSimulation simulate_dag(const DagScenario& scenario, std::uint64_t seed,
                           double cofactor = kDefaultCofactor);

/// Generative LLMM settings on the raw predictor scale.
struct LlmmTruth {
  std::vector<std::string> markers;
  Eigen::VectorXd beta;         // J+1, intercept first
  Eigen::VectorXd sigma_donor;  // J+1
  Eigen::MatrixXd omega_donor;
  /// Predictors are drawn iid N(x_mean, x_sd^2) per cell and marker.
  double x_mean = 0.0;
  double x_sd = 1.0;

  void validate() const;
};

struct LlmmSimulation {
  LlmmData data;
  Eigen::MatrixXd donor_effects;  // D x (J+1)
};

LlmmSimulation simulate_llmm(const LlmmTruth& truth, int donors, int cells_per_donor,
                             std::uint64_t seed);

/// Everything needed to regenerate a simulated table bit for bit.
struct GroundTruth {
  std::uint64_t seed = 0;
  std::optional<PlmmTruth> plmm;
  PlmmLayout layout;
  std::optional<DagScenario> dag;
  double cofactor = kDefaultCofactor;
};

/// truth.json (schema "cytomix-truth", version 1).
std::string truth_to_json(const GroundTruth& truth);
GroundTruth truth_from_json(const std::string& text);
void write_truth(const GroundTruth& truth, const std::filesystem::path& path);
GroundTruth read_truth(const std::filesystem::path& path);

/// Count table implied by a ground truth record.
CellTable resimulate(const GroundTruth& truth);

}  // namespace cytomix
