#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cytomix/prob_core.hpp"

namespace cytomix {

/// Number of free coordinates of a dim x dim correlation Cholesky factor.
constexpr Eigen::Index corr_free_size(Eigen::Index dim) { return dim * (dim - 1) / 2; }

/// Correlation Cholesky factor from unconstrained reals.
///
/// Each free coordinate is mapped through tanh to a canonical partial
/// correlation (row-major over the strict lower triangle). When
/// `log_jacobian` is non-null the log absolute Jacobian determinant of the
/// map is added to it.
Eigen::MatrixXd corr_cholesky_constrain(std::span<const double> free, Eigen::Index dim,
                                        double* log_jacobian = nullptr);

/// Inverse of corr_cholesky_constrain.
Eigen::VectorXd corr_cholesky_unconstrain(const Eigen::MatrixXd& L);

/// Chain rule through corr_cholesky_constrain: given dF/dL (lower triangle)
/// adds dF/dfree to `d_free`, plus the gradient of the log Jacobian when
/// `with_jacobian` is set.
void corr_cholesky_backprop(std::span<const double> free, const Eigen::MatrixXd& L,
                            const Eigen::MatrixXd& d_L, bool with_jacobian,
                            std::span<double> d_free);

enum class BlockKind { real, positive, corr_cholesky };

struct ParameterBlock {
  std::string name;
  BlockKind kind = BlockKind::real;
  /// Constrained shape. Real and positive blocks are stored column-major;
  /// positive blocks are column vectors; correlation blocks are dim x dim.
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;
  Eigen::Index free_size = 0;
};

/// Constrained values, one matrix per block, in layout order.
using ConstrainedValues = std::vector<Eigen::MatrixXd>;

/// Bijection between a model's constrained parameters and a flat real vector.
///
/// Positive blocks use log; correlation Cholesky blocks use tanh-mapped
/// canonical partial correlations.
class UnconstrainedMap {
 public:
  std::size_t add_real(std::string name, Eigen::Index rows, Eigen::Index cols = 1);
  std::size_t add_positive(std::string name, Eigen::Index size);
  std::size_t add_corr_cholesky(std::string name, Eigen::Index dim);

  Eigen::Index dimension() const { return dimension_; }
  const std::vector<ParameterBlock>& blocks() const { return blocks_; }
  const ParameterBlock& block(std::size_t index) const { return blocks_.at(index); }
  std::size_t block_index(const std::string& name) const;

  /// Constrained values; adds log|J| to `log_jacobian` when non-null.
  /// Throws DomainError on non-finite input.
  ConstrainedValues constrain(const Eigen::VectorXd& free, double* log_jacobian = nullptr) const;

  /// Throws DomainError for values outside a block's support.
  Eigen::VectorXd unconstrain(const ConstrainedValues& values) const;

  /// Gradient on free coordinates from gradients on constrained values,
  /// optionally including the log-Jacobian term.
  Eigen::VectorXd backprop(const Eigen::VectorXd& free, const ConstrainedValues& values,
                           const ConstrainedValues& adjoints, bool with_jacobian) const;

  /// Zero adjoints shaped like the constrained values.
  ConstrainedValues zero_adjoints() const;

  /// Free segment of one block.
  template <typename Vec>
  auto segment(Vec& free, std::size_t index) const {
    const auto& b = blocks_.at(index);
    return free.segment(b.offset, b.free_size);
  }

 private:
  std::size_t add(ParameterBlock b);

  std::vector<ParameterBlock> blocks_;
  Eigen::Index dimension_ = 0;
};

}  // namespace cytomix
