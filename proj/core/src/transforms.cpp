#include "cytomix/transforms.hpp"

#include <cmath>

#include "cytomix/errors.hpp"

namespace cytomix {

Eigen::MatrixXd corr_cholesky_constrain(std::span<const double> free, Eigen::Index dim,
                                        double* log_jacobian) {
  if (static_cast<Eigen::Index>(free.size()) != corr_free_size(dim)) {
    throw DimensionError("correlation block has the wrong number of free coordinates");
  }
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(dim, dim);
  L(0, 0) = 1.0;
  double lj = 0.0;
  std::size_t k = 0;
  for (Eigen::Index i = 1; i < dim; ++i) {
    double sum_sq = 0.0;
    for (Eigen::Index j = 0; j < i; ++j, ++k) {
      const double z = std::tanh(free[k]);
      const double rem = 1.0 - sum_sq;
      // d tanh / dy and the stick-breaking scale sqrt(rem).
      lj += std::log1p(-z * z) + 0.5 * std::log(rem);
      L(i, j) = z * std::sqrt(rem);
      sum_sq += L(i, j) * L(i, j);
    }
    L(i, i) = std::sqrt(std::max(1.0 - sum_sq, 0.0));
  }
  if (log_jacobian) *log_jacobian += lj;
  return L;
}

Eigen::VectorXd corr_cholesky_unconstrain(const Eigen::MatrixXd& L) {
  const Eigen::Index dim = L.rows();
  Eigen::VectorXd y(corr_free_size(dim));
  Eigen::Index k = 0;
  for (Eigen::Index i = 1; i < dim; ++i) {
    double sum_sq = 0.0;
    for (Eigen::Index j = 0; j < i; ++j, ++k) {
      const double z = L(i, j) / std::sqrt(1.0 - sum_sq);
      if (!(std::abs(z) < 1.0)) throw DomainError("correlation factor is on the boundary");
      y[k] = std::atanh(z);
      sum_sq += L(i, j) * L(i, j);
    }
  }
  return y;
}

void corr_cholesky_backprop(std::span<const double> free, const Eigen::MatrixXd& L,
                            const Eigen::MatrixXd& d_L, bool with_jacobian,
                            std::span<double> d_free) {
  const Eigen::Index dim = L.rows();
  // Row i: s_0 = 0, w_j = sqrt(1 - s_j), L_ij = z_j w_j, s_{j+1} = s_j + L_ij^2,
  // L_ii = sqrt(1 - s_i). Walk each row backwards.
  std::size_t row_start = 0;
  for (Eigen::Index i = 1; i < dim; ++i) {
    double g_s = L(i, i) > 0.0 ? -0.5 * d_L(i, i) / L(i, i) : 0.0;
    // Recover the partial sums s_j.
    std::vector<double> s(static_cast<std::size_t>(i) + 1, 0.0);
    for (Eigen::Index j = 0; j < i; ++j) s[j + 1] = s[j] + L(i, j) * L(i, j);
    for (Eigen::Index j = i - 1; j >= 0; --j) {
      const std::size_t k = row_start + static_cast<std::size_t>(j);
      const double z = std::tanh(free[k]);
      const double w = std::sqrt(1.0 - s[j]);
      const double g_lij = d_L(i, j) + g_s * 2.0 * L(i, j);
      const double g_z = g_lij * w;
      double g_w = g_lij * z;
      if (with_jacobian) g_w += 1.0 / w;  // from 0.5 log(1 - s_j) = log w_j
      g_s += g_w * (-0.5 / w);
      double g_y = g_z * (1.0 - z * z);
      if (with_jacobian) g_y += -2.0 * z;  // d/dy log(1 - tanh^2 y)
      d_free[k] += g_y;
    }
    row_start += static_cast<std::size_t>(i);
  }
}

std::size_t UnconstrainedMap::add(ParameterBlock b) {
  b.offset = dimension_;
  dimension_ += b.free_size;
  blocks_.push_back(std::move(b));
  return blocks_.size() - 1;
}

std::size_t UnconstrainedMap::add_real(std::string name, Eigen::Index rows, Eigen::Index cols) {
  return add({std::move(name), BlockKind::real, rows, cols, 0, rows * cols});
}

std::size_t UnconstrainedMap::add_positive(std::string name, Eigen::Index size) {
  return add({std::move(name), BlockKind::positive, size, 1, 0, size});
}

std::size_t UnconstrainedMap::add_corr_cholesky(std::string name, Eigen::Index dim) {
  return add({std::move(name), BlockKind::corr_cholesky, dim, dim, 0, corr_free_size(dim)});
}

std::size_t UnconstrainedMap::block_index(const std::string& name) const {
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (blocks_[b].name == name) return b;
  }
  throw NotFoundError("no parameter block named '" + name + "'");
}

ConstrainedValues UnconstrainedMap::constrain(const Eigen::VectorXd& free,
                                              double* log_jacobian) const {
  if (free.size() != dimension_) {
    throw DimensionError("unconstrained vector has size " + std::to_string(free.size()) +
                         ", expected " + std::to_string(dimension_));
  }
  if (!free.allFinite()) throw DomainError("unconstrained vector has non-finite entries");
  ConstrainedValues out;
  out.reserve(blocks_.size());
  for (const auto& b : blocks_) {
    const auto seg = free.segment(b.offset, b.free_size);
    switch (b.kind) {
      case BlockKind::real:
        out.emplace_back(Eigen::Map<const Eigen::MatrixXd>(seg.data(), b.rows, b.cols));
        break;
      case BlockKind::positive:
        out.emplace_back(seg.unaryExpr([](double x) { return std::exp(x); }));
        if (log_jacobian) *log_jacobian += seg.sum();
        break;
      case BlockKind::corr_cholesky:
        out.emplace_back(corr_cholesky_constrain(
            std::span<const double>(seg.data(), static_cast<std::size_t>(seg.size())), b.rows,
            log_jacobian));
        break;
    }
  }
  return out;
}

Eigen::VectorXd UnconstrainedMap::unconstrain(const ConstrainedValues& values) const {
  if (values.size() != blocks_.size()) throw DimensionError("wrong number of parameter blocks");
  Eigen::VectorXd free(dimension_);
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    const auto& b = blocks_[k];
    const auto& v = values[k];
    if (v.rows() != b.rows || v.cols() != b.cols) {
      throw DimensionError("block '" + b.name + "' has the wrong shape");
    }
    if (!v.allFinite()) throw DomainError("block '" + b.name + "' has non-finite entries");
    switch (b.kind) {
      case BlockKind::real:
        free.segment(b.offset, b.free_size) = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
        break;
      case BlockKind::positive:
        if ((v.array() <= 0.0).any()) throw DomainError("block '" + b.name + "' must be positive");
        free.segment(b.offset, b.free_size) = v.col(0).array().log().matrix();
        break;
      case BlockKind::corr_cholesky:
        CorrelationCholesky check(v);
        free.segment(b.offset, b.free_size) = corr_cholesky_unconstrain(check.matrix());
        break;
    }
  }
  return free;
}

ConstrainedValues UnconstrainedMap::zero_adjoints() const {
  ConstrainedValues out;
  out.reserve(blocks_.size());
  for (const auto& b : blocks_) out.emplace_back(Eigen::MatrixXd::Zero(b.rows, b.cols));
  return out;
}

Eigen::VectorXd UnconstrainedMap::backprop(const Eigen::VectorXd& free,
                                           const ConstrainedValues& values,
                                           const ConstrainedValues& adjoints,
                                           bool with_jacobian) const {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(dimension_);
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    const auto& b = blocks_[k];
    auto g = grad.segment(b.offset, b.free_size);
    switch (b.kind) {
      case BlockKind::real:
        g = Eigen::Map<const Eigen::VectorXd>(adjoints[k].data(), b.free_size);
        break;
      case BlockKind::positive:
        g = adjoints[k].col(0).cwiseProduct(values[k].col(0));
        if (with_jacobian) g.array() += 1.0;
        break;
      case BlockKind::corr_cholesky: {
        const auto seg = free.segment(b.offset, b.free_size);
        corr_cholesky_backprop(
            std::span<const double>(seg.data(), static_cast<std::size_t>(seg.size())), values[k],
            adjoints[k], with_jacobian,
            std::span<double>(g.data(), static_cast<std::size_t>(g.size())));
        break;
      }
    }
  }
  return grad;
}

}  // namespace cytomix
