#include "cytomix/plmm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <exception>
#include <mutex>
#include <thread>

#include <Eigen/Cholesky>

#include "cytomix/diagnostics.hpp"
#include "cytomix/errors.hpp"
#include "cytomix/prob_core.hpp"
#include "cytomix/random.hpp"

namespace cytomix {

namespace {

enum Block : std::size_t {
  kBeta = 0,
  kZCell,
  kZDonor,
  kSigma1,
  kSigma2,
  kSigmaDonor,
  kL1,
  kL2,
  kLDonor,
};

constexpr const char* kBlockTags[3] = {"cond1", "cond2", "donor"};

// Initial streams live apart from the chain streams split from the same seed.
constexpr std::uint64_t kInitStream = 0x696e6974ULL;

// Collapses dA (gradient wrt A = diag(s) L) onto s and L.
void split_scale_adjoint(const Eigen::MatrixXd& dA, const Eigen::VectorXd& s,
                         const Eigen::MatrixXd& L, Eigen::MatrixXd& d_s, Eigen::MatrixXd& d_L) {
  const Eigen::Index J = s.size();
  for (Eigen::Index j = 0; j < J; ++j) {
    for (Eigen::Index k = 0; k <= j; ++k) {
      d_s(j, 0) += dA(j, k) * L(j, k);
      d_L(j, k) += dA(j, k) * s[j];
    }
  }
}

// Orthonormal D x D basis whose first column is the constant 1/sqrt(D).
Eigen::MatrixXd helmert_basis(Eigen::Index D) {
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(D, D);
  if (D == 0) return H;
  H.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(D)));
  for (Eigen::Index k = 1; k < D; ++k) {
    const double norm = std::sqrt(static_cast<double>(k * (k + 1)));
    H.col(k).head(k).setConstant(1.0 / norm);
    H(k, k) = -static_cast<double>(k) / norm;
  }
  return H;
}

Eigen::MatrixXd cholesky_of_correlation(const Eigen::MatrixXd& omega) {
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success) {
    throw DomainError("posterior correlation draw is not positive definite");
  }
  return llt.matrixL();
}

double median_of(const Eigen::VectorXd& v) {
  return quantile(std::vector<double>(v.data(), v.data() + v.size()), 0.5);
}

}  // namespace

std::string beta_name(int condition, const std::string& marker) {
  return std::string("beta_") + kBlockTags[condition] + "[" + marker + "]";
}

std::string sigma_name(const std::string& block, const std::string& marker) {
  return "sigma_" + block + "[" + marker + "]";
}

std::string omega_name(const std::string& block, const std::string& a, const std::string& b) {
  return "omega_" + block + "[" + a + ":" + b + "]";
}

std::string donor_effect_name(const std::string& donor, const std::string& marker) {
  return "u_donor[" + donor + ":" + marker + "]";
}

PlmmData PlmmData::from_table(const CellTable& table, const std::vector<std::string>& markers) {
  PlmmData d;
  d.markers = markers.empty() ? table.functional_marker_names() : markers;
  if (d.markers.empty()) throw ParameterError("PLMM needs at least one marker");
  std::vector<Eigen::Index> cols;
  for (const auto& m : d.markers) cols.push_back(table.marker_index(m));
  const Eigen::Index N = table.n_cells();
  const auto J = static_cast<Eigen::Index>(cols.size());
  d.counts.resize(J, N);
  for (Eigen::Index i = 0; i < N; ++i) {
    for (Eigen::Index j = 0; j < J; ++j) {
      const auto y = table.counts()(i, cols[static_cast<std::size_t>(j)]);
      d.counts(j, i) = static_cast<double>(y);
      d.log_factorial_sum += std::lgamma(static_cast<double>(y) + 1.0);
    }
  }
  d.condition = table.condition_indices();
  d.donor = table.donor_indices();
  d.donors = table.donor_levels();
  d.condition_levels = table.condition_levels();
  return d;
}

PlmmModel::PlmmModel(std::shared_ptr<const PlmmData> data, PlmmPriors priors,
                     Parameterization parameterization)
    : data_(std::move(data)), priors_(priors), parameterization_(parameterization) {
  if (!data_) throw ParameterError("PLMM data is null");
  const Eigen::Index J = data_->n_markers();
  if (J < 1 || data_->n_cells() < 1) throw ParameterError("PLMM needs cells and markers");
  if (static_cast<Eigen::Index>(data_->condition.size()) != data_->n_cells() ||
      static_cast<Eigen::Index>(data_->donor.size()) != data_->n_cells()) {
    throw DimensionError("PLMM data: label vectors do not match the cell count");
  }
  if (!(priors_.beta_sd > 0.0 && priors_.sigma_scale > 0.0 && priors_.lkj_eta > 0.0)) {
    throw ParameterError("PLMM prior scales must be positive");
  }
  helmert_ = helmert_basis(data_->n_donors());
  map_.add_real("beta", J, 2);
  map_.add_real("z_cell", J, data_->n_cells());
  map_.add_real("z_donor", J, data_->n_donors());
  map_.add_positive("sigma_cond1", J);
  map_.add_positive("sigma_cond2", J);
  map_.add_positive("sigma_donor", J);
  map_.add_corr_cholesky("L_cond1", J);
  map_.add_corr_cholesky("L_cond2", J);
  map_.add_corr_cholesky("L_donor", J);
}

PlmmModel::Terms PlmmModel::evaluate(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const {
  if (q.size() != dimension()) {
    throw DimensionError("PLMM: parameter vector has length " + std::to_string(q.size()) +
                         ", expected " + std::to_string(dimension()));
  }
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Terms t;
  ConstrainedValues v;
  try {
    v = map_.constrain(q, &t.jacobian);
  } catch (const DomainError&) {
    t.jacobian = -kInf;
    if (grad) grad->setZero(dimension());
    return t;
  }
  // exp() of an extreme log scale underflows to 0 or overflows.
  for (std::size_t k = kSigma1; k <= kSigmaDonor; ++k) {
    if (!((v[k].array() > 0.0).all() && v[k].allFinite())) {
      t.jacobian = -kInf;
      if (grad) grad->setZero(dimension());
      return t;
    }
  }

  const PlmmData& d = *data_;
  const Eigen::Index J = d.n_markers();
  const Eigen::Index N = d.n_cells();
  const Eigen::Index D = d.n_donors();
  const bool centered = parameterization_ == Parameterization::centered;
  const bool contrasts = parameterization_ == Parameterization::donor_contrasts;
  const Eigen::MatrixXd& beta = v[kBeta];
  const Eigen::MatrixXd& Z = v[kZCell];
  const Eigen::MatrixXd& Zd = v[kZDonor];
  const Eigen::VectorXd s[3] = {v[kSigma1].col(0), v[kSigma2].col(0), v[kSigmaDonor].col(0)};
  const Eigen::MatrixXd* L[3] = {&v[kL1], &v[kL2], &v[kLDonor]};
  Eigen::MatrixXd A[3];
  for (int k = 0; k < 3; ++k) A[k] = s[k].asDiagonal() * *L[k];

  ConstrainedValues adj;
  Eigen::MatrixXd dA[3];
  if (grad) {
    adj = map_.zero_adjoints();
    for (auto& m : dA) m = Eigen::MatrixXd::Zero(J, J);
  }
  Eigen::MatrixXd gU;
  if (grad) gU = Eigen::MatrixXd::Zero(J, D);

  // In contrast form `beta` holds alpha = beta + mean donor effect and the
  // likelihood sees only the zero-mean part of u.
  Eigen::MatrixXd U;
  if (contrasts) {
    U = Zd.rightCols(D - 1) * helmert_.rightCols(D - 1).transpose();
  } else {
    U = centered ? Zd : Eigen::MatrixXd(A[2] * Zd);
  }
  Eigen::VectorXd eta(J), r(J);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    const int c = d.condition[static_cast<std::size_t>(i)];
    const int dd = d.donor[static_cast<std::size_t>(i)];
    const double* z = Z.col(i).data();
    const double* y = d.counts.col(i).data();
    const Eigen::MatrixXd& Ac = A[c];
    for (Eigen::Index j = 0; j < J; ++j) {
      double e = beta(j, c) + U(j, dd);
      if (centered) {
        e += z[j];
      } else {
        for (Eigen::Index k = 0; k <= j; ++k) e += Ac(j, k) * z[k];
      }
      eta[j] = e;
      const double mu = std::exp(e);
      ll += y[j] * e - mu;
      r[j] = y[j] - mu;
    }
    if (!grad) continue;
    adj[kBeta].col(c) += r;
    gU.col(dd) += r;
    double* dz = adj[kZCell].col(i).data();
    if (centered) {
      for (Eigen::Index j = 0; j < J; ++j) dz[j] = r[j];
    } else {
      Eigen::MatrixXd& dAc = dA[c];
      for (Eigen::Index k = 0; k < J; ++k) {
        double acc = 0.0;
        for (Eigen::Index j = k; j < J; ++j) {
          acc += Ac(j, k) * r[j];
          dAc(j, k) += r[j] * z[k];
        }
        dz[k] = acc;
      }
    }
  }
  t.likelihood = ll - d.log_factorial_sum;

  const double half_log_2pi = 0.5 * prob::kLogTwoPi;
  if (centered) {
    for (Eigen::Index i = 0; i < N; ++i) {
      const int c = d.condition[static_cast<std::size_t>(i)];
      if (grad) {
        const auto g = prob::mvn_log_density_chol_grad(Z.col(i), s[c], *L[c]);
        t.cell_effects += g.value;
        adj[kZCell].col(i) += g.d_x;
        adj[kSigma1 + static_cast<std::size_t>(c)].col(0) += g.d_sigma;
        adj[kL1 + static_cast<std::size_t>(c)] += g.d_L;
      } else {
        t.cell_effects += prob::mvn_log_density_chol(Z.col(i), ScaleVector(s[c]),
                                                     CorrelationCholesky(*L[c], 1e-6));
      }
    }
  } else {
    t.cell_effects = -0.5 * Z.squaredNorm() - half_log_2pi * static_cast<double>(N * J);
    if (grad) {
      adj[kZCell] -= Z;
      for (int k = 0; k < 2; ++k) {
        split_scale_adjoint(dA[k], s[k], *L[k], adj[kSigma1 + static_cast<std::size_t>(k)],
                            adj[kL1 + static_cast<std::size_t>(k)]);
      }
    }
  }
  // Fixed effects; in contrast form beta = alpha - A w0 / sqrt(D).
  const double root_d = std::sqrt(static_cast<double>(D));
  Eigen::MatrixXd beta_fixed = beta;
  if (contrasts) beta_fixed.colwise() -= A[2] * Zd.col(0) / root_d;
  const double beta_var = priors_.beta_sd * priors_.beta_sd;
  for (Eigen::Index c = 0; c < 2; ++c) {
    for (Eigen::Index j = 0; j < J; ++j) {
      t.beta_prior += prob::normal_prior_log_density(beta_fixed(j, c), priors_.beta_sd);
    }
  }
  Eigen::VectorXd g_mean;
  if (grad) {
    adj[kBeta] -= beta_fixed / beta_var;
    if (contrasts) g_mean = beta_fixed.rowwise().sum() / (beta_var * root_d);
  }

  if (centered) {
    for (Eigen::Index dd = 0; dd < D; ++dd) {
      if (grad) {
        const auto g = prob::mvn_log_density_chol_grad(Zd.col(dd), s[2], *L[2]);
        t.donor_effects += g.value;
        adj[kZDonor].col(dd) += gU.col(dd) + g.d_x;
        adj[kSigmaDonor].col(0) += g.d_sigma;
        adj[kLDonor] += g.d_L;
      } else {
        t.donor_effects += prob::mvn_log_density_chol(Zd.col(dd), ScaleVector(s[2]),
                                                      CorrelationCholesky(*L[2], 1e-6));
      }
    }
  } else if (contrasts) {
    // Column 0 is the non-centered donor mean, the rest centered contrasts.
    t.donor_effects = -0.5 * Zd.col(0).squaredNorm() - half_log_2pi * static_cast<double>(J);
    if (grad) {
      adj[kZDonor] = gU * helmert_;
      adj[kZDonor].col(0) = A[2].transpose() * g_mean - Zd.col(0);
      dA[2] += (g_mean * Zd.col(0).transpose()).triangularView<Eigen::Lower>().toDenseMatrix();
      split_scale_adjoint(dA[2], s[2], *L[2], adj[kSigmaDonor], adj[kLDonor]);
    }
    for (Eigen::Index k = 1; k < D; ++k) {
      if (grad) {
        const auto g = prob::mvn_log_density_chol_grad(Zd.col(k), s[2], *L[2]);
        t.donor_effects += g.value;
        adj[kZDonor].col(k) += g.d_x;
        adj[kSigmaDonor].col(0) += g.d_sigma;
        adj[kLDonor] += g.d_L;
      } else {
        t.donor_effects += prob::mvn_log_density_chol(Zd.col(k), ScaleVector(s[2]),
                                                      CorrelationCholesky(*L[2], 1e-6));
      }
    }
  } else {
    t.donor_effects = -0.5 * Zd.squaredNorm() - half_log_2pi * static_cast<double>(D * J);
    if (grad) {
      adj[kZDonor] = A[2].transpose() * gU - Zd;
      dA[2] += (gU * Zd.transpose()).triangularView<Eigen::Lower>().toDenseMatrix();
      split_scale_adjoint(dA[2], s[2], *L[2], adj[kSigmaDonor], adj[kLDonor]);
    }
  }

  for (int k = 0; k < 3; ++k) {
    for (Eigen::Index j = 0; j < J; ++j) {
      t.sigma_prior += prob::half_cauchy_log_density(s[k][j], priors_.sigma_scale);
      if (grad) {
        adj[kSigma1 + static_cast<std::size_t>(k)](j, 0) +=
            prob::half_cauchy_log_density_ds(s[k][j], priors_.sigma_scale);
      }
    }
    t.lkj_prior += prob::lkj_corr_cholesky_log_density(
        *L[k], priors_.lkj_eta, grad ? &adj[kL1 + static_cast<std::size_t>(k)] : nullptr);
  }

  if (grad) *grad = map_.backprop(q, v, adj, true);
  return t;
}

double PlmmModel::log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const {
  const double lp = evaluate(q, grad).total();
  return std::isnan(lp) ? -std::numeric_limits<double>::infinity() : lp;
}

double PlmmModel::log_likelihood(const Eigen::VectorXd& q) const {
  return evaluate(q, nullptr).likelihood;
}

std::string PlmmModel::nonfinite_term(const Eigen::VectorXd& q) const {
  const Terms t = evaluate(q, nullptr);
  const std::pair<const char*, double> named[] = {
      {"parameter transform", t.jacobian},   {"Poisson likelihood", t.likelihood},
      {"cell effects", t.cell_effects},      {"donor effects", t.donor_effects},
      {"beta prior", t.beta_prior},          {"sigma prior", t.sigma_prior},
      {"LKJ prior", t.lkj_prior},
  };
  for (const auto& [name, value] : named) {
    if (!std::isfinite(value)) return name;
  }
  return {};
}

std::vector<std::string> PlmmModel::output_names() const {
  const auto& m = data_->markers;
  std::vector<std::string> names;
  for (int c = 0; c < 2; ++c) {
    for (const auto& x : m) names.push_back(beta_name(c, x));
  }
  for (const char* b : kBlockTags) {
    for (const auto& x : m) names.push_back(sigma_name(b, x));
  }
  for (const char* b : kBlockTags) {
    for (std::size_t i = 0; i < m.size(); ++i) {
      for (std::size_t j = i + 1; j < m.size(); ++j) names.push_back(omega_name(b, m[i], m[j]));
    }
  }
  for (const auto& dn : data_->donors) {
    for (const auto& x : m) names.push_back(donor_effect_name(dn, x));
  }
  return names;
}

Eigen::MatrixXd PlmmModel::donor_mean(const ConstrainedValues& v) const {
  const Eigen::MatrixXd A = v[kSigmaDonor].col(0).asDiagonal() * v[kLDonor];
  return A * v[kZDonor].col(0) / std::sqrt(static_cast<double>(data_->n_donors()));
}

Eigen::MatrixXd PlmmModel::fixed_effects(const ConstrainedValues& v) const {
  if (parameterization_ != Parameterization::donor_contrasts) return v[kBeta];
  return v[kBeta].colwise() - donor_mean(v).col(0);
}

Eigen::MatrixXd PlmmModel::donor_effects(const ConstrainedValues& v) const {
  const Eigen::MatrixXd& Zd = v[kZDonor];
  switch (parameterization_) {
    case Parameterization::centered:
      return Zd;
    case Parameterization::donor_contrasts: {
      Eigen::MatrixXd C = Zd;
      C.col(0) = donor_mean(v) * std::sqrt(static_cast<double>(data_->n_donors()));
      return C * helmert_.transpose();
    }
    case Parameterization::non_centered:
      break;
  }
  return v[kSigmaDonor].col(0).asDiagonal() * v[kLDonor] * Zd;
}

Eigen::VectorXd PlmmModel::output_values(const Eigen::VectorXd& q) const {
  const ConstrainedValues v = map_.constrain(q);
  const Eigen::Index J = data_->n_markers();
  const Eigen::Index D = data_->n_donors();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(5 * J + 3 * corr_free_size(J) + D * J));
  const Eigen::MatrixXd beta = fixed_effects(v);
  for (Eigen::Index c = 0; c < 2; ++c) {
    for (Eigen::Index j = 0; j < J; ++j) out.push_back(beta(j, c));
  }
  for (std::size_t k = kSigma1; k <= kSigmaDonor; ++k) {
    for (Eigen::Index j = 0; j < J; ++j) out.push_back(v[k](j, 0));
  }
  for (std::size_t k = kL1; k <= kLDonor; ++k) {
    const Eigen::MatrixXd omega = v[k] * v[k].transpose();
    for (Eigen::Index i = 0; i < J; ++i) {
      for (Eigen::Index j = i + 1; j < J; ++j) out.push_back(omega(i, j));
    }
  }
  const Eigen::MatrixXd U = donor_effects(v);
  for (Eigen::Index dd = 0; dd < D; ++dd) {
    for (Eigen::Index j = 0; j < J; ++j) out.push_back(U(j, dd));
  }
  return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

Eigen::VectorXd PlmmModel::to_unconstrained(const PlmmParams& p) const {
  const Eigen::Index J = data_->n_markers();
  if (p.beta.rows() != 2 || p.beta.cols() != J || p.z_cell.rows() != data_->n_cells() ||
      p.z_cell.cols() != J || p.z_donor.rows() != data_->n_donors() || p.z_donor.cols() != J) {
    throw DimensionError("PLMM parameters do not match the data dimensions");
  }
  ConstrainedValues v(9);
  v[kBeta] = p.beta.transpose();
  v[kZCell] = p.z_cell.transpose();
  v[kZDonor] = p.z_donor.transpose();
  v[kSigma1] = p.sigma_cond1;
  v[kSigma2] = p.sigma_cond2;
  v[kSigmaDonor] = p.sigma_donor;
  v[kL1] = p.L_cond1;
  v[kL2] = p.L_cond2;
  v[kLDonor] = p.L_donor;
  if (parameterization_ == Parameterization::donor_contrasts) {
    // z_donor holds u; split it into the scaled mean and the contrasts.
    Eigen::MatrixXd C = v[kZDonor] * helmert_;
    const Eigen::MatrixXd A = p.sigma_donor.asDiagonal() * p.L_donor;
    const Eigen::VectorXd mean = C.col(0) / std::sqrt(static_cast<double>(data_->n_donors()));
    C.col(0) = A.triangularView<Eigen::Lower>().solve(C.col(0));
    if (!C.allFinite()) throw DomainError("donor scales must be positive to convert donor effects");
    v[kZDonor] = C;
    v[kBeta].colwise() += mean;
  }
  return map_.unconstrain(v);
}

PlmmParams PlmmModel::from_unconstrained(const Eigen::VectorXd& q) const {
  const ConstrainedValues v = map_.constrain(q);
  PlmmParams p;
  p.beta = fixed_effects(v).transpose();
  p.z_cell = v[kZCell].transpose();
  p.z_donor = parameterization_ == Parameterization::donor_contrasts
                  ? Eigen::MatrixXd(donor_effects(v).transpose())
                  : Eigen::MatrixXd(v[kZDonor].transpose());
  p.sigma_cond1 = v[kSigma1].col(0);
  p.sigma_cond2 = v[kSigma2].col(0);
  p.sigma_donor = v[kSigmaDonor].col(0);
  p.L_cond1 = v[kL1];
  p.L_cond2 = v[kL2];
  p.L_donor = v[kLDonor];
  return p;
}

PlmmInit plmm_init(const PlmmModel& model, int chains, std::uint64_t seed) {
  if (chains < 1) throw ParameterError("plmm_init: chains must be >= 1");
  const PlmmData& d = model.data();
  const Eigen::Index J = d.n_markers();
  PlmmInit out;
  Eigen::MatrixXd beta(J, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(J);
    double n = 0.0;
    for (Eigen::Index i = 0; i < d.n_cells(); ++i) {
      if (d.condition[static_cast<std::size_t>(i)] != c) continue;
      sum += d.counts.col(i);
      n += 1.0;
    }
    if (n == 0.0) {
      throw ParameterError("condition '" + d.condition_levels[static_cast<std::size_t>(c)] +
                           "' has no cells");
    }
    for (Eigen::Index j = 0; j < J; ++j) {
      const double mean = sum[j] / n;
      if (mean > 0.0) {
        beta(j, c) = std::log(mean);
      } else {
        beta(j, c) = std::log(mean + 0.5);
        out.warnings.push_back("marker '" + d.markers[static_cast<std::size_t>(j)] +
                               "' is all zero in condition '" +
                               d.condition_levels[static_cast<std::size_t>(c)] +
                               "'; initializing beta at log(0.5)");
      }
    }
  }
  const auto& map = model.map();
  for (int k = 0; k < chains; ++k) {
    Rng rng = make_rng(split_seed(seed, kInitStream), static_cast<std::uint64_t>(k));
    std::uniform_real_distribution<double> jitter(-0.1, 0.1);
    Eigen::VectorXd q = Eigen::VectorXd::Zero(map.dimension());
    map.segment(q, kBeta) = Eigen::Map<const Eigen::VectorXd>(beta.data(), beta.size());
    for (std::size_t b = kSigma1; b <= kSigmaDonor; ++b) {
      auto seg = map.segment(q, b);
      for (Eigen::Index j = 0; j < seg.size(); ++j) seg[j] = jitter(rng);
    }
    out.inits.push_back(std::move(q));
  }
  return out;
}

// PPC

SubsetPredicate subset_predicate_from_string(const std::string& s) {
  if (s == "gt_median") return SubsetPredicate::gt_median;
  if (s == "le_median") return SubsetPredicate::le_median;
  if (s == "eq_zero") return SubsetPredicate::eq_zero;
  if (s == "gt_zero") return SubsetPredicate::gt_zero;
  throw ConfigError("unknown subset predicate '" + s + "'");
}

std::string to_string(SubsetPredicate p) {
  switch (p) {
    case SubsetPredicate::gt_median: return "gt_median";
    case SubsetPredicate::le_median: return "le_median";
    case SubsetPredicate::eq_zero: return "eq_zero";
    case SubsetPredicate::gt_zero: return "gt_zero";
  }
  return "?";
}

std::vector<SubsetSpec> signaling_subsets() {
  using P = SubsetPredicate;
  return {
      {"A", {{"pSTAT1", P::gt_median}, {"pSTAT3", P::gt_median}, {"pSTAT5", P::gt_median}}},
      {"B", {{"pSTAT1", P::gt_median}, {"pSTAT3", P::le_median}, {"pSTAT5", P::le_median}}},
      {"C", {{"pERK1/2", P::eq_zero}, {"pMAPKAPK2", P::gt_median}}},
      {"D", {{"pERK1/2", P::gt_zero}, {"pMAPKAPK2", P::gt_median}}},
  };
}

namespace {

struct ResolvedTerm {
  Eigen::Index row;
  SubsetPredicate pred;
};

std::vector<ResolvedTerm> resolve(const SubsetSpec& spec, const std::vector<std::string>& markers) {
  if (spec.terms.empty()) throw ParameterError("subset '" + spec.name + "' has no predicates");
  std::vector<ResolvedTerm> out;
  for (const auto& [marker, pred] : spec.terms) {
    const auto it = std::find(markers.begin(), markers.end(), marker);
    if (it == markers.end()) {
      throw NotFoundError("subset '" + spec.name + "': marker '" + marker + "' is not modeled");
    }
    out.push_back({it - markers.begin(), pred});
  }
  return out;
}

double fraction(const Eigen::MatrixXd& counts, const std::vector<ResolvedTerm>& terms) {
  std::vector<double> med(terms.size(), 0.0);
  for (std::size_t t = 0; t < terms.size(); ++t) {
    const auto p = terms[t].pred;
    if (p == SubsetPredicate::gt_median || p == SubsetPredicate::le_median) {
      med[t] = median_of(counts.row(terms[t].row).transpose());
    }
  }
  Eigen::Index hits = 0;
  for (Eigen::Index i = 0; i < counts.cols(); ++i) {
    bool ok = true;
    for (std::size_t t = 0; t < terms.size() && ok; ++t) {
      const double y = counts(terms[t].row, i);
      switch (terms[t].pred) {
        case SubsetPredicate::gt_median: ok = y > med[t]; break;
        case SubsetPredicate::le_median: ok = y <= med[t]; break;
        case SubsetPredicate::eq_zero: ok = y == 0.0; break;
        case SubsetPredicate::gt_zero: ok = y > 0.0; break;
      }
    }
    if (ok) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(counts.cols());
}

// Parameters of one posterior draw needed to replicate data.
struct DrawParams {
  Eigen::MatrixXd beta;  // J x 2
  Eigen::MatrixXd A[3];  // diag(sigma) L
  Eigen::MatrixXd U;     // J x D
};

class DrawReader {
 public:
  DrawReader(const PosteriorDraws& draws, const PlmmData& data) : draws_(draws), data_(data) {
    const auto& m = data.markers;
    for (int c = 0; c < 2; ++c) {
      for (const auto& x : m) beta_.push_back(draws.column(beta_name(c, x)));
    }
    for (const char* b : kBlockTags) {
      for (const auto& x : m) sigma_.push_back(draws.column(sigma_name(b, x)));
      for (std::size_t i = 0; i < m.size(); ++i) {
        for (std::size_t j = i + 1; j < m.size(); ++j) {
          omega_.push_back(draws.column(omega_name(b, m[i], m[j])));
        }
      }
    }
    for (const auto& dn : data.donors) {
      for (const auto& x : m) u_.push_back(draws.column(donor_effect_name(dn, x)));
    }
  }

  DrawParams read(Eigen::Index k) const {
    const Eigen::Index J = data_.n_markers();
    const Eigen::Index D = data_.n_donors();
    DrawParams p;
    p.beta.resize(J, 2);
    for (Eigen::Index c = 0; c < 2; ++c) {
      for (Eigen::Index j = 0; j < J; ++j) p.beta(j, c) = at(k, beta_, c * J + j);
    }
    const Eigen::Index P = corr_free_size(J);
    for (Eigen::Index b = 0; b < 3; ++b) {
      Eigen::MatrixXd omega = Eigen::MatrixXd::Identity(J, J);
      Eigen::Index idx = b * P;
      for (Eigen::Index i = 0; i < J; ++i) {
        for (Eigen::Index j = i + 1; j < J; ++j) {
          omega(i, j) = omega(j, i) = at(k, omega_, idx++);
        }
      }
      Eigen::VectorXd s(J);
      for (Eigen::Index j = 0; j < J; ++j) s[j] = at(k, sigma_, b * J + j);
      p.A[b] = s.asDiagonal() * cholesky_of_correlation(omega);
    }
    p.U.resize(J, D);
    for (Eigen::Index dd = 0; dd < D; ++dd) {
      for (Eigen::Index j = 0; j < J; ++j) p.U(j, dd) = at(k, u_, dd * J + j);
    }
    return p;
  }

 private:
  double at(Eigen::Index k, const std::vector<Eigen::Index>& cols, Eigen::Index i) const {
    return draws_.values(k, cols[static_cast<std::size_t>(i)]);
  }

  const PosteriorDraws& draws_;
  const PlmmData& data_;
  std::vector<Eigen::Index> beta_, sigma_, omega_, u_;
};

Eigen::MatrixXd replicate_counts(const DrawParams& p, const PlmmData& data, bool redraw_donors,
                                 Rng& rng) {
  const Eigen::Index J = data.n_markers();
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd U = p.U;
  if (redraw_donors) {
    for (Eigen::Index dd = 0; dd < U.cols(); ++dd) {
      Eigen::VectorXd z(J);
      for (Eigen::Index j = 0; j < J; ++j) z[j] = normal(rng);
      U.col(dd) = p.A[2] * z;
    }
  }
  Eigen::MatrixXd y(J, data.n_cells());
  Eigen::VectorXd z(J);
  for (Eigen::Index i = 0; i < data.n_cells(); ++i) {
    const int c = data.condition[static_cast<std::size_t>(i)];
    const int dd = data.donor[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < J; ++j) z[j] = normal(rng);
    const Eigen::VectorXd eta = p.beta.col(c) + p.A[c] * z + U.col(dd);
    for (Eigen::Index j = 0; j < J; ++j) {
      const double mu = std::exp(eta[j]);
      if (!std::isfinite(mu)) throw DomainError("replicated Poisson mean is not finite");
      std::poisson_distribution<long long> pois(mu);
      y(j, i) = mu > 0.0 ? static_cast<double>(pois(rng)) : 0.0;
    }
  }
  return y;
}

}  // namespace

double subset_fraction(const Eigen::MatrixXd& counts, const std::vector<std::string>& markers,
                       const SubsetSpec& spec) {
  if (counts.cols() == 0) throw ParameterError("subset fraction of an empty table");
  return fraction(counts, resolve(spec, markers));
}

bool PpcResult::observed_in_central_interval(double mass) const {
  if (replicated.empty()) throw ParameterError("no replicated statistics");
  std::vector<double> sorted = replicated;
  std::sort(sorted.begin(), sorted.end());
  const double tail = 0.5 * (1.0 - mass);
  return observed >= quantile_sorted(sorted, tail) && observed <= quantile_sorted(sorted, 1.0 - tail);
}

std::vector<PpcResult> posterior_predictive(const PosteriorDraws& draws, const PlmmData& data,
                                            const std::vector<SubsetSpec>& specs, int n_rep,
                                            std::uint64_t seed, bool redraw_donor_effects,
                                            int threads) {
  if (draws.num_draws() == 0) throw ParameterError("posterior predictive check needs draws");
  if (n_rep < 1) throw ParameterError("n_rep must be >= 1");
  if (threads < 1) throw ParameterError("threads must be >= 1");
  std::vector<std::vector<ResolvedTerm>> terms;
  std::vector<PpcResult> results;
  for (const auto& s : specs) {
    terms.push_back(resolve(s, data.markers));
    results.push_back({s.name, fraction(data.counts, terms.back()),
                       std::vector<double>(static_cast<std::size_t>(n_rep))});
  }
  const DrawReader reader(draws, data);
  const Eigen::Index K = draws.num_draws();

  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (int r = next++; r < n_rep; r = next++) {
      try {
        const Eigen::Index k = static_cast<Eigen::Index>(r) * K / n_rep;
        Rng rng = make_rng(seed, static_cast<std::uint64_t>(r));
        const Eigen::MatrixXd y = replicate_counts(reader.read(k), data, redraw_donor_effects, rng);
        for (std::size_t s = 0; s < specs.size(); ++s) {
          results[s].replicated[static_cast<std::size_t>(r)] = fraction(y, terms[s]);
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n_rep;
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

// Summaries

namespace {

std::vector<double> column_values(const PosteriorDraws& draws, const std::string& name) {
  const auto col = draws.values.col(draws.column(name));
  return {col.data(), col.data() + col.size()};
}

}  // namespace

std::vector<QuantileSummary> fixed_effect_summary(const PosteriorDraws& draws,
                                                  const std::vector<std::string>& markers) {
  if (draws.num_draws() == 0) throw ParameterError("summary needs draws");
  std::vector<QuantileSummary> out;
  for (const auto& m : markers) {
    const auto b1 = column_values(draws, beta_name(0, m));
    const auto b2 = column_values(draws, beta_name(1, m));
    std::vector<double> diff(b1.size());
    for (std::size_t k = 0; k < b1.size(); ++k) diff[k] = b2[k] - b1[k];
    out.push_back(summarize_sample(b1, m, "beta_cond1"));
    out.push_back(summarize_sample(b2, m, "beta_cond2"));
    out.push_back(summarize_sample(std::move(diff), m, "beta_diff"));
  }
  return out;
}

std::vector<QuantileSummary> scale_summary(const PosteriorDraws& draws,
                                           const std::vector<std::string>& markers) {
  if (draws.num_draws() == 0) throw ParameterError("summary needs draws");
  std::vector<QuantileSummary> out;
  for (const auto& m : markers) {
    for (const char* b : kBlockTags) {
      out.push_back(
          summarize_sample(column_values(draws, sigma_name(b, m)), m, std::string("sigma_") + b));
    }
  }
  return out;
}

Eigen::MatrixXd correlation_median(const PosteriorDraws& draws,
                                   const std::vector<std::string>& markers,
                                   const std::string& which) {
  if (which != "cond1" && which != "cond2" && which != "donor") {
    throw ParameterError("correlation block must be cond1, cond2 or donor");
  }
  const auto J = static_cast<Eigen::Index>(markers.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Identity(J, J);
  for (Eigen::Index i = 0; i < J; ++i) {
    for (Eigen::Index j = i + 1; j < J; ++j) {
      const auto v = column_values(draws, omega_name(which, markers[static_cast<std::size_t>(i)],
                                                     markers[static_cast<std::size_t>(j)]));
      out(i, j) = out(j, i) = quantile(v, 0.5);
    }
  }
  return out;
}

CorrIncreaseSummary corr_increase_probability(const PosteriorDraws& draws,
                                              const std::vector<std::string>& markers, int bins) {
  if (bins < 1) throw ParameterError("histogram needs at least one bin");
  const auto J = static_cast<Eigen::Index>(markers.size());
  CorrIncreaseSummary out;
  out.markers = markers;
  out.p_hat = Eigen::MatrixXd::Constant(J, J, std::numeric_limits<double>::quiet_NaN());
  out.bin_counts.assign(static_cast<std::size_t>(bins), 0);
  for (int b = 0; b <= bins; ++b) out.bin_edges.push_back(static_cast<double>(b) / bins);
  const Eigen::Index K = draws.num_draws();
  for (Eigen::Index i = 0; i < J; ++i) {
    for (Eigen::Index j = i + 1; j < J; ++j) {
      const auto& a = markers[static_cast<std::size_t>(i)];
      const auto& b = markers[static_cast<std::size_t>(j)];
      const auto c1 = draws.values.col(draws.column(omega_name("cond1", a, b)));
      const auto c2 = draws.values.col(draws.column(omega_name("cond2", a, b)));
      Eigen::Index hits = 0;
      for (Eigen::Index k = 0; k < K; ++k) hits += c2[k] > c1[k] ? 1 : 0;
      const double p = K > 0 ? static_cast<double>(hits) / static_cast<double>(K)
                             : std::numeric_limits<double>::quiet_NaN();
      out.p_hat(i, j) = out.p_hat(j, i) = p;
      if (K > 0) {
        const int bin = std::min(bins - 1, static_cast<int>(p * bins));
        ++out.bin_counts[static_cast<std::size_t>(bin)];
      }
    }
  }
  return out;
}

}  // namespace cytomix
