#include "cytomix/llmm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "cytomix/errors.hpp"
#include "cytomix/prob_core.hpp"
#include "cytomix/random.hpp"

namespace cytomix {

namespace {

enum Block : std::size_t { kBeta = 0, kZDonor, kSigma, kL };

constexpr std::uint64_t kInitStream = 0x696e6974ULL;

// Linear predictors beyond this magnitude mean a donor's classes separate.
constexpr double kSeparationEta = 30.0;

}  // namespace

std::vector<std::string> LlmmData::coefficient_names() const {
  std::vector<std::string> out{kInterceptName};
  out.insert(out.end(), markers.begin(), markers.end());
  return out;
}

LlmmData LlmmData::from_table(const TransformedTable& table, const std::vector<std::string>& markers,
                              bool require_paired) {
  if (!table.source) throw ParameterError("transformed table has no source table");
  const CellTable& src = *table.source;
  if (require_paired && !src.paired()) {
    throw PairingError("LLMM is limited to paired samples: every donor needs cells in both conditions");
  }
  LlmmData d;
  d.markers = markers.empty() ? src.functional_marker_names() : markers;
  if (d.markers.empty()) throw ParameterError("LLMM needs at least one marker");
  d.x.resize(src.n_cells(), static_cast<Eigen::Index>(d.markers.size()));
  for (std::size_t j = 0; j < d.markers.size(); ++j) {
    d.x.col(static_cast<Eigen::Index>(j)) = table.values.col(src.marker_index(d.markers[j]));
  }
  d.y = src.condition_indices();
  d.donor = src.donor_indices();
  d.donors = src.donor_levels();
  d.condition_levels = src.condition_levels();
  return d;
}

LlmmData LlmmData::exclude_markers(const std::vector<std::string>& exclude) const {
  for (const auto& m : exclude) {
    if (std::find(markers.begin(), markers.end(), m) == markers.end()) {
      throw NotFoundError("cannot exclude unknown marker '" + m + "'");
    }
  }
  std::vector<Eigen::Index> keep;
  for (std::size_t j = 0; j < markers.size(); ++j) {
    if (std::find(exclude.begin(), exclude.end(), markers[j]) == exclude.end()) {
      keep.push_back(static_cast<Eigen::Index>(j));
    }
  }
  if (keep.empty()) throw ParameterError("excluding every marker leaves no predictors");
  LlmmData out = *this;
  out.markers.clear();
  out.x.resize(n_cells(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.x.col(static_cast<Eigen::Index>(k)) = x.col(keep[k]);
    out.markers.push_back(markers[static_cast<std::size_t>(keep[k])]);
  }
  return out;
}

Standardization Standardization::fit(const Eigen::MatrixXd& x) {
  Standardization s;
  const Eigen::Index J = x.cols();
  s.center = x.colwise().mean().transpose();
  s.scale = Eigen::VectorXd::Ones(J);
  if (x.rows() > 1) {
    for (Eigen::Index j = 0; j < J; ++j) {
      const double var = (x.col(j).array() - s.center[j]).square().sum() /
                         static_cast<double>(x.rows() - 1);
      if (var > 0.0) s.scale[j] = std::sqrt(var);
    }
  }
  return s;
}

Eigen::MatrixXd Standardization::apply(const Eigen::MatrixXd& x) const {
  return (x.rowwise() - center.transpose()).array().rowwise() / scale.transpose().array();
}

Eigen::MatrixXd Standardization::to_raw() const {
  const Eigen::Index J = center.size();
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(J + 1, J + 1);
  T(0, 0) = 1.0;
  for (Eigen::Index j = 0; j < J; ++j) {
    T(0, j + 1) = -center[j] / scale[j];
    T(j + 1, j + 1) = 1.0 / scale[j];
  }
  return T;
}

LlmmModel::LlmmModel(std::shared_ptr<const LlmmData> data, LlmmPriors priors)
    : data_(std::move(data)), priors_(priors) {
  if (!data_) throw ParameterError("LLMM data is null");
  const Eigen::Index N = data_->n_cells();
  if (N < 1 || data_->n_markers() < 1) throw ParameterError("LLMM needs cells and markers");
  if (static_cast<Eigen::Index>(data_->y.size()) != N ||
      static_cast<Eigen::Index>(data_->donor.size()) != N) {
    throw DimensionError("LLMM data: label vectors do not match the cell count");
  }
  for (int y : data_->y) {
    if (y != 0 && y != 1) throw DomainError("LLMM response must be 0 or 1");
  }
  if (!(priors_.beta_sd > 0.0 && priors_.sigma_scale > 0.0 && priors_.lkj_eta > 0.0)) {
    throw ParameterError("LLMM prior scales must be positive");
  }
  std_ = Standardization::fit(data_->x);
  const Eigen::Index P = data_->n_markers() + 1;
  design_.resize(P, N);
  design_.row(0).setOnes();
  design_.bottomRows(P - 1) = std_.apply(data_->x).transpose();
  map_.add_real("beta", P);
  map_.add_real("z_donor", P, data_->n_donors());
  map_.add_positive("sigma_donor", P);
  map_.add_corr_cholesky("L_donor", P);
}

LlmmModel::Terms LlmmModel::evaluate(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const {
  if (q.size() != dimension()) {
    throw DimensionError("LLMM: parameter vector has length " + std::to_string(q.size()) +
                         ", expected " + std::to_string(dimension()));
  }
  Terms t;
  ConstrainedValues v;
  try {
    v = map_.constrain(q, &t.jacobian);
  } catch (const DomainError&) {
    v.clear();
  }
  if (v.empty() || !((v[kSigma].array() > 0.0).all() && v[kSigma].allFinite())) {
    t.jacobian = -std::numeric_limits<double>::infinity();
    if (grad) grad->setZero(dimension());
    return t;
  }
  const LlmmData& d = *data_;
  const Eigen::Index P = design_.rows();
  const Eigen::Index D = d.n_donors();
  const Eigen::VectorXd beta = v[kBeta].col(0);
  const Eigen::MatrixXd& Zd = v[kZDonor];
  const Eigen::VectorXd s = v[kSigma].col(0);
  const Eigen::MatrixXd& L = v[kL];
  const Eigen::MatrixXd A = s.asDiagonal() * L;
  const Eigen::MatrixXd B = (A * Zd).colwise() + beta;

  Eigen::MatrixXd dB;
  if (grad) dB = Eigen::MatrixXd::Zero(P, D);
  double ll = 0.0;
  for (Eigen::Index i = 0; i < d.n_cells(); ++i) {
    const int dd = d.donor[static_cast<std::size_t>(i)];
    const double y = d.y[static_cast<std::size_t>(i)];
    const double eta = design_.col(i).dot(B.col(dd));
    ll += y * eta - prob::log1p_exp(eta);
    if (grad) dB.col(dd) += (y - prob::inv_logit(eta)) * design_.col(i);
  }
  t.likelihood = ll;
  t.donor_effects =
      -0.5 * Zd.squaredNorm() - 0.5 * prob::kLogTwoPi * static_cast<double>(P * D);
  for (Eigen::Index j = 0; j < P; ++j) {
    t.beta_prior += prob::normal_prior_log_density(beta[j], priors_.beta_sd);
    t.sigma_prior += prob::half_cauchy_log_density(s[j], priors_.sigma_scale);
  }
  ConstrainedValues adj;
  if (grad) adj = map_.zero_adjoints();
  t.lkj_prior = prob::lkj_corr_cholesky_log_density(L, priors_.lkj_eta, grad ? &adj[kL] : nullptr);
  if (!grad) return t;

  adj[kBeta].col(0) = dB.rowwise().sum() - beta / (priors_.beta_sd * priors_.beta_sd);
  adj[kZDonor] = A.transpose() * dB - Zd;
  const Eigen::MatrixXd dA = dB * Zd.transpose();
  for (Eigen::Index j = 0; j < P; ++j) {
    adj[kSigma](j, 0) += prob::half_cauchy_log_density_ds(s[j], priors_.sigma_scale);
    for (Eigen::Index k = 0; k <= j; ++k) {
      adj[kSigma](j, 0) += dA(j, k) * L(j, k);
      adj[kL](j, k) += dA(j, k) * s[j];
    }
  }
  *grad = map_.backprop(q, v, adj, true);
  return t;
}

double LlmmModel::log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const {
  const double lp = evaluate(q, grad).total();
  return std::isnan(lp) ? -std::numeric_limits<double>::infinity() : lp;
}

double LlmmModel::log_likelihood(const Eigen::VectorXd& q) const {
  return evaluate(q, nullptr).likelihood;
}

std::string LlmmModel::nonfinite_term(const Eigen::VectorXd& q) const {
  const Terms t = evaluate(q, nullptr);
  const std::pair<const char*, double> named[] = {
      {"parameter transform", t.jacobian}, {"Bernoulli likelihood", t.likelihood},
      {"donor effects", t.donor_effects},  {"beta prior", t.beta_prior},
      {"sigma prior", t.sigma_prior},      {"LKJ prior", t.lkj_prior},
  };
  for (const auto& [name, value] : named) {
    if (!std::isfinite(value)) return name;
  }
  return {};
}

std::string llmm_beta_name(const std::string& coefficient) { return "beta[" + coefficient + "]"; }

std::vector<std::string> LlmmModel::output_names() const {
  const auto coefs = data_->coefficient_names();
  std::vector<std::string> names;
  for (const auto& c : coefs) names.push_back(llmm_beta_name(c));
  for (const auto& c : coefs) names.push_back("sigma_donor_std[" + c + "]");
  for (std::size_t i = 0; i < coefs.size(); ++i) {
    for (std::size_t j = i + 1; j < coefs.size(); ++j) {
      names.push_back("omega_donor_std[" + coefs[i] + ":" + coefs[j] + "]");
    }
  }
  return names;
}

Eigen::VectorXd LlmmModel::output_values(const Eigen::VectorXd& q) const {
  const ConstrainedValues v = map_.constrain(q);
  const Eigen::Index P = design_.rows();
  Eigen::VectorXd out(2 * P + corr_free_size(P));
  out.head(P) = std_.to_raw() * v[kBeta].col(0);
  out.segment(P, P) = v[kSigma].col(0);
  const Eigen::MatrixXd omega = v[kL] * v[kL].transpose();
  Eigen::Index idx = 2 * P;
  for (Eigen::Index i = 0; i < P; ++i) {
    for (Eigen::Index j = i + 1; j < P; ++j) out[idx++] = omega(i, j);
  }
  return out;
}

Eigen::VectorXd LlmmModel::to_unconstrained(const LlmmParams& p) const {
  const Eigen::Index P = design_.rows();
  if (p.beta.size() != P || p.z_donor.rows() != data_->n_donors() || p.z_donor.cols() != P) {
    throw DimensionError("LLMM parameters do not match the data dimensions");
  }
  ConstrainedValues v(4);
  v[kBeta] = p.beta;
  v[kZDonor] = p.z_donor.transpose();
  v[kSigma] = p.sigma_donor;
  v[kL] = p.L_donor;
  return map_.unconstrain(v);
}

LlmmParams LlmmModel::from_unconstrained(const Eigen::VectorXd& q) const {
  const ConstrainedValues v = map_.constrain(q);
  return {v[kBeta].col(0), v[kZDonor].transpose(), v[kSigma].col(0), v[kL]};
}

std::vector<Eigen::VectorXd> llmm_init(const LlmmModel& model, int chains, std::uint64_t seed) {
  if (chains < 1) throw ParameterError("llmm_init: chains must be >= 1");
  std::vector<Eigen::VectorXd> out;
  for (int k = 0; k < chains; ++k) {
    Rng rng = make_rng(split_seed(seed, kInitStream), static_cast<std::uint64_t>(k));
    std::uniform_real_distribution<double> jitter(-0.1, 0.1);
    Eigen::VectorXd q = Eigen::VectorXd::Zero(model.dimension());
    auto seg = model.map().segment(q, kSigma);
    for (Eigen::Index j = 0; j < seg.size(); ++j) seg[j] = jitter(rng);
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<QuantileSummary> llmm_fixed_effect_summary(const PosteriorDraws& draws,
                                                       const std::vector<std::string>& coefficients) {
  if (draws.num_draws() == 0) throw ParameterError("summary needs draws");
  std::vector<QuantileSummary> out;
  for (const auto& c : coefficients) {
    const auto col = draws.values.col(draws.column(llmm_beta_name(c)));
    out.push_back(summarize_sample({col.data(), col.data() + col.size()}, c, "beta"));
  }
  return out;
}

// Method of moments

LogisticFit logistic_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double ridge,
                                int max_iterations, double tolerance) {
  if (X.rows() != y.size()) throw DimensionError("logistic regression: X and y disagree");
  if (ridge < 0.0) throw ParameterError("ridge must be >= 0");
  const Eigen::Index P = X.cols();
  auto objective = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = X * b;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y[i] * eta[i] - prob::log1p_exp(eta[i]);
    return ll - 0.5 * ridge * b.squaredNorm();
  };
  LogisticFit fit;
  fit.beta = Eigen::VectorXd::Zero(P);
  double current = objective(fit.beta);
  Eigen::MatrixXd H(P, P);
  for (int it = 0; it < max_iterations; ++it) {
    fit.iterations = it + 1;
    const Eigen::VectorXd eta = X * fit.beta;
    Eigen::VectorXd r(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double p = prob::inv_logit(eta[i]);
      r[i] = y[i] - p;
      w[i] = p * (1.0 - p);
    }
    const Eigen::VectorXd g = X.transpose() * r - ridge * fit.beta;
    H = X.transpose() * w.asDiagonal() * X;
    H.diagonal().array() += ridge;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) break;
    const Eigen::VectorXd step = ldlt.solve(g);
    double scale = 1.0;
    Eigen::VectorXd next = fit.beta + step;
    double value = objective(next);
    for (int h = 0; h < 30 && !(value >= current - 1e-12 * std::abs(current)); ++h) {
      scale *= 0.5;
      next = fit.beta + scale * step;
      value = objective(next);
    }
    fit.beta = next;
    current = value;
    if ((scale * step).cwiseAbs().maxCoeff() < tolerance) {
      fit.converged = true;
      break;
    }
  }
  const Eigen::VectorXd eta = X * fit.beta;
  Eigen::VectorXd w(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double p = prob::inv_logit(eta[i]);
    w[i] = p * (1.0 - p);
  }
  H = X.transpose() * w.asDiagonal() * X;
  H.diagonal().array() += ridge;
  fit.cov = H.ldlt().solve(Eigen::MatrixXd::Identity(P, P));
  if (!fit.cov.allFinite()) fit.converged = false;
  return fit;
}

Eigen::MatrixXd project_psd(const Eigen::MatrixXd& m, bool* changed) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  Eigen::VectorXd vals = eig.eigenvalues();
  const bool negative = (vals.array() < 0.0).any();
  if (changed) *changed = negative;
  if (!negative) return sym;
  vals = vals.cwiseMax(0.0);
  return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

bool MomEstimate::ridge_used() const {
  return std::any_of(donor_fits.begin(), donor_fits.end(), [](const auto& f) { return f.ridge; });
}

std::string MomEstimate::flags() const {
  std::vector<std::string> f;
  if (ridge_used()) f.push_back("ridge");
  if (!dropped_donors.empty()) f.push_back("dropped-donor");
  if (psd_projected) f.push_back("psd-projected");
  std::string out;
  for (std::size_t i = 0; i < f.size(); ++i) out += (i ? ";" : "") + f[i];
  return out;
}

std::vector<QuantileSummary> MomEstimate::summary() const {
  std::vector<QuantileSummary> out;
  for (std::size_t j = 0; j < coefficients.size(); ++j) {
    const auto J = static_cast<Eigen::Index>(j);
    out.push_back({coefficients[j], "beta", beta_hat[J], beta_hat[J] - 1.959963984540054 * beta_se[J],
                   beta_hat[J] + 1.959963984540054 * beta_se[J]});
  }
  return out;
}

MomEstimate llmm_mom_fit(const LlmmData& data, const MomOptions& options) {
  if (options.threads < 1) throw ParameterError("threads must be >= 1");
  const Eigen::Index J = data.n_markers();
  const Eigen::Index P = J + 1;
  const Standardization st = Standardization::fit(data.x);
  const Eigen::MatrixXd T = st.to_raw();
  Eigen::MatrixXd design(data.n_cells(), P);
  design.col(0).setOnes();
  design.rightCols(J) = st.apply(data.x);

  MomEstimate est;
  est.coefficients = data.coefficient_names();
  std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(data.n_donors()));
  for (Eigen::Index i = 0; i < data.n_cells(); ++i) {
    rows[static_cast<std::size_t>(data.donor[static_cast<std::size_t>(i)])].push_back(i);
  }
  std::vector<std::size_t> usable;
  for (std::size_t d = 0; d < rows.size(); ++d) {
    Eigen::Index ones = 0;
    for (auto i : rows[d]) ones += data.y[static_cast<std::size_t>(i)];
    const auto n = static_cast<Eigen::Index>(rows[d].size());
    if (n < J + 2 || ones == 0 || ones == n) {
      est.dropped_donors.push_back(data.donors[d]);
      est.warnings.push_back("donor '" + data.donors[d] + "' dropped: " +
                             (n < J + 2 ? "fewer than J+2 cells" : "only one condition present"));
    } else {
      usable.push_back(d);
    }
  }
  if (usable.empty()) throw ParameterError("method of moments: no donor has both conditions and enough cells");

  std::vector<LogisticFit> fits(usable.size());
  std::vector<char> ridged(usable.size(), 0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t u = next++; u < usable.size(); u = next++) {
      try {
        const auto& idx = rows[usable[u]];
        Eigen::MatrixXd X(static_cast<Eigen::Index>(idx.size()), P);
        Eigen::VectorXd y(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t r = 0; r < idx.size(); ++r) {
          X.row(static_cast<Eigen::Index>(r)) = design.row(idx[r]);
          y[static_cast<Eigen::Index>(r)] = data.y[static_cast<std::size_t>(idx[r])];
        }
        LogisticFit f = logistic_regression(X, y, 0.0, options.max_iterations, options.tolerance);
        if (!f.converged || (X * f.beta).cwiseAbs().maxCoeff() > kSeparationEta) {
          f = logistic_regression(X, y, options.ridge, 4 * options.max_iterations, options.tolerance);
          ridged[u] = 1;
        }
        fits[u] = std::move(f);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (options.threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < options.threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  const auto Du = static_cast<Eigen::Index>(usable.size());
  Eigen::MatrixXd B(P, Du);
  Eigen::MatrixXd mean_v = Eigen::MatrixXd::Zero(P, P);
  for (Eigen::Index u = 0; u < Du; ++u) {
    const auto& f = fits[static_cast<std::size_t>(u)];
    B.col(u) = f.beta;
    mean_v += f.cov;
    if (ridged[static_cast<std::size_t>(u)]) {
      est.warnings.push_back("donor '" + data.donors[usable[static_cast<std::size_t>(u)]] +
                             "' separates the conditions; refit with ridge " +
                             std::to_string(options.ridge));
    }
    est.donor_fits.push_back({data.donors[usable[static_cast<std::size_t>(u)]], T * f.beta,
                              T * f.cov * T.transpose(), ridged[static_cast<std::size_t>(u)] != 0});
  }
  mean_v /= static_cast<double>(Du);
  const Eigen::VectorXd beta_std = B.rowwise().mean();
  Eigen::MatrixXd cov_std = Eigen::MatrixXd::Zero(P, P);
  Eigen::MatrixXd var_mean;
  if (Du >= 2) {
    const Eigen::MatrixXd centered = B.colwise() - beta_std;
    const Eigen::MatrixXd S = centered * centered.transpose() / static_cast<double>(Du - 1);
    cov_std = project_psd(S - mean_v, &est.psd_projected);
    var_mean = S / static_cast<double>(Du);
  } else {
    est.warnings.push_back("only one donor usable; random-effect covariance set to zero");
    var_mean = mean_v;
  }
  est.beta_hat = T * beta_std;
  est.cov_hat = T * cov_std * T.transpose();
  est.beta_se = (T * var_mean * T.transpose()).diagonal().cwiseMax(0.0).cwiseSqrt();
  return est;
}

}  // namespace cytomix
