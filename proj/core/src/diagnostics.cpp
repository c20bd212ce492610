#include "cytomix/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

#include "cytomix/errors.hpp"

namespace cytomix {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

ChainSet split_chains(const ChainSet& chains) {
  ChainSet out;
  for (const auto& c : chains) {
    const Eigen::Index half = c.size() / 2;
    if (half == 0) continue;
    // The middle draw of an odd-length chain is dropped.
    out.emplace_back(c.head(half));
    out.emplace_back(c.tail(half));
  }
  return out;
}

double variance(const Eigen::VectorXd& v) {
  if (v.size() < 2) return 0.0;
  const double m = v.mean();
  return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

bool all_constant(const ChainSet& chains) {
  const double first = chains.front()[0];
  for (const auto& c : chains) {
    if ((c.array() != first).any()) return false;
  }
  return true;
}

// Replaces draws by normal scores of their pooled average ranks.
ChainSet rank_normalize(const ChainSet& chains) {
  std::vector<std::pair<double, std::size_t>> pooled;
  for (std::size_t m = 0; m < chains.size(); ++m) {
    for (Eigen::Index i = 0; i < chains[m].size(); ++i) {
      pooled.emplace_back(chains[m][i], pooled.size());
    }
  }
  const std::size_t S = pooled.size();
  std::vector<double> rank(S);
  std::sort(pooled.begin(), pooled.end());
  for (std::size_t i = 0; i < S;) {
    std::size_t j = i;
    while (j + 1 < S && pooled[j + 1].first == pooled[i].first) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[pooled[k].second] = avg;
    i = j + 1;
  }
  const boost::math::normal_distribution<double> normal;
  ChainSet out = chains;
  std::size_t idx = 0;
  for (auto& c : out) {
    for (Eigen::Index i = 0; i < c.size(); ++i, ++idx) {
      const double u = (rank[idx] - 0.375) / (static_cast<double>(S) + 0.25);
      c[i] = boost::math::quantile(normal, u);
    }
  }
  return out;
}

double pooled_median(const ChainSet& chains) {
  std::vector<double> all;
  for (const auto& c : chains) all.insert(all.end(), c.data(), c.data() + c.size());
  return quantile(std::move(all), 0.5);
}

}  // namespace

double basic_rhat(const ChainSet& chains) {
  const auto M = static_cast<double>(chains.size());
  const Eigen::Index N = chains.front().size();
  const double n = static_cast<double>(N);
  Eigen::VectorXd means(chains.size());
  double W = 0.0;
  for (std::size_t m = 0; m < chains.size(); ++m) {
    means[static_cast<Eigen::Index>(m)] = chains[m].mean();
    W += variance(chains[m]);
  }
  W /= M;
  const double B_over_n = variance(means);
  const double var_plus = (n - 1.0) / n * W + B_over_n;
  if (!(W > 0.0)) return kNaN;
  return std::sqrt(var_plus / W);
}

double split_rhat(const ChainSet& chains) {
  if (chains.size() < 2) throw ParameterError("R-hat needs at least two chains");
  const Eigen::Index N = chains.front().size();
  for (const auto& c : chains) {
    if (c.size() != N) throw DimensionError("R-hat needs chains of equal length");
  }
  ChainSet split = split_chains(chains);
  if (split.size() < 2 || split.front().size() < 2 || all_constant(split)) return kNaN;
  const double bulk = basic_rhat(rank_normalize(split));
  const double med = pooled_median(split);
  ChainSet folded = split;
  for (auto& c : folded) c = (c.array() - med).abs().matrix();
  const double tail = all_constant(folded) ? kNaN : basic_rhat(rank_normalize(folded));
  if (std::isnan(tail)) return bulk;
  return std::max(bulk, tail);
}

double effective_sample_size(const ChainSet& chains) {
  ChainSet split = split_chains(chains);
  if (split.empty()) return kNaN;
  const Eigen::Index N = split.front().size();
  for (const auto& c : split) {
    if (c.size() != N) throw DimensionError("ESS needs chains of equal length");
  }
  const auto M = static_cast<double>(split.size());
  const double total = M * static_cast<double>(N);
  if (N < 4 || all_constant(split)) return kNaN;
  const double n = static_cast<double>(N);

  ChainSet centered = split;
  Eigen::VectorXd means(split.size());
  for (std::size_t m = 0; m < split.size(); ++m) {
    means[static_cast<Eigen::Index>(m)] = split[m].mean();
    centered[m].array() -= means[static_cast<Eigen::Index>(m)];
  }
  // Biased autocovariance (divide by N), averaged over chains.
  auto mean_acov = [&](Eigen::Index lag) {
    double s = 0.0;
    for (const auto& c : centered) s += c.head(N - lag).dot(c.tail(N - lag)) / n;
    return s / M;
  };
  const double acov0 = mean_acov(0);
  const double W = acov0 * n / (n - 1.0);
  double var_plus = W * (n - 1.0) / n;
  if (split.size() > 1) var_plus += variance(means);
  if (!(var_plus > 0.0)) return kNaN;

  std::vector<double> rho(static_cast<std::size_t>(N) + 1, 0.0);
  rho[0] = 1.0;
  double rho_even = 1.0;
  double rho_odd = 1.0 - (W - mean_acov(1)) / var_plus;
  rho[1] = rho_odd;
  Eigen::Index t = 1;
  while (t < N - 4 && rho_even + rho_odd > 0.0) {
    rho_even = 1.0 - (W - mean_acov(t + 1)) / var_plus;
    rho_odd = 1.0 - (W - mean_acov(t + 2)) / var_plus;
    if (rho_even + rho_odd >= 0.0) {
      rho[static_cast<std::size_t>(t + 1)] = rho_even;
      rho[static_cast<std::size_t>(t + 2)] = rho_odd;
    }
    t += 2;
  }
  const auto max_t = static_cast<std::size_t>(t);
  if (rho[max_t] > 0.0) rho[max_t + 1] = rho[max_t];
  // Initial monotone sequence.
  for (std::size_t s = 1; s + 3 <= max_t; s += 2) {
    if (rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s]) {
      rho[s + 1] = 0.5 * (rho[s - 1] + rho[s]);
      rho[s + 2] = rho[s + 1];
    }
  }
  double tau = -1.0 + rho[max_t + 1];
  for (std::size_t s = 0; s < max_t; ++s) tau += 2.0 * rho[s];
  const double ess = total / tau;
  return std::min(ess, total);
}

Eigen::VectorXd compute_rhat(const PosteriorDraws& draws) {
  if (draws.num_chains() < 2) throw ParameterError("R-hat unavailable: needs at least two chains");
  Eigen::VectorXd out(draws.num_params());
  for (Eigen::Index p = 0; p < draws.num_params(); ++p) out[p] = split_rhat(draws.by_chain(p));
  return out;
}

Eigen::VectorXd compute_ess(const PosteriorDraws& draws) {
  Eigen::VectorXd out(draws.num_params());
  for (Eigen::Index p = 0; p < draws.num_params(); ++p) {
    out[p] = effective_sample_size(draws.by_chain(p));
  }
  return out;
}

double mcse_mean(const ChainSet& chains) {
  std::vector<double> all;
  for (const auto& c : chains) all.insert(all.end(), c.data(), c.data() + c.size());
  const Eigen::Map<Eigen::VectorXd> v(all.data(), static_cast<Eigen::Index>(all.size()));
  const double ess = effective_sample_size(chains);
  return std::sqrt(variance(v) / ess);
}

double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw ParameterError("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("quantile probability must be in [0, 1]");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double quantile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, p);
}

}  // namespace cytomix
