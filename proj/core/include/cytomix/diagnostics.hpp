#pragma once

#include <vector>

#include <Eigen/Core>

#include "cytomix/sampler.hpp"

namespace cytomix {

using ChainSet = std::vector<Eigen::VectorXd>;

/// Classic potential scale reduction over the given (already split) chains.
double basic_rhat(const ChainSet& chains);

/// Rank-normalized split R-hat: the larger of the bulk and folded (tail)
/// versions. Needs at least two chains; throws ParameterError otherwise.
double split_rhat(const ChainSet& chains);

/// Effective sample size from split chains: multi-chain autocorrelations
/// summed up to Geyer's initial positive sequence, made monotone. Capped at
/// the number of draws.
double effective_sample_size(const ChainSet& chains);

/// Per-parameter split R-hat; throws ParameterError for a single chain.
Eigen::VectorXd compute_rhat(const PosteriorDraws& draws);
/// Per-parameter ESS.
Eigen::VectorXd compute_ess(const PosteriorDraws& draws);

/// Monte Carlo standard error of the mean, sd / sqrt(ESS).
double mcse_mean(const ChainSet& chains);

/// R type-7 sample quantile (linear interpolation); `p` in [0, 1].
double quantile(std::vector<double> values, double p);
double quantile_sorted(const std::vector<double>& sorted, double p);

}  // namespace cytomix
