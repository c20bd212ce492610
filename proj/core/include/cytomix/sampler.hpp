#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cytomix/random.hpp"

namespace cytomix {

/// A differentiable log density on unconstrained space.
class Model {
 public:
  virtual ~Model() = default;

  virtual Eigen::Index dimension() const = 0;

  /// Log density at `q`; fills `grad` when non-null. Non-finite results are
  /// allowed and are treated as divergences by the sampler.
  virtual double log_density(const Eigen::VectorXd& q, Eigen::VectorXd* grad) const = 0;

  /// Quantities recorded per draw. Defaults to the unconstrained vector.
  virtual std::vector<std::string> output_names() const;
  virtual Eigen::VectorXd output_values(const Eigen::VectorXd& q) const;

  /// Name of the first term that is not finite at `q`, for error messages.
  virtual std::string nonfinite_term(const Eigen::VectorXd& q) const;
};

enum class MassMatrix { identity, diagonal };

struct SamplerConfig {
  int chains = 8;
  /// Total iterations per chain, warmup included.
  int iterations = 325;
  int warmup = 200;
  std::uint64_t seed = 1;
  double target_accept = 0.8;
  int max_leapfrog_steps = 256;
  MassMatrix mass_matrix = MassMatrix::diagonal;
  /// Nominal trajectory length; the step count is integration_time / eps,
  /// jittered uniformly over [0.5, 1.5] of that and capped.
  double integration_time = 2.0;
  double initial_step_size = 0.1;
  /// Worker threads for chains. Output does not depend on it.
  int threads = 1;

  /// Throws ConfigError.
  void validate() const;
  int draws_per_chain() const { return iterations - warmup; }
};

/// K x P retained draws with provenance.
struct PosteriorDraws {
  std::vector<std::string> names;
  Eigen::MatrixXd values;
  std::vector<int> chain;
  /// 1-based iteration within the chain, warmup included.
  std::vector<int> iteration;

  Eigen::Index num_draws() const { return values.rows(); }
  Eigen::Index num_params() const { return values.cols(); }
  int num_chains() const;
  /// Column of `name`; throws NotFoundError.
  Eigen::Index column(const std::string& name) const;
  bool has(const std::string& name) const;
  /// One vector per chain (in chain order) for parameter column `p`.
  std::vector<Eigen::VectorXd> by_chain(Eigen::Index p) const;
};

struct Diagnostics {
  Eigen::VectorXd r_hat;
  Eigen::VectorXd ess;
  std::vector<double> accept_rate;
  std::vector<double> step_size;
  std::vector<int> divergences;
  std::vector<std::int64_t> leapfrog_steps;

  int total_divergences() const;
  /// Largest finite R-hat, or NaN when none is available.
  double max_r_hat() const;
};

using GradientFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

struct LeapfrogResult {
  Eigen::VectorXd q;
  Eigen::VectorXd p;
  Eigen::VectorXd grad;
  double log_density = 0.0;
  /// Set when the density or its gradient became non-finite.
  bool divergent = false;
};

/// `steps` leapfrog steps of size `eps` for H(q, p) = -log p(q) + p' M^-1 p / 2.
/// An empty `inv_mass` means the identity.
LeapfrogResult leapfrog(const Eigen::VectorXd& q, const Eigen::VectorXd& p, double eps, int steps,
                        const GradientFn& log_density_grad,
                        const Eigen::VectorXd& inv_mass = Eigen::VectorXd());

/// Nesterov dual averaging of log step size toward a target acceptance.
class StepSizeAdapter {
 public:
  explicit StepSizeAdapter(double target_accept = 0.8);

  void restart(double step_size);
  /// Feeds one acceptance statistic and returns the next step size.
  double learn(double accept_stat);
  /// Averaged step size used once warmup ends.
  double final_step_size() const;

  void save(std::ostream& out) const;
  void load(std::istream& in);

 private:
  double target_;
  double gamma_ = 0.1;
  double t0_ = 10;
  double kappa_ = 0.75;
  double mu_ = 0.0;
  double h_bar_ = 0.0;
  double log_eps_bar_ = 0.0;
  double counter_ = 0.0;
  double log_eps_ = 0.0;
};

/// Runs the controller over a recorded stream of acceptance statistics.
double adapt_step_size(std::span<const double> accept_history, double initial_step_size,
                       double target_accept);

/// Stan-style warmup windows: a fast initial buffer, doubling slow windows
/// that estimate the mass matrix, and a fast terminal buffer.
class WarmupSchedule {
 public:
  explicit WarmupSchedule(int warmup);

  /// True when iteration `t` (0-based) feeds the variance estimate.
  bool in_slow_window(int t) const;
  /// True when the slow window ends at iteration `t`; advances the schedule.
  bool end_of_window(int t);
  bool adapts_metric() const { return adapt_metric_; }

  void save(std::ostream& out) const;
  void load(std::istream& in);

 private:
  int warmup_;
  bool adapt_metric_ = true;
  int init_buffer_ = 75;
  int term_buffer_ = 50;
  int window_size_ = 25;
  int next_window_end_ = 0;
};

/// One HMC chain advanced an iteration at a time. State is serializable so a
/// run can be checkpointed and resumed bit-identically.
class Chain {
 public:
  Chain(const Model& model, const SamplerConfig& config, int chain_id, Eigen::VectorXd init);
  Chain(const Chain&) = delete;
  Chain& operator=(const Chain&) = delete;

  void iterate();
  bool done() const { return iteration_ >= config_.iterations; }
  int iteration() const { return iteration_; }
  int chain_id() const { return chain_id_; }

  const std::vector<Eigen::VectorXd>& outputs() const { return outputs_; }
  const Eigen::VectorXd& position() const { return q_; }
  double step_size() const { return eps_; }
  const Eigen::VectorXd& inv_mass() const { return inv_mass_; }
  double accept_rate() const;
  int divergences() const { return divergences_; }
  std::int64_t leapfrog_steps() const { return leapfrog_total_; }

  void save(std::ostream& out) const;
  void load(std::istream& in);

 private:
  /// Returns the acceptance statistic of one transition.
  double transition();
  void find_reasonable_step_size();
  int jittered_steps();

  const Model& model_;
  SamplerConfig config_;
  int chain_id_;
  GradientFn fn_;

  Rng rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};

  Eigen::VectorXd q_;
  Eigen::VectorXd grad_;
  double log_p_ = 0.0;
  double eps_ = 0.1;
  Eigen::VectorXd inv_mass_;

  StepSizeAdapter adapter_;
  WarmupSchedule schedule_;
  std::int64_t var_count_ = 0;
  Eigen::VectorXd var_mean_;
  Eigen::VectorXd var_m2_;

  int iteration_ = 0;
  double accept_sum_ = 0.0;
  int divergences_ = 0;
  std::int64_t leapfrog_total_ = 0;
  std::vector<Eigen::VectorXd> outputs_;
};

struct CheckpointOptions {
  std::filesystem::path directory;
  /// Iterations between checkpoints; 0 disables.
  int every = 0;
  /// Resume from existing checkpoint files in `directory`.
  bool resume = false;
};

struct SamplerResult {
  PosteriorDraws draws;
  Diagnostics diagnostics;
};

/// Runs `config.chains` chains (one init per chain, or a single init shared
/// by all), discards warmup and computes diagnostics. Chain k draws from
/// the stream split_seed(config.seed, k).
SamplerResult run_chains(const Model& model, const SamplerConfig& config,
                         const std::vector<Eigen::VectorXd>& inits,
                         const std::optional<CheckpointOptions>& checkpoint = std::nullopt);

}  // namespace cytomix
