#include "cytomix/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "cytomix/diagnostics.hpp"
#include "cytomix/errors.hpp"

namespace cytomix {

namespace {

constexpr double kDivergenceThreshold = 1000.0;

// Checkpoint text format: whitespace-separated tokens, doubles in hex so
// they round-trip exactly.
void put(std::ostream& out, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", x);
  out << buf << ' ';
}

double get_double(std::istream& in) {
  std::string tok;
  if (!(in >> tok)) throw Error("truncated checkpoint");
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str()) throw Error("malformed number in checkpoint: " + tok);
  return v;
}

template <typename T>
T get_int(std::istream& in) {
  T v{};
  if (!(in >> v)) throw Error("truncated checkpoint");
  return v;
}

void expect_tag(std::istream& in, const char* tag) {
  std::string tok;
  if (!(in >> tok) || tok != tag) throw Error(std::string("checkpoint: expected '") + tag + "'");
}

void put(std::ostream& out, const Eigen::VectorXd& v) {
  out << v.size() << ' ';
  for (Eigen::Index i = 0; i < v.size(); ++i) put(out, v[i]);
  out << '\n';
}

Eigen::VectorXd get_vector(std::istream& in) {
  const auto n = get_int<Eigen::Index>(in);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = get_double(in);
  return v;
}

double kinetic(const Eigen::VectorXd& p, const Eigen::VectorXd& inv_mass) {
  return 0.5 * p.cwiseProduct(p).dot(inv_mass);
}

// Leapfrog in place; returns false once the density or gradient is not finite.
bool leapfrog_inplace(Eigen::VectorXd& q, Eigen::VectorXd& p, Eigen::VectorXd& grad,
                      double& log_p, double eps, int steps, const Eigen::VectorXd& inv_mass,
                      const GradientFn& fn) {
  for (int s = 0; s < steps; ++s) {
    p.noalias() += 0.5 * eps * grad;
    q.noalias() += eps * inv_mass.cwiseProduct(p);
    log_p = fn(q, grad);
    if (!std::isfinite(log_p) || !grad.allFinite()) return false;
    p.noalias() += 0.5 * eps * grad;
  }
  return true;
}

}  // namespace

std::vector<std::string> Model::output_names() const {
  std::vector<std::string> names;
  for (Eigen::Index i = 0; i < dimension(); ++i) names.push_back("q[" + std::to_string(i) + "]");
  return names;
}

Eigen::VectorXd Model::output_values(const Eigen::VectorXd& q) const { return q; }

std::string Model::nonfinite_term(const Eigen::VectorXd&) const { return "log density"; }

void SamplerConfig::validate() const {
  if (chains < 1) throw ConfigError("sampler.chains must be >= 1");
  if (iterations < 1) throw ConfigError("sampler.iterations must be >= 1");
  if (warmup < 1) throw ConfigError("sampler.warmup must be >= 1");
  if (warmup >= iterations) throw ConfigError("sampler.warmup must be < sampler.iterations");
  if (!(target_accept > 0.0 && target_accept < 1.0)) {
    throw ConfigError("sampler.target_accept must lie in (0, 1)");
  }
  if (max_leapfrog_steps < 1) throw ConfigError("sampler.max_leapfrog_steps must be >= 1");
  if (!(integration_time > 0.0)) throw ConfigError("sampler.integration_time must be > 0");
  if (!(initial_step_size > 0.0)) throw ConfigError("sampler.initial_step_size must be > 0");
  if (threads < 1) throw ConfigError("sampler.threads must be >= 1");
}

int PosteriorDraws::num_chains() const {
  if (chain.empty()) return 0;
  return *std::max_element(chain.begin(), chain.end()) + 1;
}

Eigen::Index PosteriorDraws::column(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw NotFoundError("no parameter '" + name + "' in draws");
  return static_cast<Eigen::Index>(it - names.begin());
}

bool PosteriorDraws::has(const std::string& name) const {
  return std::find(names.begin(), names.end(), name) != names.end();
}

std::vector<Eigen::VectorXd> PosteriorDraws::by_chain(Eigen::Index p) const {
  const int m = num_chains();
  std::vector<std::vector<double>> tmp(static_cast<std::size_t>(m));
  for (Eigen::Index k = 0; k < num_draws(); ++k) {
    tmp[static_cast<std::size_t>(chain[static_cast<std::size_t>(k)])].push_back(values(k, p));
  }
  std::vector<Eigen::VectorXd> out;
  for (auto& t : tmp) {
    if (!t.empty()) out.push_back(Eigen::Map<Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size())));
  }
  return out;
}

int Diagnostics::total_divergences() const {
  int s = 0;
  for (int d : divergences) s += d;
  return s;
}

double Diagnostics::max_r_hat() const {
  double best = std::numeric_limits<double>::quiet_NaN();
  for (Eigen::Index i = 0; i < r_hat.size(); ++i) {
    if (std::isfinite(r_hat[i]) && !(r_hat[i] <= best)) best = r_hat[i];
  }
  return best;
}

LeapfrogResult leapfrog(const Eigen::VectorXd& q, const Eigen::VectorXd& p, double eps, int steps,
                        const GradientFn& fn, const Eigen::VectorXd& inv_mass) {
  if (!(eps > 0.0)) throw ParameterError("leapfrog step size must be positive");
  if (steps < 1) throw ParameterError("leapfrog needs at least one step");
  const Eigen::VectorXd m = inv_mass.size() == 0 ? Eigen::VectorXd::Ones(q.size()) : inv_mass;
  LeapfrogResult r{q, p, Eigen::VectorXd::Zero(q.size()), 0.0, false};
  r.log_density = fn(r.q, r.grad);
  if (!std::isfinite(r.log_density) || !r.grad.allFinite()) {
    r.divergent = true;
    return r;
  }
  r.divergent = !leapfrog_inplace(r.q, r.p, r.grad, r.log_density, eps, steps, m, fn);
  return r;
}

StepSizeAdapter::StepSizeAdapter(double target_accept) : target_{target_accept} {}

void StepSizeAdapter::restart(double step_size) {
  mu_ = std::log(10.0 * step_size);
  h_bar_ = 0.0;
  log_eps_bar_ = 0.0;
  counter_ = 0.0;
  log_eps_ = std::log(step_size);
}

double StepSizeAdapter::learn(double accept_stat) {
  counter_ += 1.0;
  accept_stat = std::clamp(accept_stat, 0.0, 1.0);
  const double eta = 1.0 / (counter_ + t0_);
  h_bar_ = (1.0 - eta) * h_bar_ + eta * (target_ - accept_stat);
  log_eps_ = mu_ - std::sqrt(counter_) / gamma_ * h_bar_;
  const double w = std::pow(counter_, -kappa_);
  log_eps_bar_ = w * log_eps_ + (1.0 - w) * log_eps_bar_;
  return std::exp(log_eps_);
}

double StepSizeAdapter::final_step_size() const {
  return counter_ > 0.0 ? std::exp(log_eps_bar_) : std::exp(log_eps_);
}

void StepSizeAdapter::save(std::ostream& out) const {
  out << "adapter ";
  for (double v : {target_, mu_, h_bar_, log_eps_bar_, counter_, log_eps_}) put(out, v);
  out << '\n';
}

void StepSizeAdapter::load(std::istream& in) {
  expect_tag(in, "adapter");
  target_ = get_double(in);
  mu_ = get_double(in);
  h_bar_ = get_double(in);
  log_eps_bar_ = get_double(in);
  counter_ = get_double(in);
  log_eps_ = get_double(in);
}

double adapt_step_size(std::span<const double> accept_history, double initial_step_size,
                       double target_accept) {
  StepSizeAdapter a(target_accept);
  a.restart(initial_step_size);
  double eps = initial_step_size;
  for (double s : accept_history) eps = a.learn(s);
  return eps;
}

WarmupSchedule::WarmupSchedule(int warmup) : warmup_{warmup} {
  if (warmup < 20) {
    adapt_metric_ = false;
    return;
  }
  if (init_buffer_ + window_size_ + term_buffer_ > warmup) {
    init_buffer_ = static_cast<int>(0.15 * warmup);
    term_buffer_ = static_cast<int>(0.1 * warmup);
    window_size_ = warmup - (init_buffer_ + term_buffer_);
  }
  next_window_end_ = init_buffer_ + window_size_ - 1;
}

bool WarmupSchedule::in_slow_window(int t) const {
  return adapt_metric_ && t >= init_buffer_ && t < warmup_ - term_buffer_;
}

bool WarmupSchedule::end_of_window(int t) {
  if (!adapt_metric_ || t != next_window_end_ || t == warmup_) return false;
  const int last = warmup_ - term_buffer_ - 1;
  if (next_window_end_ != last) {
    window_size_ *= 2;
    next_window_end_ = t + window_size_;
    if (next_window_end_ != last && next_window_end_ + 2 * window_size_ >= warmup_ - term_buffer_) {
      next_window_end_ = last;
    }
  } else {
    next_window_end_ = -1;
  }
  return true;
}

void WarmupSchedule::save(std::ostream& out) const {
  out << "schedule " << warmup_ << ' ' << adapt_metric_ << ' ' << init_buffer_ << ' '
      << term_buffer_ << ' ' << window_size_ << ' ' << next_window_end_ << '\n';
}

void WarmupSchedule::load(std::istream& in) {
  expect_tag(in, "schedule");
  warmup_ = get_int<int>(in);
  adapt_metric_ = get_int<int>(in) != 0;
  init_buffer_ = get_int<int>(in);
  term_buffer_ = get_int<int>(in);
  window_size_ = get_int<int>(in);
  next_window_end_ = get_int<int>(in);
}

Chain::Chain(const Model& model, const SamplerConfig& config, int chain_id, Eigen::VectorXd init)
    : model_{model},
      config_{config},
      chain_id_{chain_id},
      rng_{split_seed(config.seed, static_cast<std::uint64_t>(chain_id))},
      q_{std::move(init)},
      adapter_{config.target_accept},
      schedule_{config.warmup} {
  if (q_.size() != model_.dimension()) {
    throw DimensionError("chain " + std::to_string(chain_id) + ": init has size " +
                         std::to_string(q_.size()) + ", model expects " +
                         std::to_string(model_.dimension()));
  }
  fn_ = [this](const Eigen::VectorXd& q, Eigen::VectorXd& g) {
    try {
      return model_.log_density(q, &g);
    } catch (const DomainError&) {
      // Out-of-support points reject like any other divergence.
      return -std::numeric_limits<double>::infinity();
    }
  };
  grad_ = Eigen::VectorXd::Zero(q_.size());
  log_p_ = fn_(q_, grad_);
  if (!std::isfinite(log_p_) || !grad_.allFinite()) {
    throw InitializationError("chain " + std::to_string(chain_id) + ": non-finite " +
                              model_.nonfinite_term(q_) + " at the initial point");
  }
  inv_mass_ = Eigen::VectorXd::Ones(q_.size());
  var_mean_ = Eigen::VectorXd::Zero(q_.size());
  var_m2_ = Eigen::VectorXd::Zero(q_.size());
  eps_ = config_.initial_step_size;
  find_reasonable_step_size();
  adapter_.restart(eps_);
}

double Chain::accept_rate() const {
  const auto n = static_cast<double>(outputs_.size());
  return n > 0 ? accept_sum_ / n : std::numeric_limits<double>::quiet_NaN();
}

void Chain::find_reasonable_step_size() {
  const Eigen::Index dim = q_.size();
  const double log_target = std::log(0.8);
  const Eigen::VectorXd sqrt_mass = inv_mass_.cwiseSqrt().cwiseInverse();
  auto one_step = [&]() {
    Eigen::VectorXd p(dim);
    for (Eigen::Index i = 0; i < dim; ++i) p[i] = normal_(rng_) * sqrt_mass[i];
    const double h0 = -log_p_ + kinetic(p, inv_mass_);
    Eigen::VectorXd q = q_, g = grad_;
    double lp = log_p_;
    if (!leapfrog_inplace(q, p, g, lp, eps_, 1, inv_mass_, fn_)) {
      return -std::numeric_limits<double>::infinity();
    }
    const double d = h0 - (-lp + kinetic(p, inv_mass_));
    return std::isnan(d) ? -std::numeric_limits<double>::infinity() : d;
  };
  double delta = one_step();
  const int direction = delta > log_target ? 1 : -1;
  for (int guard = 0; guard < 100; ++guard) {
    delta = one_step();
    if (direction == 1 && !(delta > log_target)) break;
    if (direction == -1 && !(delta < log_target)) break;
    eps_ = direction == 1 ? 2.0 * eps_ : 0.5 * eps_;
    if (eps_ > 1e7 || eps_ < 1e-10) break;
  }
  eps_ = std::clamp(eps_, 1e-10, 1e7);
}

int Chain::jittered_steps() {
  const int cap = config_.max_leapfrog_steps;
  const double nominal = std::ceil(config_.integration_time / eps_);
  const int base = static_cast<int>(std::clamp(nominal, 1.0, static_cast<double>(cap)));
  const int lo = std::max(1, (base + 1) / 2);
  const int hi = std::min(cap, std::max(lo, base + base / 2));
  const int span = hi - lo + 1;
  return lo + std::min(span - 1, static_cast<int>(uniform_(rng_) * span));
}

double Chain::transition() {
  const Eigen::Index dim = q_.size();
  Eigen::VectorXd p(dim);
  for (Eigen::Index i = 0; i < dim; ++i) p[i] = normal_(rng_) / std::sqrt(inv_mass_[i]);
  const double h0 = -log_p_ + kinetic(p, inv_mass_);
  const int steps = jittered_steps();
  leapfrog_total_ += steps;

  Eigen::VectorXd q = q_, g = grad_;
  double lp = log_p_;
  const bool finite = leapfrog_inplace(q, p, g, lp, eps_, steps, inv_mass_, fn_);
  const double delta_h = finite ? (-lp + kinetic(p, inv_mass_)) - h0
                                : std::numeric_limits<double>::infinity();
  const double u = uniform_(rng_);
  if (!finite || !std::isfinite(delta_h) || delta_h > kDivergenceThreshold) {
    if (iteration_ >= config_.warmup) ++divergences_;
    return 0.0;
  }
  const double accept = delta_h <= 0.0 ? 1.0 : std::exp(-delta_h);
  if (u < accept) {
    q_ = std::move(q);
    grad_ = std::move(g);
    log_p_ = lp;
  }
  return accept;
}

void Chain::iterate() {
  if (done()) return;
  const double accept = transition();
  if (iteration_ < config_.warmup) {
    eps_ = adapter_.learn(accept);
    if (config_.mass_matrix == MassMatrix::diagonal && schedule_.adapts_metric()) {
      if (schedule_.in_slow_window(iteration_)) {
        ++var_count_;
        const Eigen::VectorXd delta = q_ - var_mean_;
        var_mean_ += delta / static_cast<double>(var_count_);
        var_m2_ += delta.cwiseProduct(q_ - var_mean_);
      }
      if (schedule_.end_of_window(iteration_)) {
        const double n = static_cast<double>(var_count_);
        if (var_count_ > 1) {
          const Eigen::VectorXd var = var_m2_ / (n - 1.0);
          inv_mass_ = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
        }
        var_count_ = 0;
        var_mean_.setZero();
        var_m2_.setZero();
        find_reasonable_step_size();
        adapter_.restart(eps_);
      }
    }
    if (iteration_ == config_.warmup - 1) eps_ = adapter_.final_step_size();
  } else {
    accept_sum_ += accept;
    outputs_.push_back(model_.output_values(q_));
  }
  ++iteration_;
}

void Chain::save(std::ostream& out) const {
  out << "cytomix-chain 1 " << chain_id_ << ' ' << q_.size() << ' ' << config_.seed << ' '
      << config_.iterations << ' ' << config_.warmup << '\n';
  out << "iteration " << iteration_ << ' ' << divergences_ << ' ' << leapfrog_total_ << ' '
      << var_count_ << '\n';
  out << "scalars ";
  for (double v : {log_p_, eps_, accept_sum_}) put(out, v);
  out << '\n';
  put(out, q_);
  put(out, grad_);
  put(out, inv_mass_);
  put(out, var_mean_);
  put(out, var_m2_);
  adapter_.save(out);
  schedule_.save(out);
  out << "rng " << rng_ << '\n';
  out << "normal " << normal_ << '\n';
  out << "outputs " << outputs_.size() << '\n';
  for (const auto& o : outputs_) put(out, o);
  out << "end\n";
}

void Chain::load(std::istream& in) {
  expect_tag(in, "cytomix-chain");
  if (get_int<int>(in) != 1) throw Error("unsupported checkpoint version");
  const int id = get_int<int>(in);
  const auto dim = get_int<Eigen::Index>(in);
  const auto seed = get_int<std::uint64_t>(in);
  const int iterations = get_int<int>(in);
  const int warmup = get_int<int>(in);
  if (id != chain_id_ || dim != q_.size() || seed != config_.seed ||
      iterations != config_.iterations || warmup != config_.warmup) {
    throw ConfigError("checkpoint for chain " + std::to_string(chain_id_) +
                      " does not match the current run configuration");
  }
  expect_tag(in, "iteration");
  iteration_ = get_int<int>(in);
  divergences_ = get_int<int>(in);
  leapfrog_total_ = get_int<std::int64_t>(in);
  var_count_ = get_int<std::int64_t>(in);
  expect_tag(in, "scalars");
  log_p_ = get_double(in);
  eps_ = get_double(in);
  accept_sum_ = get_double(in);
  q_ = get_vector(in);
  grad_ = get_vector(in);
  inv_mass_ = get_vector(in);
  var_mean_ = get_vector(in);
  var_m2_ = get_vector(in);
  adapter_.load(in);
  schedule_.load(in);
  expect_tag(in, "rng");
  in >> rng_;
  expect_tag(in, "normal");
  in >> normal_;
  expect_tag(in, "outputs");
  const auto n = get_int<std::size_t>(in);
  outputs_.clear();
  for (std::size_t k = 0; k < n; ++k) outputs_.push_back(get_vector(in));
  expect_tag(in, "end");
}

SamplerResult run_chains(const Model& model, const SamplerConfig& config,
                         const std::vector<Eigen::VectorXd>& inits,
                         const std::optional<CheckpointOptions>& checkpoint) {
  config.validate();
  if (inits.empty()) throw InitializationError("no initial values supplied");
  if (inits.size() != 1 && inits.size() != static_cast<std::size_t>(config.chains)) {
    throw DimensionError("expected 1 or " + std::to_string(config.chains) + " initial vectors");
  }
  auto init_for = [&](int c) -> const Eigen::VectorXd& {
    return inits.size() == 1 ? inits[0] : inits[static_cast<std::size_t>(c)];
  };

  // Chains whose own init is not finite start from the first finite one.
  std::optional<std::size_t> first_finite;
  for (std::size_t c = 0; c < inits.size(); ++c) {
    if (inits[c].size() != model.dimension()) {
      throw DimensionError("initial vector " + std::to_string(c) + " has size " +
                           std::to_string(inits[c].size()) + ", model expects " +
                           std::to_string(model.dimension()));
    }
    Eigen::VectorXd g(model.dimension());
    const double lp = model.log_density(inits[c], &g);
    if (std::isfinite(lp) && g.allFinite()) {
      if (!first_finite) first_finite = c;
    }
  }
  if (!first_finite) {
    throw InitializationError("all chains failed to initialize: non-finite " +
                              model.nonfinite_term(inits[0]));
  }

  if (checkpoint && checkpoint->every > 0) {
    std::filesystem::create_directories(checkpoint->directory);
  }
  auto checkpoint_path = [&](int c) {
    return checkpoint->directory / ("chain_" + std::to_string(c) + ".ckpt");
  };

  std::vector<std::unique_ptr<Chain>> chains(static_cast<std::size_t>(config.chains));
  std::atomic<int> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;

  auto worker = [&]() {
    for (int c = next++; c < config.chains; c = next++) {
      try {
        Eigen::VectorXd init = init_for(c);
        {
          Eigen::VectorXd g(model.dimension());
          const double lp = model.log_density(init, &g);
          if (!std::isfinite(lp) || !g.allFinite()) init = inits[*first_finite];
        }
        auto chain = std::make_unique<Chain>(model, config, c, std::move(init));
        if (checkpoint && checkpoint->resume && std::filesystem::exists(checkpoint_path(c))) {
          std::ifstream in(checkpoint_path(c));
          chain->load(in);
        }
        while (!chain->done()) {
          chain->iterate();
          if (checkpoint && checkpoint->every > 0 &&
              (chain->iteration() % checkpoint->every == 0 || chain->done())) {
            const auto path = checkpoint_path(c);
            const auto tmp = std::filesystem::path(path.string() + ".tmp");
            {
              std::ofstream out(tmp);
              chain->save(out);
            }
            std::filesystem::rename(tmp, path);
          }
        }
        chains[static_cast<std::size_t>(c)] = std::move(chain);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };

  const int n_threads = std::max(1, std::min(config.threads, config.chains));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  SamplerResult result;
  auto& draws = result.draws;
  draws.names = model.output_names();
  const auto per_chain = static_cast<Eigen::Index>(config.draws_per_chain());
  const auto n_params = static_cast<Eigen::Index>(draws.names.size());
  draws.values.resize(per_chain * config.chains, n_params);
  Eigen::Index row = 0;
  auto& diag = result.diagnostics;
  for (const auto& chain : chains) {
    for (Eigen::Index k = 0; k < per_chain; ++k, ++row) {
      draws.values.row(row) = chain->outputs()[static_cast<std::size_t>(k)].transpose();
      draws.chain.push_back(chain->chain_id());
      draws.iteration.push_back(config.warmup + static_cast<int>(k) + 1);
    }
    diag.accept_rate.push_back(chain->accept_rate());
    diag.step_size.push_back(chain->step_size());
    diag.divergences.push_back(chain->divergences());
    diag.leapfrog_steps.push_back(chain->leapfrog_steps());
  }
  diag.r_hat = config.chains >= 2
                   ? compute_rhat(draws)
                   : Eigen::VectorXd::Constant(n_params, std::numeric_limits<double>::quiet_NaN());
  diag.ess = compute_ess(draws);
  return result;
}

}  // namespace cytomix
