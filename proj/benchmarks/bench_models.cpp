#include <memory>
#include <random>

#include <Eigen/Dense>
#include <benchmark/benchmark.h>

#include "cytomix/llmm.hpp"
#include "cytomix/plmm.hpp"
#include "cytomix/simgen.hpp"

using namespace cytomix;

namespace {

PlmmTruth plmm_truth(int J) {
  PlmmTruth t;
  for (int j = 0; j < J; ++j) t.markers.push_back("m" + std::to_string(j + 1));
  t.beta = Eigen::MatrixXd::Constant(2, J, 1.5);
  t.sigma_cond1 = t.sigma_cond2 = Eigen::VectorXd::Constant(J, 0.5);
  t.sigma_donor = Eigen::VectorXd::Constant(J, 0.3);
  t.omega_cond1 = t.omega_cond2 = t.omega_donor = Eigen::MatrixXd::Identity(J, J);
  return t;
}

Eigen::VectorXd random_point(Eigen::Index n) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z(0.0, 0.3);
  Eigen::VectorXd q(n);
  for (auto& x : q) x = z(rng);
  return q;
}

// args: markers, cells per donor and condition (4 donors)
void BM_PlmmGradient(benchmark::State& state) {
  const int J = static_cast<int>(state.range(0));
  const auto sim = simulate_plmm(plmm_truth(J), {4, static_cast<int>(state.range(1))}, 1);
  const PlmmModel m(std::make_shared<const PlmmData>(PlmmData::from_table(sim.table)));
  const Eigen::VectorXd q = random_point(m.dimension());
  Eigen::VectorXd g(m.dimension());
  for (auto _ : state) benchmark::DoNotOptimize(m.log_density(q, &g));
  state.SetItemsProcessed(state.iterations() * sim.table.n_cells());
}
BENCHMARK(BM_PlmmGradient)->Args({3, 100})->Args({10, 100})->Args({10, 1000});

void BM_LlmmGradient(benchmark::State& state) {
  const int J = static_cast<int>(state.range(0));
  LlmmTruth t;
  for (int j = 0; j < J; ++j) t.markers.push_back("m" + std::to_string(j + 1));
  t.beta = Eigen::VectorXd::Constant(J + 1, 0.2);
  t.sigma_donor = Eigen::VectorXd::Constant(J + 1, 0.3);
  t.omega_donor = Eigen::MatrixXd::Identity(J + 1, J + 1);
  const auto sim = simulate_llmm(t, 8, static_cast<int>(state.range(1)), 2);
  const LlmmModel m(std::make_shared<const LlmmData>(sim.data));
  const Eigen::VectorXd q = random_point(m.dimension());
  Eigen::VectorXd g(m.dimension());
  for (auto _ : state) benchmark::DoNotOptimize(m.log_density(q, &g));
  state.SetItemsProcessed(state.iterations() * sim.data.n_cells());
}
BENCHMARK(BM_LlmmGradient)->Args({3, 100})->Args({10, 1000});

void BM_MomFit(benchmark::State& state) {
  LlmmTruth t;
  t.markers = {"a", "b", "c"};
  t.beta = Eigen::Vector4d(-0.5, 0.8, -0.6, 0.4);
  t.sigma_donor = Eigen::VectorXd::Constant(4, 0.3);
  t.omega_donor = Eigen::MatrixXd::Identity(4, 4);
  const auto sim = simulate_llmm(t, static_cast<int>(state.range(0)), 500, 3);
  MomOptions o;
  o.threads = 1;
  for (auto _ : state) benchmark::DoNotOptimize(llmm_mom_fit(sim.data, o));
}
BENCHMARK(BM_MomFit)->Arg(20)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
