// cytomix: fit and check hierarchical models of single-cell count data.
//
// Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure,
// 3 reserved for fatal convergence failures.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cytomix/errors.hpp"
#include "cytomix/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::string> input, output_dir, draws, celltype, reference_level;
  std::optional<std::uint64_t> seed;
  std::optional<int> chains, iterations, warmup, threads, checkpoint_every, n_rep;
  std::optional<double> cofactor, integration_time, target_accept;
  std::optional<std::int64_t> subsample;
  std::vector<std::string> markers, exclude;
  bool resume = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--input", o.input, "input cell table (CSV)");
  cmd->add_option("-o,--output-dir", o.output_dir, "output directory");
  cmd->add_option("--seed", o.seed, "master random seed");
  cmd->add_option("--celltype", o.celltype, "keep only this cell type");
  cmd->add_option("--reference-level", o.reference_level, "reference condition level");
  cmd->add_option("--markers", o.markers, "markers to model (default: functional markers)");
  cmd->add_option("--exclude", o.exclude, "markers to drop from the model");
  cmd->add_option("--cofactor", o.cofactor, "arcsinh cofactor");
  cmd->add_option("--subsample", o.subsample, "cells kept per donor and condition (0 = all)");
  cmd->add_option("--threads", o.threads, "worker threads");
}

void add_sampler(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--chains", o.chains, "number of chains");
  cmd->add_option("--iterations", o.iterations, "iterations per chain, warmup included");
  cmd->add_option("--warmup", o.warmup, "warmup iterations per chain");
  cmd->add_option("--integration-time", o.integration_time, "nominal trajectory length");
  cmd->add_option("--target-accept", o.target_accept, "step-size adaptation target");
  cmd->add_option("--checkpoint-every", o.checkpoint_every, "iterations between checkpoints");
  cmd->add_flag("--resume", o.resume, "resume from checkpoints in the output directory");
}

cytomix::RunConfig build_config(const Overrides& o, const std::string& model) {
  cytomix::RunConfig c = o.config.empty() ? cytomix::RunConfig{} : cytomix::RunConfig::load(o.config);
  if (!model.empty()) c.model = model;
  if (o.input) c.input = *o.input;
  if (o.output_dir) c.output_dir = *o.output_dir;
  if (o.draws) c.draws = *o.draws;
  if (o.celltype) c.celltype = *o.celltype;
  if (o.reference_level) c.schema.reference_level = *o.reference_level;
  if (o.seed) c.seed = *o.seed;
  if (!o.markers.empty()) c.markers = o.markers;
  if (!o.exclude.empty()) c.exclude_markers = o.exclude;
  if (o.cofactor) c.cofactor = *o.cofactor;
  if (o.subsample) c.subsample = *o.subsample;
  if (o.threads) c.sampler.threads = *o.threads;
  if (o.chains) c.sampler.chains = *o.chains;
  if (o.iterations) c.sampler.iterations = *o.iterations;
  if (o.warmup) c.sampler.warmup = *o.warmup;
  if (o.integration_time) c.sampler.integration_time = *o.integration_time;
  if (o.target_accept) c.sampler.target_accept = *o.target_accept;
  if (o.checkpoint_every) c.checkpoint_every = *o.checkpoint_every;
  if (o.resume) c.resume = true;
  if (o.n_rep) c.ppc.n_rep = *o.n_rep;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian mixed models for mass cytometry counts"};
  app.set_version_flag("--version", cytomix::version());
  app.require_subcommand(1);
  Overrides o;

  auto* validate = app.add_subcommand("validate", "check configuration and input");
  add_common(validate, o);
  auto* simulate = app.add_subcommand("simulate", "simulate a cell table from the config");
  add_common(simulate, o);
  auto* fit_plmm = app.add_subcommand("fit-plmm", "fit the Poisson log-normal mixed model");
  auto* fit_llmm = app.add_subcommand("fit-llmm", "fit the logistic linear mixed model with HMC");
  auto* fit_mom = app.add_subcommand("fit-llmm-mom", "method-of-moments logistic mixed model");
  for (auto* cmd : {fit_plmm, fit_llmm, fit_mom}) add_common(cmd, o);
  add_sampler(fit_plmm, o);
  add_sampler(fit_llmm, o);
  auto* ppc = app.add_subcommand("ppc", "posterior predictive checks for a PLMM fit");
  auto* summarize = app.add_subcommand("summarize", "posterior summaries and plot data");
  auto* diagnostics = app.add_subcommand("diagnostics", "R-hat and ESS for a draws file");
  for (auto* cmd : {ppc, summarize, diagnostics}) {
    add_common(cmd, o);
    cmd->add_option("--draws", o.draws, "draws file (default: <output-dir>/draws.csv)");
  }
  ppc->add_option("--n-rep", o.n_rep, "replicated datasets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (validate->parsed()) {
      std::cout << cytomix::cmd_validate(build_config(o, ""));
    } else if (simulate->parsed()) {
      cytomix::cmd_simulate(build_config(o, ""), std::cerr);
    } else if (fit_plmm->parsed()) {
      cytomix::cmd_fit(build_config(o, "plmm"), std::cerr);
    } else if (fit_llmm->parsed()) {
      cytomix::cmd_fit(build_config(o, "llmm"), std::cerr);
    } else if (fit_mom->parsed()) {
      cytomix::cmd_fit(build_config(o, "llmm-mom"), std::cerr);
    } else if (ppc->parsed()) {
      cytomix::cmd_ppc(build_config(o, ""), std::cerr);
    } else if (summarize->parsed()) {
      cytomix::cmd_summarize(build_config(o, ""), std::cerr);
    } else if (diagnostics->parsed()) {
      cytomix::cmd_diagnostics(build_config(o, ""), std::cerr);
    }
  } catch (const cytomix::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
