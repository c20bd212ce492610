#include "cytomix/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "cytomix/diagnostics.hpp"
#include "cytomix/draws.hpp"
#include "cytomix/errors.hpp"
#include "cytomix/llmm.hpp"
#include "cytomix/random.hpp"

#ifndef CYTOMIX_VERSION
#define CYTOMIX_VERSION "0.0.0"
#endif

namespace cytomix {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kManifestSchema = "cytomix-manifest";

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!obj.is_object()) throw ConfigError("'" + where + "' must be a JSON object");
  for (const auto& item : obj.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return item.key() == a; });
    if (!known) {
      throw ConfigError("unknown key '" + (where.empty() ? "" : where + ".") + item.key() + "'");
    }
  }
}

template <typename T>
T field(const json& obj, const char* key, const std::string& where) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("field '" + (where.empty() ? "" : where + ".") + key +
                      "' has the wrong type");
  }
}

template <typename T>
void maybe(const json& obj, const char* key, const std::string& where, T& out) {
  if (obj.contains(key)) out = field<T>(obj, key, where);
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  if (path.empty() || path.is_absolute() || base.empty()) return path;
  return base / path;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string parameters_signature(const std::vector<std::string>& names) {
  std::string joined;
  for (const auto& n : names) joined += n + "\n";
  return sha256_hex(joined);
}

json json_number(double x) {
  if (std::isfinite(x)) return x;
  return nullptr;
}

json diagnostics_json(const Diagnostics& d) {
  json j;
  j["max_rhat"] = json_number(d.max_r_hat());
  double min_ess = std::numeric_limits<double>::infinity();
  for (Eigen::Index p = 0; p < d.ess.size(); ++p) {
    if (std::isfinite(d.ess[p])) min_ess = std::min(min_ess, d.ess[p]);
  }
  j["min_ess"] = json_number(min_ess);
  j["divergences"] = d.total_divergences();
  j["divergences_per_chain"] = d.divergences;
  j["accept_rate"] = d.accept_rate;
  j["step_size"] = d.step_size;
  j["leapfrog_steps"] = d.leapfrog_steps;
  j["convergence_warning"] = std::isfinite(d.max_r_hat()) && d.max_r_hat() > kRhatWarning;
  return j;
}

json base_manifest(const RunConfig& config, const std::string& command) {
  json m;
  m["schema"] = kManifestSchema;
  m["version"] = 1;
  m["command"] = command;
  m["software_version"] = version();
  m["config"] = json::parse(config.to_json());
  if (!config.input.empty() && fs::exists(config.input)) {
    m["input_sha256"] = sha256_file(config.input);
  }
  json seeds;
  seeds["master"] = config.seed;
  std::vector<std::uint64_t> chains;
  for (int k = 0; k < config.sampler.chains; ++k) {
    chains.push_back(split_seed(config.seed, static_cast<std::uint64_t>(k)));
  }
  seeds["chains"] = chains;
  m["seeds"] = seeds;
  return m;
}

void write_manifest(const json& m, const fs::path& path) {
  write_file_atomically(path, m.dump(2) + "\n");
}

json read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open manifest '" + path.string() + "'; run a fit first");
  try {
    json m = json::parse(in);
    if (m.at("schema") != kManifestSchema) throw SchemaError("not a cytomix manifest");
    return m;
  } catch (const json::exception& e) {
    throw SchemaError("manifest '" + path.string() + "': " + e.what());
  }
}

// Draws plus the manifest of the fit that produced them, checked against
// each other.
struct FitRecord {
  json manifest;
  PosteriorDraws draws;
  std::string model;
  std::vector<std::string> markers;
};

FitRecord load_fit(const RunConfig& config) {
  const fs::path draws_path = config.draws_path();
  FitRecord r;
  r.manifest = read_manifest(draws_path.parent_path() / "manifest.json");
  r.draws = read_draws_csv(draws_path);
  try {
    r.model = r.manifest.at("model").get<std::string>();
    r.markers = r.manifest.at("markers").get<std::vector<std::string>>();
    if (parameters_signature(r.draws.names) != r.manifest.at("parameters_sha256")) {
      throw ConfigError("draws file '" + draws_path.string() +
                        "' does not match the manifest's model signature");
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("manifest: ") + e.what());
  }
  if (r.draws.num_draws() == 0) throw ValidationError("draws file holds no draws");
  return r;
}

Diagnostics recompute_diagnostics(const PosteriorDraws& draws) {
  Diagnostics d;
  d.r_hat = draws.num_chains() >= 2
                ? compute_rhat(draws)
                : Eigen::VectorXd::Constant(draws.num_params(), std::nan(""));
  d.ess = compute_ess(draws);
  return d;
}

void warn_convergence(const Diagnostics& d, std::ostream& log) {
  const double r = d.max_r_hat();
  if (std::isfinite(r) && r > kRhatWarning) {
    log << "warning: max R-hat " << format_double(r) << " exceeds " << kRhatWarning
        << "; chains may not have converged\n";
  }
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json subset_json(const SubsetSpec& s) {
  json terms = json::array();
  for (const auto& [m, p] : s.terms) terms.push_back({m, to_string(p)});
  return {{"name", s.name}, {"terms", terms}};
}

}  // namespace

std::string version() { return CYTOMIX_VERSION; }

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return sha256_hex(s.str());
}

// RunConfig

RunConfig RunConfig::parse(const std::string& text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j,
             {"input", "output_dir", "draws", "schema", "celltype", "markers", "exclude_markers",
              "cofactor", "model", "subsample", "seed", "sampler", "checkpoint", "ppc", "simulate"},
             "");
  RunConfig c;
  if (j.contains("input")) c.input = resolve(base_dir, field<std::string>(j, "input", ""));
  if (j.contains("output_dir")) {
    c.output_dir = resolve(base_dir, field<std::string>(j, "output_dir", ""));
  }
  if (j.contains("draws")) c.draws = resolve(base_dir, field<std::string>(j, "draws", ""));
  if (j.contains("schema")) {
    const json& s = j["schema"];
    check_keys(s, {"donor_column", "condition_column", "celltype_column", "roles", "reference_level"},
               "schema");
    maybe(s, "donor_column", "schema", c.schema.donor_column);
    maybe(s, "condition_column", "schema", c.schema.condition_column);
    maybe(s, "celltype_column", "schema", c.schema.celltype_column);
    if (s.contains("reference_level")) {
      c.schema.reference_level = field<std::string>(s, "reference_level", "schema");
    }
    if (s.contains("roles")) {
      const auto roles = field<std::map<std::string, std::string>>(s, "roles", "schema");
      for (const auto& [marker, role] : roles) {
        try {
          c.schema.roles[marker] = marker_role_from_string(role);
        } catch (const Error&) {
          throw ConfigError("schema.roles." + marker + ": role must be 'gating' or 'functional'");
        }
      }
    }
  }
  if (j.contains("celltype")) c.celltype = field<std::string>(j, "celltype", "");
  maybe(j, "markers", "", c.markers);
  maybe(j, "exclude_markers", "", c.exclude_markers);
  maybe(j, "cofactor", "", c.cofactor);
  maybe(j, "model", "", c.model);
  maybe(j, "subsample", "", c.subsample);
  maybe(j, "seed", "", c.seed);
  if (j.contains("sampler")) {
    const json& s = j["sampler"];
    check_keys(s,
               {"chains", "iterations", "warmup", "target_accept", "max_leapfrog_steps",
                "mass_matrix", "integration_time", "initial_step_size", "threads"},
               "sampler");
    auto& sc = c.sampler;
    maybe(s, "chains", "sampler", sc.chains);
    maybe(s, "iterations", "sampler", sc.iterations);
    maybe(s, "warmup", "sampler", sc.warmup);
    maybe(s, "target_accept", "sampler", sc.target_accept);
    maybe(s, "max_leapfrog_steps", "sampler", sc.max_leapfrog_steps);
    maybe(s, "integration_time", "sampler", sc.integration_time);
    maybe(s, "initial_step_size", "sampler", sc.initial_step_size);
    maybe(s, "threads", "sampler", sc.threads);
    if (s.contains("mass_matrix")) {
      const auto m = field<std::string>(s, "mass_matrix", "sampler");
      if (m == "diagonal") {
        sc.mass_matrix = MassMatrix::diagonal;
      } else if (m == "identity") {
        sc.mass_matrix = MassMatrix::identity;
      } else {
        throw ConfigError("sampler.mass_matrix must be 'diagonal' or 'identity'");
      }
    }
  }
  if (j.contains("checkpoint")) {
    const json& s = j["checkpoint"];
    check_keys(s, {"every", "resume"}, "checkpoint");
    maybe(s, "every", "checkpoint", c.checkpoint_every);
    maybe(s, "resume", "checkpoint", c.resume);
  }
  if (j.contains("ppc")) {
    const json& s = j["ppc"];
    check_keys(s, {"n_rep", "redraw_donor_effects", "subsets"}, "ppc");
    maybe(s, "n_rep", "ppc", c.ppc.n_rep);
    maybe(s, "redraw_donor_effects", "ppc", c.ppc.redraw_donor_effects);
    if (s.contains("subsets")) {
      if (!s["subsets"].is_array()) throw ConfigError("ppc.subsets must be an array");
      for (const auto& sub : s["subsets"]) {
        check_keys(sub, {"name", "terms"}, "ppc.subsets[]");
        SubsetSpec spec;
        spec.name = field<std::string>(sub, "name", "ppc.subsets[]");
        const auto terms =
            field<std::vector<std::pair<std::string, std::string>>>(sub, "terms", "ppc.subsets[]");
        for (const auto& [marker, pred] : terms) {
          spec.terms.emplace_back(marker, subset_predicate_from_string(pred));
        }
        c.ppc.subsets.push_back(std::move(spec));
      }
    }
  }
  if (j.contains("simulate")) {
    json s = j["simulate"];
    if (!s.is_object()) throw ConfigError("'simulate' must be a JSON object");
    const auto kind = s.contains("kind") ? field<std::string>(s, "kind", "simulate") : "";
    if (kind == "plmm") {
      check_keys(s,
                 {"kind", "markers", "condition_levels", "beta", "sigma_cond1", "sigma_cond2",
                  "sigma_donor", "omega_cond1", "omega_cond2", "omega_donor", "donors",
                  "cells_per_condition"},
                 "simulate");
      if (!s.contains("condition_levels")) {
        const auto levels = PlmmTruth{}.condition_levels;
        s["condition_levels"] = {levels[0], levels[1]};
      }
    } else if (kind == "dag") {
      check_keys(s,
                 {"kind", "dag", "a", "b", "c", "noise1", "noise2", "cells_per_donor", "donors",
                  "donor_scale", "cofactor"},
                 "simulate");
      if (!s.contains("cofactor")) s["cofactor"] = c.cofactor;
    } else {
      throw ConfigError("simulate.kind must be 'plmm' or 'dag'");
    }
    s["schema"] = "cytomix-truth";
    s["version"] = 1;
    s["seed"] = c.seed;
    try {
      c.simulate = truth_from_json(s.dump());
    } catch (const SchemaError& e) {
      throw ConfigError(std::string("simulate: ") + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open config '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return parse(s.str(), path.parent_path());
}

std::string RunConfig::to_json() const {
  json j;
  j["input"] = input.string();
  j["output_dir"] = output_dir.string();
  if (!draws.empty()) j["draws"] = draws.string();
  json roles = json::object();
  for (const auto& [m, r] : schema.roles) roles[m] = to_string(r);
  j["schema"] = {{"donor_column", schema.donor_column},
                 {"condition_column", schema.condition_column},
                 {"celltype_column", schema.celltype_column},
                 {"roles", roles}};
  if (schema.reference_level) j["schema"]["reference_level"] = *schema.reference_level;
  if (celltype) j["celltype"] = *celltype;
  j["markers"] = markers;
  j["exclude_markers"] = exclude_markers;
  j["cofactor"] = cofactor;
  j["model"] = model;
  j["subsample"] = subsample;
  j["seed"] = seed;
  j["sampler"] = {{"chains", sampler.chains},
                  {"iterations", sampler.iterations},
                  {"warmup", sampler.warmup},
                  {"target_accept", sampler.target_accept},
                  {"max_leapfrog_steps", sampler.max_leapfrog_steps},
                  {"mass_matrix", sampler.mass_matrix == MassMatrix::diagonal ? "diagonal" : "identity"},
                  {"integration_time", sampler.integration_time},
                  {"initial_step_size", sampler.initial_step_size},
                  {"threads", sampler.threads}};
  j["checkpoint"] = {{"every", checkpoint_every}, {"resume", resume}};
  json subsets = json::array();
  for (const auto& s : ppc.subsets) subsets.push_back(subset_json(s));
  j["ppc"] = {{"n_rep", ppc.n_rep},
              {"redraw_donor_effects", ppc.redraw_donor_effects},
              {"subsets", subsets}};
  if (simulate) {
    json s = json::parse(truth_to_json(*simulate));
    s.erase("schema");
    s.erase("version");
    s.erase("seed");
    j["simulate"] = s;
  }
  return j.dump(2);
}

void RunConfig::validate() const {
  if (model != "plmm" && model != "llmm" && model != "llmm-mom") {
    throw ConfigError("model must be 'plmm', 'llmm' or 'llmm-mom'");
  }
  if (!(cofactor > 0.0) || !std::isfinite(cofactor)) throw ConfigError("cofactor must be > 0");
  if (subsample < 0) throw ConfigError("subsample must be >= 0 (0 keeps all cells)");
  if (checkpoint_every < 0) throw ConfigError("checkpoint.every must be >= 0");
  if (ppc.n_rep < 1) throw ConfigError("ppc.n_rep must be >= 1");
  for (const auto& s : ppc.subsets) {
    if (s.terms.empty()) throw ConfigError("ppc subset '" + s.name + "' has no terms");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  sampler.validate();
  if (simulate) {
    try {
      if (simulate->plmm) simulate->plmm->validate();
      if (simulate->dag) simulate->dag->validate();
      if (simulate->plmm && (simulate->layout.donors < 1 || simulate->layout.cells_per_condition < 1)) {
        throw ParameterError("donors and cells_per_condition must be >= 1");
      }
    } catch (const ParameterError& e) {
      throw ConfigError(std::string("simulate: ") + e.what());
    }
  }
}

fs::path RunConfig::draws_path() const {
  return draws.empty() ? output_dir / "draws.csv" : draws;
}

CellTable ingest(const RunConfig& config) {
  if (config.input.empty()) throw ConfigError("'input' is required for this command");
  CellTable table = load_csv(config.input, config.schema);
  if (config.celltype) table = filter_celltype(table, *config.celltype);
  if (config.subsample > 0) table = subsample_per_donor(table, config.subsample, config.seed);
  return table;
}

std::vector<std::string> resolve_markers(const CellTable& table, const RunConfig& config) {
  std::vector<std::string> markers =
      config.markers.empty() ? table.functional_marker_names() : config.markers;
  std::set<std::string> seen;
  for (const auto& m : markers) {
    table.marker_index(m);
    if (!seen.insert(m).second) throw ConfigError("marker '" + m + "' listed twice");
  }
  for (const auto& m : config.exclude_markers) {
    if (std::find(markers.begin(), markers.end(), m) == markers.end()) {
      throw NotFoundError("cannot exclude '" + m + "': not among the modeled markers");
    }
  }
  std::erase_if(markers, [&](const std::string& m) {
    return std::find(config.exclude_markers.begin(), config.exclude_markers.end(), m) !=
           config.exclude_markers.end();
  });
  if (markers.empty()) throw ConfigError("no markers left to model");
  return markers;
}

// Commands

std::string cmd_validate(const RunConfig& config) {
  config.validate();
  std::ostringstream r;
  r << "config: ok (model " << config.model << ")\n";
  if (config.simulate) r << "simulate: ok\n";
  if (config.input.empty()) return r.str();
  const CellTable table = ingest(config);
  const auto markers = resolve_markers(table, config);
  r << "input: " << config.input.string() << "\n"
    << "cells: " << table.n_cells() << "\n"
    << "donors: " << table.donor_levels().size() << "\n"
    << "conditions: " << table.condition_levels()[0] << " (reference), "
    << table.condition_levels()[1] << "\n"
    << "paired: " << (table.paired() ? "yes" : "no") << "\n"
    << "markers:";
  for (const auto& m : markers) r << ' ' << m;
  r << "\n";
  if ((config.model == "llmm" || config.model == "llmm-mom") && !table.paired()) {
    throw PairingError("LLMM is limited to paired samples: every donor needs cells in both conditions");
  }
  return r.str();
}

void cmd_simulate(const RunConfig& config, std::ostream& log) {
  if (!config.simulate) throw ConfigError("'simulate' section is required for simulate");
  const auto t0 = std::chrono::steady_clock::now();
  GroundTruth truth = *config.simulate;
  truth.seed = config.seed;
  const CellTable table = resimulate(truth);
  const fs::path cells = config.output_dir / "cells.csv";
  const fs::path truth_path = config.output_dir / "truth.json";
  std::ostringstream csv;
  write_csv(table, csv);
  write_file_atomically(cells, csv.str());
  write_truth(truth, truth_path);
  if (truth.dag) {
    log << "note: DAG counts come from an inverse arcsinh with rounding; they only approximate "
           "the transformed values\n";
  }
  json m = base_manifest(config, "simulate");
  m["outputs"] = {cells.filename().string(), truth_path.filename().string()};
  m["output_sha256"] = {{"cells.csv", sha256_hex(csv.str())}};
  m["timings_seconds"] = {{"total", seconds_since(t0)}};
  write_manifest(m, config.output_dir / "manifest.json");
  log << "wrote " << table.n_cells() << " cells to " << cells.string() << "\n";
}

namespace {

void finish_fit(const RunConfig& config, const Model& model, const SamplerResult& res,
                const std::vector<std::string>& markers, const std::vector<std::string>& extra_warnings,
                std::chrono::steady_clock::time_point t0, double sample_seconds, std::ostream& log) {
  const fs::path draws_path = config.output_dir / "draws.csv";
  write_draws_csv(res.draws, draws_path);
  write_diagnostics_csv(res.draws, res.diagnostics, config.output_dir / "diagnostics.csv");
  json m = base_manifest(config, "fit-" + config.model);
  m["model"] = config.model;
  m["markers"] = markers;
  m["parameters_sha256"] = parameters_signature(model.output_names());
  m["draws"] = {{"chains", config.sampler.chains},
                {"per_chain", config.sampler.draws_per_chain()},
                {"total", res.draws.num_draws()}};
  m["diagnostics"] = diagnostics_json(res.diagnostics);
  m["warnings"] = extra_warnings;
  m["outputs"] = {"draws.csv", "diagnostics.csv"};
  m["timings_seconds"] = {{"sampling", sample_seconds}, {"total", seconds_since(t0)}};
  write_manifest(m, config.output_dir / "manifest.json");
  warn_convergence(res.diagnostics, log);
  if (res.diagnostics.total_divergences() > 0) {
    log << "warning: " << res.diagnostics.total_divergences()
        << " divergent transitions after warmup\n";
  }
  log << "wrote " << res.draws.num_draws() << " draws of " << res.draws.num_params()
      << " quantities to " << draws_path.string() << "\n";
}

std::optional<CheckpointOptions> checkpoint_options(const RunConfig& config) {
  if (config.checkpoint_every == 0 && !config.resume) return std::nullopt;
  return CheckpointOptions{config.output_dir / "checkpoints", config.checkpoint_every, config.resume};
}

}  // namespace

void cmd_fit(const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto table = std::make_shared<const CellTable>(ingest(config));
  const auto markers = resolve_markers(*table, config);
  SamplerConfig sc = config.sampler;
  sc.seed = config.seed;

  if (config.model == "plmm") {
    const auto data = std::make_shared<const PlmmData>(PlmmData::from_table(*table, markers));
    const PlmmModel model(data);
    const PlmmInit init = plmm_init(model, sc.chains, config.seed);
    for (const auto& w : init.warnings) log << "warning: " << w << "\n";
    const auto ts = std::chrono::steady_clock::now();
    const SamplerResult res = run_chains(model, sc, init.inits, checkpoint_options(config));
    finish_fit(config, model, res, markers, init.warnings, t0, seconds_since(ts), log);
    return;
  }

  const TransformedTable transformed = arcsinh_transform(table, config.cofactor);
  const LlmmData data = LlmmData::from_table(transformed, markers, true);
  if (config.model == "llmm") {
    const LlmmModel model(std::make_shared<const LlmmData>(data));
    const auto inits = llmm_init(model, sc.chains, config.seed);
    const auto ts = std::chrono::steady_clock::now();
    const SamplerResult res = run_chains(model, sc, inits, checkpoint_options(config));
    finish_fit(config, model, res, markers, {}, t0, seconds_since(ts), log);
    return;
  }

  MomOptions opts;
  opts.threads = sc.threads;
  const MomEstimate est = llmm_mom_fit(data, opts);
  for (const auto& w : est.warnings) log << "warning: " << w << "\n";
  std::ostringstream s;
  s << "marker,quantity,median,q025,q975,method,flags\n";
  for (const auto& r : est.summary()) {
    s << quote_csv(r.marker) << ',' << r.quantity << ',' << format_double(r.median) << ','
      << format_double(r.q025) << ',' << format_double(r.q975) << ",mom," << est.flags() << '\n';
  }
  write_file_atomically(config.output_dir / "mom_summary.csv", s.str());
  std::ostringstream cov;
  cov << "coefficient_i,coefficient_j,covariance\n";
  for (std::size_t i = 0; i < est.coefficients.size(); ++i) {
    for (std::size_t j = 0; j < est.coefficients.size(); ++j) {
      cov << quote_csv(est.coefficients[i]) << ',' << quote_csv(est.coefficients[j]) << ','
          << format_double(est.cov_hat(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)))
          << '\n';
    }
  }
  write_file_atomically(config.output_dir / "mom_covariance.csv", cov.str());
  json m = base_manifest(config, "fit-llmm-mom");
  m["model"] = "llmm-mom";
  m["markers"] = markers;
  m["flags"] = est.flags();
  m["dropped_donors"] = est.dropped_donors;
  m["warnings"] = est.warnings;
  m["outputs"] = {"mom_summary.csv", "mom_covariance.csv"};
  m["timings_seconds"] = {{"total", seconds_since(t0)}};
  write_manifest(m, config.output_dir / "manifest.json");
  log << "wrote method-of-moments estimates for " << est.coefficients.size()
      << " coefficients from " << est.donor_fits.size() << " donors\n";
}

void cmd_ppc(const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const FitRecord fit = load_fit(config);
  if (fit.model != "plmm") throw ConfigError("ppc applies to plmm fits; the draws come from " + fit.model);
  const CellTable table = ingest(config);
  const PlmmData data = PlmmData::from_table(table, fit.markers);

  std::vector<SubsetSpec> subsets = config.ppc.subsets;
  if (subsets.empty()) {
    for (auto& s : signaling_subsets()) {
      const bool ok = std::all_of(s.terms.begin(), s.terms.end(), [&](const auto& t) {
        return std::find(fit.markers.begin(), fit.markers.end(), t.first) != fit.markers.end();
      });
      if (ok) {
        subsets.push_back(std::move(s));
      } else {
        log << "warning: skipping subset " << s.name << ": its markers are not all modeled\n";
      }
    }
    if (subsets.empty()) {
      throw ConfigError("none of the default PPC subsets apply to the modeled markers; set ppc.subsets");
    }
  }
  const auto results =
      posterior_predictive(fit.draws, data, subsets, config.ppc.n_rep, config.seed,
                           config.ppc.redraw_donor_effects, config.sampler.threads);
  std::ostringstream s;
  s << "stat_name,observed,rep_index,replicated\n";
  for (const auto& r : results) {
    for (std::size_t k = 0; k < r.replicated.size(); ++k) {
      s << quote_csv(r.stat_name) << ',' << format_double(r.observed) << ',' << k + 1 << ','
        << format_double(r.replicated[k]) << '\n';
    }
    log << "subset " << r.stat_name << ": observed " << format_double(r.observed) << ", "
        << (r.observed_in_central_interval(0.95) ? "inside" : "outside")
        << " the central 95% of replicates\n";
  }
  write_file_atomically(config.output_dir / "ppc.csv", s.str());
  json m = base_manifest(config, "ppc");
  m["draws_sha256"] = sha256_file(config.draws_path());
  m["outputs"] = {"ppc.csv"};
  m["timings_seconds"] = {{"total", seconds_since(t0)}};
  write_manifest(m, config.output_dir / "manifest-ppc.json");
}

void cmd_summarize(const RunConfig& config, std::ostream& log) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const FitRecord fit = load_fit(config);
  const Diagnostics diag = recompute_diagnostics(fit.draws);
  warn_convergence(diag, log);
  std::vector<std::string> outputs{"summary.csv"};
  if (fit.model == "plmm") {
    auto rows = fixed_effect_summary(fit.draws, fit.markers);
    const auto scales = scale_summary(fit.draws, fit.markers);
    rows.insert(rows.end(), scales.begin(), scales.end());
    write_summary_csv(rows, config.output_dir / "summary.csv");

    const auto inc = corr_increase_probability(fit.draws, fit.markers);
    std::ostringstream p;
    p << "marker_i,marker_j,p_hat\n";
    const auto J = static_cast<Eigen::Index>(fit.markers.size());
    for (Eigen::Index i = 0; i < J; ++i) {
      for (Eigen::Index j = i + 1; j < J; ++j) {
        p << quote_csv(fit.markers[static_cast<std::size_t>(i)]) << ','
          << quote_csv(fit.markers[static_cast<std::size_t>(j)]) << ','
          << format_double(inc.p_hat(i, j)) << '\n';
      }
    }
    write_file_atomically(config.output_dir / "corr_increase.csv", p.str());
    std::ostringstream h;
    h << "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < inc.bin_counts.size(); ++b) {
      h << format_double(inc.bin_edges[b]) << ',' << format_double(inc.bin_edges[b + 1]) << ','
        << inc.bin_counts[b] << '\n';
    }
    write_file_atomically(config.output_dir / "corr_increase_hist.csv", h.str());
    std::ostringstream c;
    c << "block,marker_i,marker_j,median\n";
    for (const char* block : {"cond1", "cond2", "donor"}) {
      const Eigen::MatrixXd med = correlation_median(fit.draws, fit.markers, block);
      for (Eigen::Index i = 0; i < J; ++i) {
        for (Eigen::Index j = 0; j < J; ++j) {
          c << block << ',' << quote_csv(fit.markers[static_cast<std::size_t>(i)]) << ','
            << quote_csv(fit.markers[static_cast<std::size_t>(j)]) << ','
            << format_double(med(i, j)) << '\n';
        }
      }
    }
    write_file_atomically(config.output_dir / "correlations.csv", c.str());
    outputs.insert(outputs.end(), {"corr_increase.csv", "corr_increase_hist.csv", "correlations.csv"});
  } else if (fit.model == "llmm") {
    std::vector<std::string> coefs{kInterceptName};
    coefs.insert(coefs.end(), fit.markers.begin(), fit.markers.end());
    write_summary_csv(llmm_fixed_effect_summary(fit.draws, coefs), config.output_dir / "summary.csv");
  } else {
    throw ConfigError("summarize needs posterior draws; " + fit.model + " fits have none");
  }
  json m = base_manifest(config, "summarize");
  m["draws_sha256"] = sha256_file(config.draws_path());
  m["diagnostics"] = diagnostics_json(diag);
  m["outputs"] = outputs;
  m["timings_seconds"] = {{"total", seconds_since(t0)}};
  write_manifest(m, config.output_dir / "manifest-summarize.json");
  log << "wrote summaries to " << config.output_dir.string() << "\n";
}

void cmd_diagnostics(const RunConfig& config, std::ostream& log) {
  config.validate();
  const PosteriorDraws draws = read_draws_csv(config.draws_path());
  if (draws.num_draws() == 0) throw ValidationError("draws file holds no draws");
  const Diagnostics diag = recompute_diagnostics(draws);
  write_diagnostics_csv(draws, diag, config.output_dir / "diagnostics.csv");
  double min_ess = std::numeric_limits<double>::infinity();
  for (Eigen::Index p = 0; p < diag.ess.size(); ++p) {
    if (std::isfinite(diag.ess[p])) min_ess = std::min(min_ess, diag.ess[p]);
  }
  log << "chains: " << draws.num_chains() << ", draws: " << draws.num_draws()
      << ", parameters: " << draws.num_params() << "\n"
      << "max R-hat: " << format_double(diag.max_r_hat()) << "\n"
      << "min ESS: " << format_double(min_ess) << "\n";
  warn_convergence(diag, log);
}

}  // namespace cytomix
