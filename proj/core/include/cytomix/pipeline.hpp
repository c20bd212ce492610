#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cytomix/data_model.hpp"
#include "cytomix/plmm.hpp"
#include "cytomix/sampler.hpp"
#include "cytomix/simgen.hpp"

namespace cytomix {

/// Library version string.
std::string version();

/// Hex SHA-256 of a byte string or a file's contents.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

struct PpcSettings {
  int n_rep = 100;
  bool redraw_donor_effects = false;
  /// Empty means the four signaling subsets.
  std::vector<SubsetSpec> subsets;
};

/// One run's configuration. Read from a JSON file whose unknown keys are
/// rejected; relative paths resolve against the file's directory.
struct RunConfig {
  std::filesystem::path input;
  std::filesystem::path output_dir = "cytomix-out";
  /// Draws consumed by ppc, summarize and diagnostics; defaults to
  /// output_dir/draws.csv.
  std::filesystem::path draws;
  CsvSchema schema;
  std::optional<std::string> celltype;
  /// Modeled markers; empty means all functional markers.
  std::vector<std::string> markers;
  std::vector<std::string> exclude_markers;
  double cofactor = kDefaultCofactor;
  /// plmm, llmm or llmm-mom.
  std::string model = "plmm";
  /// Cells kept per donor and condition; 0 keeps everything.
  std::int64_t subsample = 0;
  std::uint64_t seed = 1;
  SamplerConfig sampler;
  int checkpoint_every = 0;
  bool resume = false;
  PpcSettings ppc;
  /// Settings for `simulate`.
  std::optional<GroundTruth> simulate;

  /// Throws ConfigError (or SchemaError for malformed JSON).
  static RunConfig parse(const std::string& json_text,
                         const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);

  /// Canonical JSON form; parse(to_json()) reproduces the config.
  std::string to_json() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;

  std::filesystem::path draws_path() const;
};

/// Cell table after loading, cell-type filtering and subsampling.
CellTable ingest(const RunConfig& config);

/// Modeled markers after exclusions; throws for unknown names.
std::vector<std::string> resolve_markers(const CellTable& table, const RunConfig& config);

// Commands. Each writes its files under config.output_dir and logs
// progress and warnings to `log`.

/// Checks configuration and input; returns a short human-readable report.
std::string cmd_validate(const RunConfig& config);
void cmd_simulate(const RunConfig& config, std::ostream& log);
/// Fits config.model and writes draws.csv, diagnostics.csv and manifest.json
/// (or mom_summary.csv for llmm-mom).
void cmd_fit(const RunConfig& config, std::ostream& log);
void cmd_ppc(const RunConfig& config, std::ostream& log);
void cmd_summarize(const RunConfig& config, std::ostream& log);
void cmd_diagnostics(const RunConfig& config, std::ostream& log);

/// R-hat above this prints a convergence warning.
inline constexpr double kRhatWarning = 1.05;

}  // namespace cytomix
