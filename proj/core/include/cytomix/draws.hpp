#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "cytomix/sampler.hpp"

namespace cytomix {

/// One row of a posterior summary table.
struct QuantileSummary {
  std::string marker;
  std::string quantity;
  double median = 0.0;
  double q025 = 0.0;
  double q975 = 0.0;
};

/// Equal-tailed 95% interval and median of a sample.
QuantileSummary summarize_sample(std::vector<double> sample, std::string marker,
                                 std::string quantity);

/// Doubles formatted with 17 significant digits so files round-trip exactly
/// and identical runs give identical bytes.
std::string format_double(double x);

// Long-format draws: chain,iteration,parameter,value
void write_draws_csv(const PosteriorDraws& draws, std::ostream& out);
void write_draws_csv(const PosteriorDraws& draws, const std::filesystem::path& path);
PosteriorDraws read_draws_csv(std::istream& in);
PosteriorDraws read_draws_csv(const std::filesystem::path& path);

// parameter,rhat,ess
void write_diagnostics_csv(const PosteriorDraws& draws, const Diagnostics& diagnostics,
                           const std::filesystem::path& path);

// marker,quantity,median,q025,q975
void write_summary_csv(const std::vector<QuantileSummary>& rows, const std::filesystem::path& path);

/// Writes via a temporary file and rename.
void write_file_atomically(const std::filesystem::path& path, const std::string& contents);

}  // namespace cytomix
