#include "cytomix/draws.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "cytomix/diagnostics.hpp"
#include "cytomix/errors.hpp"

namespace cytomix {

QuantileSummary summarize_sample(std::vector<double> sample, std::string marker,
                                 std::string quantity) {
  std::sort(sample.begin(), sample.end());
  return {std::move(marker), std::move(quantity), quantile_sorted(sample, 0.5),
          quantile_sorted(sample, 0.025), quantile_sorted(sample, 0.975)};
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_draws_csv(const PosteriorDraws& draws, std::ostream& out) {
  out << "chain,iteration,parameter,value\n";
  for (Eigen::Index k = 0; k < draws.num_draws(); ++k) {
    const auto u = static_cast<std::size_t>(k);
    for (Eigen::Index p = 0; p < draws.num_params(); ++p) {
      out << draws.chain[u] << ',' << draws.iteration[u] << ','
          << draws.names[static_cast<std::size_t>(p)] << ',' << format_double(draws.values(k, p))
          << '\n';
    }
  }
}

void write_draws_csv(const PosteriorDraws& draws, const std::filesystem::path& path) {
  std::ostringstream s;
  write_draws_csv(draws, s);
  write_file_atomically(path, s.str());
}

PosteriorDraws read_draws_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("draws file is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "chain,iteration,parameter,value") {
    throw SchemaError("draws file header must be 'chain,iteration,parameter,value'");
  }
  std::map<std::string, std::size_t> index;
  PosteriorDraws d;
  std::map<std::pair<int, int>, std::size_t> rows;
  std::vector<std::vector<double>> values;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    const auto c3 = line.rfind(',');
    if (c1 == std::string::npos || c2 == std::string::npos || c3 <= c2) {
      throw ValidationError(lineno - 1, "malformed draws line");
    }
    const int chain = std::stoi(line.substr(0, c1));
    const int iter = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
    const std::string name = line.substr(c2 + 1, c3 - c2 - 1);
    const double value = std::strtod(line.c_str() + c3 + 1, nullptr);
    auto [pit, pnew] = index.try_emplace(name, d.names.size());
    if (pnew) d.names.push_back(name);
    auto [rit, rnew] = rows.try_emplace({chain, iter}, values.size());
    if (rnew) {
      values.emplace_back();
      d.chain.push_back(chain);
      d.iteration.push_back(iter);
    }
    auto& row = values[rit->second];
    if (row.size() <= pit->second) row.resize(pit->second + 1, std::nan(""));
    row[pit->second] = value;
  }
  d.values.resize(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(d.names.size()));
  for (std::size_t r = 0; r < values.size(); ++r) {
    if (values[r].size() != d.names.size()) {
      throw SchemaError("draws file: chain " + std::to_string(d.chain[r]) + " iteration " +
                        std::to_string(d.iteration[r]) + " is missing parameters");
    }
    for (std::size_t p = 0; p < d.names.size(); ++p) {
      d.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(p)) = values[r][p];
    }
  }
  return d;
}

PosteriorDraws read_draws_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open draws file '" + path.string() + "'");
  return read_draws_csv(in);
}

void write_diagnostics_csv(const PosteriorDraws& draws, const Diagnostics& diagnostics,
                           const std::filesystem::path& path) {
  std::ostringstream s;
  s << "parameter,rhat,ess\n";
  for (Eigen::Index p = 0; p < draws.num_params(); ++p) {
    s << draws.names[static_cast<std::size_t>(p)] << ',' << format_double(diagnostics.r_hat[p])
      << ',' << format_double(diagnostics.ess[p]) << '\n';
  }
  write_file_atomically(path, s.str());
}

void write_summary_csv(const std::vector<QuantileSummary>& rows, const std::filesystem::path& path) {
  std::ostringstream s;
  s << "marker,quantity,median,q025,q975\n";
  for (const auto& r : rows) {
    s << r.marker << ',' << r.quantity << ',' << format_double(r.median) << ','
      << format_double(r.q025) << ',' << format_double(r.q975) << '\n';
  }
  write_file_atomically(path, s.str());
}

void write_file_atomically(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out << contents;
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace cytomix
