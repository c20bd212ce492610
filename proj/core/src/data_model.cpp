#include "cytomix/data_model.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "cytomix/errors.hpp"
#include "cytomix/random.hpp"

namespace cytomix {

std::string to_string(MarkerRole role) {
  return role == MarkerRole::gating ? "gating" : "functional";
}

MarkerRole marker_role_from_string(const std::string& s) {
  if (s == "gating") return MarkerRole::gating;
  if (s == "functional") return MarkerRole::functional;
  throw ConfigError("unknown marker role '" + s + "' (expected gating or functional)");
}

CellTable::CellTable(CountMatrix counts, std::vector<std::string> donor,
                     std::vector<std::string> condition, std::vector<std::string> celltype,
                     std::vector<Marker> markers, std::optional<std::string> reference_level)
    : counts_{std::move(counts)},
      donor_{std::move(donor)},
      condition_{std::move(condition)},
      celltype_{std::move(celltype)},
      markers_{std::move(markers)},
      declared_reference_{std::move(reference_level)} {
  const auto n = static_cast<std::size_t>(counts_.rows());
  if (donor_.size() != n || condition_.size() != n || celltype_.size() != n) {
    throw SchemaError("label columns must have one entry per cell");
  }
  if (static_cast<std::size_t>(counts_.cols()) != markers_.size()) {
    throw SchemaError("count matrix has " + std::to_string(counts_.cols()) + " columns but " +
                      std::to_string(markers_.size()) + " markers are declared");
  }
  std::set<std::string> names;
  bool any_functional = false;
  for (const auto& m : markers_) {
    if (m.name.empty()) throw SchemaError("empty marker name");
    if (!names.insert(m.name).second) throw SchemaError("duplicate marker '" + m.name + "'");
    any_functional = any_functional || m.role == MarkerRole::functional;
  }
  if (!any_functional) throw SchemaError("panel has no functional marker");

  for (Eigen::Index i = 0; i < counts_.rows(); ++i) {
    for (Eigen::Index j = 0; j < counts_.cols(); ++j) {
      if (counts_(i, j) < 0) {
        throw ValidationError(static_cast<std::size_t>(i) + 1,
                              "negative count for marker '" + markers_[j].name + "'");
      }
    }
  }

  std::set<std::string> levels(condition_.begin(), condition_.end());
  if (levels.size() != 2) {
    std::string seen;
    for (const auto& l : levels) seen += (seen.empty() ? "" : ", ") + l;
    throw FactorError("condition must have exactly two observed levels, found " +
                      std::to_string(levels.size()) + " {" + seen + "}");
  }
  levels_ = {*levels.begin(), *std::next(levels.begin())};
  if (declared_reference_) {
    if (!levels.contains(*declared_reference_)) {
      throw FactorError("reference level '" + *declared_reference_ +
                        "' is not an observed condition level");
    }
    if (levels_[1] == *declared_reference_) std::swap(levels_[0], levels_[1]);
  }
  condition_idx_.resize(n);
  for (std::size_t i = 0; i < n; ++i) condition_idx_[i] = condition_[i] == levels_[0] ? 0 : 1;

  std::set<std::string> donors(donor_.begin(), donor_.end());
  donor_levels_.assign(donors.begin(), donors.end());
  donor_idx_.resize(n);
  std::vector<std::array<bool, 2>> seen(donor_levels_.size(), {false, false});
  for (std::size_t i = 0; i < n; ++i) {
    auto it = std::lower_bound(donor_levels_.begin(), donor_levels_.end(), donor_[i]);
    donor_idx_[i] = static_cast<int>(it - donor_levels_.begin());
    seen[donor_idx_[i]][condition_idx_[i]] = true;
  }
  paired_ = std::all_of(seen.begin(), seen.end(), [](const auto& s) { return s[0] && s[1]; });
}

Eigen::Index CellTable::marker_index(const std::string& name) const {
  for (std::size_t j = 0; j < markers_.size(); ++j) {
    if (markers_[j].name == name) return static_cast<Eigen::Index>(j);
  }
  throw NotFoundError("marker '" + name + "' is not in the panel");
}

std::vector<std::string> CellTable::marker_names() const {
  std::vector<std::string> out;
  for (const auto& m : markers_) out.push_back(m.name);
  return out;
}

std::vector<std::string> CellTable::functional_marker_names() const {
  std::vector<std::string> out;
  for (const auto& m : markers_) {
    if (m.role == MarkerRole::functional) out.push_back(m.name);
  }
  return out;
}

CellTable CellTable::select_rows(const std::vector<Eigen::Index>& rows) const {
  CountMatrix counts(static_cast<Eigen::Index>(rows.size()), counts_.cols());
  std::vector<std::string> donor, condition, celltype;
  donor.reserve(rows.size());
  condition.reserve(rows.size());
  celltype.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto i = rows[r];
    counts.row(static_cast<Eigen::Index>(r)) = counts_.row(i);
    donor.push_back(donor_[i]);
    condition.push_back(condition_[i]);
    celltype.push_back(celltype_[i]);
  }
  return CellTable(std::move(counts), std::move(donor), std::move(condition),
                   std::move(celltype), markers_, declared_reference_);
}

bool CellTable::operator==(const CellTable& other) const {
  return counts_ == other.counts_ && donor_ == other.donor_ &&
         condition_ == other.condition_ && celltype_ == other.celltype_ &&
         markers_ == other.markers_ && levels_ == other.levels_;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char ch = line[k];
    if (quoted) {
      if (ch == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur.push_back('"');
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::int64_t parse_count(const std::string& field, std::size_t row, const std::string& marker) {
  const std::string s = trim(field);
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec == std::errc{} && ptr == s.data() + s.size() && !s.empty()) {
    if (value < 0) throw ValidationError(row, "negative count for marker '" + marker + "'");
    return value;
  }
  // Accept integral values written with a fractional part, e.g. "12.0".
  double d = 0.0;
  auto [dptr, dec] = std::from_chars(s.data(), s.data() + s.size(), d);
  if (dec == std::errc{} && dptr == s.data() + s.size() && !s.empty() && std::isfinite(d) &&
      d == std::floor(d)) {
    if (d < 0) throw ValidationError(row, "negative count for marker '" + marker + "'");
    return static_cast<std::int64_t>(d);
  }
  throw ValidationError(row, "count '" + s + "' for marker '" + marker +
                                 "' is not a non-negative integer");
}

}  // namespace

CellTable parse_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty CSV input: missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  // Strip a UTF-8 byte order mark.
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  auto find_column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError("missing required column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t donor_col = find_column(schema.donor_column);
  const std::size_t cond_col = find_column(schema.condition_column);
  const std::size_t type_col = find_column(schema.celltype_column);

  std::vector<std::size_t> marker_cols;
  std::vector<Marker> markers;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == donor_col || c == cond_col || c == type_col) continue;
    Marker m{header[c], MarkerRole::functional};
    if (auto it = schema.roles.find(m.name); it != schema.roles.end()) m.role = it->second;
    markers.push_back(std::move(m));
    marker_cols.push_back(c);
  }
  for (const auto& [name, role] : schema.roles) {
    if (std::none_of(markers.begin(), markers.end(), [&](const Marker& m) { return m.name == name; })) {
      throw SchemaError("marker role given for '" + name + "' but no such column exists");
    }
  }

  std::vector<std::vector<std::int64_t>> rows;
  std::vector<std::string> donor, condition, celltype;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    ++row;
    auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw ValidationError(row, "expected " + std::to_string(header.size()) + " fields, found " +
                                     std::to_string(fields.size()));
    }
    std::vector<std::int64_t> counts(marker_cols.size());
    for (std::size_t k = 0; k < marker_cols.size(); ++k) {
      counts[k] = parse_count(fields[marker_cols[k]], row, markers[k].name);
    }
    rows.push_back(std::move(counts));
    donor.push_back(trim(fields[donor_col]));
    condition.push_back(trim(fields[cond_col]));
    celltype.push_back(trim(fields[type_col]));
  }

  CountMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(markers.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < markers.size(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return CellTable(std::move(m), std::move(donor), std::move(condition), std::move(celltype),
                   std::move(markers), schema.reference_level);
}

CellTable load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open '" + path.string() + "'");
  return parse_csv(in, schema);
}

void write_csv(const CellTable& table, std::ostream& out) {
  out << "donor,condition,celltype";
  for (const auto& m : table.markers()) out << ',' << m.name;
  out << '\n';
  for (Eigen::Index i = 0; i < table.n_cells(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    out << table.donor()[u] << ',' << table.condition()[u] << ',' << table.celltype()[u];
    for (Eigen::Index j = 0; j < table.n_markers(); ++j) out << ',' << table.counts()(i, j);
    out << '\n';
  }
}

void write_csv(const CellTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  write_csv(table, out);
}

CellTable filter_celltype(const CellTable& table, const std::string& keep) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < table.n_cells(); ++i) {
    if (table.celltype()[static_cast<std::size_t>(i)] == keep) rows.push_back(i);
  }
  if (rows.empty()) throw NotFoundError("cell type '" + keep + "' not present in table");
  try {
    return table.select_rows(rows);
  } catch (const FactorError& e) {
    throw FactorError("after keeping cell type '" + keep + "': " + e.what());
  }
}

CellTable subsample_per_donor(const CellTable& table, std::int64_t k, std::uint64_t seed) {
  if (k < 1) throw ParameterError("subsample size must be >= 1");
  const auto n_donors = table.donor_levels().size();
  std::vector<std::vector<Eigen::Index>> groups(2 * n_donors);
  for (Eigen::Index i = 0; i < table.n_cells(); ++i) {
    const auto u = static_cast<std::size_t>(i);
    groups[2 * static_cast<std::size_t>(table.donor_indices()[u]) +
           static_cast<std::size_t>(table.condition_indices()[u])]
        .push_back(i);
  }
  Rng rng{split_seed(seed, 0)};
  std::vector<Eigen::Index> keep;
  for (auto& g : groups) {
    const auto m = static_cast<std::int64_t>(g.size());
    if (m <= k) {
      keep.insert(keep.end(), g.begin(), g.end());
      continue;
    }
    // Partial Fisher-Yates: the first k slots become a uniform k-subset.
    for (std::int64_t s = 0; s < k; ++s) {
      std::uniform_int_distribution<std::int64_t> pick(s, m - 1);
      std::swap(g[static_cast<std::size_t>(s)], g[static_cast<std::size_t>(pick(rng))]);
    }
    keep.insert(keep.end(), g.begin(), g.begin() + k);
  }
  std::sort(keep.begin(), keep.end());
  return table.select_rows(keep);
}

TransformedTable arcsinh_transform(std::shared_ptr<const CellTable> table, double cofactor) {
  if (!(cofactor > 0.0) || !std::isfinite(cofactor)) {
    throw ParameterError("arcsinh cofactor must be a positive finite number");
  }
  TransformedTable out;
  out.cofactor = cofactor;
  out.values = table->counts().cast<double>().unaryExpr(
      [cofactor](double c) { return std::asinh(c / cofactor); });
  out.source = std::move(table);
  return out;
}

TransformedTable arcsinh_transform(const CellTable& table, double cofactor) {
  return arcsinh_transform(std::make_shared<const CellTable>(table), cofactor);
}

}  // namespace cytomix
