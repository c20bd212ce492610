#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cytomix {

enum class MarkerRole { gating, functional };

struct Marker {
  std::string name;
  MarkerRole role = MarkerRole::functional;

  bool operator==(const Marker&) const = default;
};

std::string to_string(MarkerRole role);
MarkerRole marker_role_from_string(const std::string& s);

/// Ion counts, one row per cell. Row-major so a cell's markers are contiguous.
using CountMatrix =
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Cells x markers count matrix with donor, condition and cell-type labels.
///
/// Validated on construction and immutable afterwards. The condition factor
/// has exactly two observed levels; `condition_levels()[0]` is the reference
/// level (the explicitly declared one, otherwise the lexicographically first).
class CellTable {
 public:
  CellTable(CountMatrix counts, std::vector<std::string> donor,
            std::vector<std::string> condition, std::vector<std::string> celltype,
            std::vector<Marker> markers,
            std::optional<std::string> reference_level = std::nullopt);

  Eigen::Index n_cells() const { return counts_.rows(); }
  Eigen::Index n_markers() const { return counts_.cols(); }

  const CountMatrix& counts() const { return counts_; }
  const std::vector<std::string>& donor() const { return donor_; }
  const std::vector<std::string>& condition() const { return condition_; }
  const std::vector<std::string>& celltype() const { return celltype_; }
  const std::vector<Marker>& markers() const { return markers_; }

  /// Reference level first.
  const std::array<std::string, 2>& condition_levels() const { return levels_; }
  /// 0 for the reference level, 1 otherwise.
  int condition_index(Eigen::Index cell) const { return condition_idx_[cell]; }
  const std::vector<int>& condition_indices() const { return condition_idx_; }

  /// Sorted unique donor ids and each cell's position in that list.
  const std::vector<std::string>& donor_levels() const { return donor_levels_; }
  const std::vector<int>& donor_indices() const { return donor_idx_; }

  /// True iff every donor appears under both conditions.
  bool paired() const { return paired_; }

  /// Column of `name`; throws NotFoundError.
  Eigen::Index marker_index(const std::string& name) const;
  std::vector<std::string> marker_names() const;
  std::vector<std::string> functional_marker_names() const;

  /// Rows `rows` in the given order, re-validated.
  CellTable select_rows(const std::vector<Eigen::Index>& rows) const;

  bool operator==(const CellTable& other) const;

 private:
  CountMatrix counts_;
  std::vector<std::string> donor_;
  std::vector<std::string> condition_;
  std::vector<std::string> celltype_;
  std::vector<Marker> markers_;
  std::optional<std::string> declared_reference_;

  std::array<std::string, 2> levels_;
  std::vector<int> condition_idx_;
  std::vector<std::string> donor_levels_;
  std::vector<int> donor_idx_;
  bool paired_ = false;
};

/// Column names and marker roles for CSV ingestion.
struct CsvSchema {
  std::string donor_column = "donor";
  std::string condition_column = "condition";
  std::string celltype_column = "celltype";
  /// Markers not listed default to functional.
  std::map<std::string, MarkerRole> roles;
  std::optional<std::string> reference_level;
};

CellTable load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
CellTable parse_csv(std::istream& in, const CsvSchema& schema = {});
void write_csv(const CellTable& table, const std::filesystem::path& path);
void write_csv(const CellTable& table, std::ostream& out);

CellTable filter_celltype(const CellTable& table, const std::string& keep);

/// Keeps min(k, m) uniformly chosen cells from every (donor, condition)
/// group of m cells. Original row order is preserved.
CellTable subsample_per_donor(const CellTable& table, std::int64_t k, std::uint64_t seed);

inline constexpr double kDefaultCofactor = 5.0;

/// asinh(count / cofactor), with a link back to the source table.
struct TransformedTable {
  Eigen::MatrixXd values;
  double cofactor = kDefaultCofactor;
  std::shared_ptr<const CellTable> source;
};

TransformedTable arcsinh_transform(std::shared_ptr<const CellTable> table,
                                   double cofactor = kDefaultCofactor);
TransformedTable arcsinh_transform(const CellTable& table, double cofactor = kDefaultCofactor);

}  // namespace cytomix
