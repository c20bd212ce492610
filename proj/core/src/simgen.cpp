#include "cytomix/simgen.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

#include "cytomix/draws.hpp"
#include "cytomix/errors.hpp"
#include "cytomix/random.hpp"

namespace cytomix {

namespace {

using nlohmann::json;

constexpr double kMaxLogMean = 30.0;

Eigen::MatrixXd checked_cholesky(const Eigen::MatrixXd& omega, const std::string& what) {
  if (omega.rows() != omega.cols()) throw ParameterError(what + " must be square");
  if (!omega.isApprox(omega.transpose(), 1e-12) ||
      (omega.diagonal().array() - 1.0).abs().maxCoeff() > 1e-12) {
    throw ParameterError(what + " must be a symmetric matrix with unit diagonal");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(omega);
  if (llt.info() != Eigen::Success) throw ParameterError(what + " is not positive definite");
  return llt.matrixL();
}

void check_scales(const Eigen::VectorXd& s, Eigen::Index n, const std::string& what) {
  if (s.size() != n) throw ParameterError(what + " has the wrong length");
  if (!s.allFinite() || (s.array() < 0.0).any()) {
    throw ParameterError(what + " must be finite and >= 0");
  }
}

std::string donor_id(int d, int donors) {
  const std::size_t width = std::max<std::size_t>(2, std::to_string(donors).size());
  std::string n = std::to_string(d + 1);
  return "D" + std::string(width - std::min(width, n.size()), '0') + n;
}

Eigen::VectorXd std_normal(Eigen::Index n, Rng& rng, std::normal_distribution<double>& normal) {
  Eigen::VectorXd z(n);
  for (Eigen::Index j = 0; j < n; ++j) z[j] = normal(rng);
  return z;
}

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

json vector_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Eigen::MatrixXd matrix_from(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j.at(r).size()) != cols) throw SchemaError("ragged matrix in truth file");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

Eigen::VectorXd vector_from(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j.at(i).get<double>();
  return v;
}

}  // namespace

void PlmmTruth::validate() const {
  const auto J = static_cast<Eigen::Index>(markers.size());
  if (J < 1) throw ParameterError("truth needs at least one marker");
  if (beta.rows() != 2 || beta.cols() != J || !beta.allFinite()) {
    throw ParameterError("truth beta must be a finite 2 x J matrix");
  }
  if (condition_levels[0] == condition_levels[1]) {
    throw ParameterError("truth condition levels must differ");
  }
  check_scales(sigma_cond1, J, "sigma_cond1");
  check_scales(sigma_cond2, J, "sigma_cond2");
  check_scales(sigma_donor, J, "sigma_donor");
  for (const auto* m : {&omega_cond1, &omega_cond2, &omega_donor}) {
    if (m->rows() != J) throw ParameterError("truth correlation matrices must be J x J");
  }
  checked_cholesky(omega_cond1, "omega_cond1");
  checked_cholesky(omega_cond2, "omega_cond2");
  checked_cholesky(omega_donor, "omega_donor");
}

PlmmSimulation simulate_plmm(const PlmmTruth& truth, const PlmmLayout& layout, std::uint64_t seed) {
  truth.validate();
  if (layout.donors < 1 || layout.cells_per_condition < 1) {
    throw ParameterError("layout needs at least one donor and one cell per condition");
  }
  const auto J = static_cast<Eigen::Index>(truth.markers.size());
  const Eigen::MatrixXd A[3] = {
      truth.sigma_cond1.asDiagonal() * checked_cholesky(truth.omega_cond1, "omega_cond1"),
      truth.sigma_cond2.asDiagonal() * checked_cholesky(truth.omega_cond2, "omega_cond2"),
      truth.sigma_donor.asDiagonal() * checked_cholesky(truth.omega_donor, "omega_donor")};
  const Eigen::Index N = static_cast<Eigen::Index>(layout.donors) * 2 * layout.cells_per_condition;

  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd U(layout.donors, J);
  for (int d = 0; d < layout.donors; ++d) U.row(d) = (A[2] * std_normal(J, rng, normal)).transpose();

  CountMatrix counts(N, J);
  Eigen::MatrixXd B(N, J);
  std::vector<std::string> donor, condition, celltype(static_cast<std::size_t>(N), "sim");
  Eigen::Index i = 0;
  for (int d = 0; d < layout.donors; ++d) {
    const std::string id = donor_id(d, layout.donors);
    for (int c = 0; c < 2; ++c) {
      for (int k = 0; k < layout.cells_per_condition; ++k, ++i) {
        const Eigen::VectorXd b = A[c] * std_normal(J, rng, normal);
        B.row(i) = b.transpose();
        for (Eigen::Index j = 0; j < J; ++j) {
          const double eta = truth.beta(c, j) + b[j] + U(d, j);
          if (!(eta <= kMaxLogMean)) {
            throw ParameterError("simulated log mean " + std::to_string(eta) + " exceeds " +
                                 std::to_string(kMaxLogMean) + "; lower beta or the scales");
          }
          std::poisson_distribution<std::int64_t> pois(std::exp(eta));
          counts(i, j) = pois(rng);
        }
        donor.push_back(id);
        condition.push_back(truth.condition_levels[static_cast<std::size_t>(c)]);
      }
    }
  }
  std::vector<Marker> markers;
  for (const auto& m : truth.markers) markers.push_back({m, MarkerRole::functional});
  return {CellTable(std::move(counts), std::move(donor), std::move(condition), std::move(celltype),
                    std::move(markers), truth.condition_levels[0]),
          std::move(B), std::move(U)};
}

std::string to_string(DagKind kind) {
  switch (kind) {
    case DagKind::no_confounder: return "no_confounder";
    case DagKind::pipe: return "pipe";
    case DagKind::collider: return "collider";
  }
  return "?";
}

DagKind dag_kind_from_string(const std::string& s) {
  if (s == "no_confounder") return DagKind::no_confounder;
  if (s == "pipe") return DagKind::pipe;
  if (s == "collider") return DagKind::collider;
  throw ConfigError("unknown DAG kind '" + s + "' (expected no_confounder, pipe or collider)");
}

void DagScenario::validate() const {
  for (double v : {a, b, c, noise1, noise2, donor_scale}) {
    if (!std::isfinite(v)) throw ParameterError("DAG scenario values must be finite");
  }
  if (noise1 < 0.0 || noise2 < 0.0 || donor_scale < 0.0) {
    throw ParameterError("DAG scenario scales must be >= 0");
  }
  if (donors < 1 || cells_per_donor < 2) {
    throw ParameterError("DAG scenario needs at least one donor with two cells");
  }
}

DagSimulation simulate_dag(const DagScenario& s, std::uint64_t seed, double cofactor) {
  s.validate();
  if (!(cofactor > 0.0)) throw ParameterError("cofactor must be > 0");
  const Eigen::Index N = static_cast<Eigen::Index>(s.donors) * s.cells_per_donor;
  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  Eigen::MatrixXd values(N, 2);
  CountMatrix counts(N, 2);
  std::vector<std::string> donor, condition, celltype(static_cast<std::size_t>(N), "sim");
  Eigen::Index i = 0;
  for (int d = 0; d < s.donors; ++d) {
    const double shift1 = s.donor_scale * normal(rng);
    const double shift2 = s.donor_scale * normal(rng);
    std::vector<int> x(static_cast<std::size_t>(s.cells_per_donor));
    int ones = 0;
    for (auto& xi : x) ones += xi = coin(rng) ? 1 : 0;
    if (ones == 0 || ones == s.cells_per_donor) x[0] = 1 - x[0];
    const std::string id = donor_id(d, s.donors);
    for (int k = 0; k < s.cells_per_donor; ++k, ++i) {
      const double X = x[static_cast<std::size_t>(k)];
      const double e1 = s.noise1 * normal(rng);
      const double e2 = s.noise2 * normal(rng);
      double y1 = 0.0;
      double y2 = 0.0;
      switch (s.kind) {
        case DagKind::no_confounder:
          y2 = s.b * X + shift2 + e2;
          y1 = s.a * X + shift1 + e1;
          break;
        case DagKind::pipe:
          y2 = s.b * X + shift2 + e2;
          y1 = s.c * y2 + shift1 + e1;
          break;
        case DagKind::collider:
          y2 = s.b * X + shift2 + e2;
          y1 = s.a * X + s.c * y2 + shift1 + e1;
          break;
      }
      values(i, 0) = y1;
      values(i, 1) = y2;
      for (Eigen::Index j = 0; j < 2; ++j) {
        const double back = std::sinh(values(i, j)) * cofactor;
        counts(i, j) = static_cast<std::int64_t>(std::llround(std::max(0.0, back)));
      }
      donor.push_back(id);
      condition.push_back(X > 0.5 ? "X1" : "X0");
    }
  }
  auto table = std::make_shared<const CellTable>(
      std::move(counts), std::move(donor), std::move(condition), std::move(celltype),
      std::vector<Marker>{{"Y1", MarkerRole::functional}, {"Y2", MarkerRole::functional}},
      std::string("X0"));
  return {TransformedTable{std::move(values), cofactor, table}, table};
}

void LlmmTruth::validate() const {
  const auto P = static_cast<Eigen::Index>(markers.size()) + 1;
  if (P < 2) throw ParameterError("LLMM truth needs at least one marker");
  if (beta.size() != P || !beta.allFinite()) throw ParameterError("LLMM truth beta must have J+1 finite entries");
  check_scales(sigma_donor, P, "sigma_donor");
  if (omega_donor.rows() != P) throw ParameterError("omega_donor must be (J+1) x (J+1)");
  checked_cholesky(omega_donor, "omega_donor");
  if (!(x_sd >= 0.0) || !std::isfinite(x_mean)) throw ParameterError("invalid predictor distribution");
}

LlmmSimulation simulate_llmm(const LlmmTruth& truth, int donors, int cells_per_donor,
                             std::uint64_t seed) {
  truth.validate();
  if (donors < 1 || cells_per_donor < 1) throw ParameterError("need donors and cells");
  const auto J = static_cast<Eigen::Index>(truth.markers.size());
  const Eigen::MatrixXd A = truth.sigma_donor.asDiagonal() * checked_cholesky(truth.omega_donor, "omega_donor");
  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  LlmmSimulation sim;
  LlmmData& d = sim.data;
  d.markers = truth.markers;
  d.condition_levels = {"0", "1"};
  const Eigen::Index N = static_cast<Eigen::Index>(donors) * cells_per_donor;
  d.x.resize(N, J);
  sim.donor_effects.resize(donors, J + 1);
  Eigen::Index i = 0;
  for (int dd = 0; dd < donors; ++dd) {
    d.donors.push_back(donor_id(dd, donors));
    const Eigen::VectorXd u = A * std_normal(J + 1, rng, normal);
    sim.donor_effects.row(dd) = u.transpose();
    const Eigen::VectorXd coef = truth.beta + u;
    for (int k = 0; k < cells_per_donor; ++k, ++i) {
      double eta = coef[0];
      for (Eigen::Index j = 0; j < J; ++j) {
        d.x(i, j) = truth.x_mean + truth.x_sd * normal(rng);
        eta += coef[j + 1] * d.x(i, j);
      }
      d.y.push_back(unif(rng) < 1.0 / (1.0 + std::exp(-eta)) ? 1 : 0);
      d.donor.push_back(dd);
    }
  }
  return sim;
}

std::string truth_to_json(const GroundTruth& t) {
  json j;
  j["schema"] = "cytomix-truth";
  j["version"] = 1;
  j["seed"] = t.seed;
  if (t.plmm) {
    const auto& p = *t.plmm;
    j["kind"] = "plmm";
    j["markers"] = p.markers;
    j["condition_levels"] = {p.condition_levels[0], p.condition_levels[1]};
    j["donors"] = t.layout.donors;
    j["cells_per_condition"] = t.layout.cells_per_condition;
    j["beta"] = matrix_json(p.beta);
    j["sigma_cond1"] = vector_json(p.sigma_cond1);
    j["sigma_cond2"] = vector_json(p.sigma_cond2);
    j["sigma_donor"] = vector_json(p.sigma_donor);
    j["omega_cond1"] = matrix_json(p.omega_cond1);
    j["omega_cond2"] = matrix_json(p.omega_cond2);
    j["omega_donor"] = matrix_json(p.omega_donor);
  } else if (t.dag) {
    const auto& s = *t.dag;
    j["kind"] = "dag";
    j["dag"] = to_string(s.kind);
    j["a"] = s.a;
    j["b"] = s.b;
    j["c"] = s.c;
    j["noise1"] = s.noise1;
    j["noise2"] = s.noise2;
    j["cells_per_donor"] = s.cells_per_donor;
    j["donors"] = s.donors;
    j["donor_scale"] = s.donor_scale;
    j["cofactor"] = t.cofactor;
  } else {
    throw ParameterError("ground truth holds neither a PLMM nor a DAG scenario");
  }
  return j.dump(2) + "\n";
}

GroundTruth truth_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("truth file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("schema") != "cytomix-truth") throw SchemaError("not a cytomix truth file");
    if (j.at("version") != 1) throw SchemaError("unsupported truth file version");
    GroundTruth t;
    t.seed = j.at("seed").get<std::uint64_t>();
    const std::string kind = j.at("kind");
    if (kind == "plmm") {
      PlmmTruth p;
      p.markers = j.at("markers").get<std::vector<std::string>>();
      const auto levels = j.at("condition_levels").get<std::vector<std::string>>();
      if (levels.size() != 2) throw SchemaError("condition_levels must have two entries");
      p.condition_levels = {levels[0], levels[1]};
      p.beta = matrix_from(j.at("beta"));
      p.sigma_cond1 = vector_from(j.at("sigma_cond1"));
      p.sigma_cond2 = vector_from(j.at("sigma_cond2"));
      p.sigma_donor = vector_from(j.at("sigma_donor"));
      p.omega_cond1 = matrix_from(j.at("omega_cond1"));
      p.omega_cond2 = matrix_from(j.at("omega_cond2"));
      p.omega_donor = matrix_from(j.at("omega_donor"));
      t.layout.donors = j.at("donors");
      t.layout.cells_per_condition = j.at("cells_per_condition");
      t.plmm = std::move(p);
    } else if (kind == "dag") {
      DagScenario s;
      s.kind = dag_kind_from_string(j.at("dag"));
      s.a = j.at("a");
      s.b = j.at("b");
      s.c = j.at("c");
      s.noise1 = j.at("noise1");
      s.noise2 = j.at("noise2");
      s.cells_per_donor = j.at("cells_per_donor");
      s.donors = j.at("donors");
      s.donor_scale = j.at("donor_scale");
      t.cofactor = j.at("cofactor");
      t.dag = s;
    } else {
      throw SchemaError("unknown truth kind '" + kind + "'");
    }
    return t;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("truth file: ") + e.what());
  }
}

void write_truth(const GroundTruth& truth, const std::filesystem::path& path) {
  write_file_atomically(path, truth_to_json(truth));
}

GroundTruth read_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open truth file '" + path.string() + "'");
  std::stringstream s;
  s << in.rdbuf();
  return truth_from_json(s.str());
}

CellTable resimulate(const GroundTruth& truth) {
  if (truth.plmm) return simulate_plmm(*truth.plmm, truth.layout, truth.seed).table;
  if (truth.dag) return *simulate_dag(*truth.dag, truth.seed, truth.cofactor).counts;
  throw ParameterError("ground truth holds neither a PLMM nor a DAG scenario");
}

}  // namespace cytomix
