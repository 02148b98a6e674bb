#pragma once

// Finite-type superprocess model (L, beta, alpha) and finite measures on the
// type space.  Model files are JSON documents:
//
//   {
//     "name":  "ref2type",              (optional)
//     "K":     2,
//     "Q":     [[-1, 1], [1, -1]],      K rows of K numbers, row-major
//     "beta":  [0.2, 0.8],
//     "alpha": [1, 2]
//   }

#include "willow/core.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace willow {

struct MultitypeModel {
  std::string name;
  Matrix Q;      // jump-rate generator
  Vector beta;   // drift coefficient, 1/time
  Vector alpha;  // quadratic coefficient, 1/(mass*time)

  int K() const { return static_cast<int>(beta.size()); }

  /// Exit rate of type i, i.e. -Q(i,i).
  double exit_rate(TypeIndex i) const { return -Q(i, i); }

  /// (Diag(beta) - Q), the operator whose Perron root drives extinction.
  Matrix killed_generator() const {
    Matrix A = -Q;
    A.diagonal() += beta;
    return A;
  }
};

struct FiniteMeasure {
  Vector masses;

  static FiniteMeasure dirac(int K, TypeIndex x, double mass = 1.0) {
    FiniteMeasure nu{Vector::Zero(K)};
    nu.masses(x) = mass;
    return nu;
  }

  int K() const { return static_cast<int>(masses.size()); }
  double total() const { return masses.sum(); }
  /// nu(g) = sum_x nu(x) g(x).
  double integrate(const Vector& g) const { return masses.dot(g); }
  bool is_zero() const { return (masses.array() == 0.0).all(); }
};

struct ValidationReport {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  std::string summary() const {
    std::ostringstream out;
    for (std::size_t i = 0; i < violations.size(); ++i) {
      if (i) out << "; ";
      out << violations[i];
    }
    return out.str();
  }
};

namespace detail {

inline std::vector<int> reach_from(const Matrix& Q, int start, bool transpose) {
  const int K = static_cast<int>(Q.rows());
  std::vector<int> seen(K, 0);
  std::vector<int> stack{start};
  seen[start] = 1;
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    for (int j = 0; j < K; ++j) {
      const double rate = transpose ? Q(j, i) : Q(i, j);
      if (j != i && rate > 0.0 && !seen[j]) {
        seen[j] = 1;
        stack.push_back(j);
      }
    }
  }
  return seen;
}

inline std::string format_number(double x) {
  std::ostringstream out;
  out.precision(12);
  out << x;
  return out.str();
}

}  // namespace detail

/// Strong connectivity of the graph of positive off-diagonal rates.
inline bool is_irreducible(const Matrix& Q) {
  const int K = static_cast<int>(Q.rows());
  if (K <= 1) return true;
  const auto fwd = detail::reach_from(Q, 0, false);
  const auto bwd = detail::reach_from(Q, 0, true);
  for (int i = 0; i < K; ++i)
    if (!fwd[i] || !bwd[i]) return false;
  return true;
}

inline ValidationReport validate_model(const MultitypeModel& m) {
  ValidationReport report;
  const int K = m.K();
  if (K <= 0) {
    report.violations.push_back("K must be positive");
    return report;
  }
  if (m.Q.rows() != K || m.Q.cols() != K) {
    report.violations.push_back("Q must be " + std::to_string(K) + "x" + std::to_string(K));
    return report;
  }
  if (m.alpha.size() != K) {
    report.violations.push_back("alpha must have " + std::to_string(K) + " entries");
    return report;
  }
  bool finite = m.Q.allFinite() && m.beta.allFinite() && m.alpha.allFinite();
  if (!finite) report.violations.push_back("all entries must be finite");

  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) {
      if (i != j && m.Q(i, j) < 0.0)
        report.violations.push_back("Q(" + std::to_string(i + 1) + "," + std::to_string(j + 1) +
                                    ") is a negative off-diagonal rate");
    }
    const double row = m.Q.row(i).sum();
    if (std::abs(row) > 1e-12)
      report.violations.push_back("row " + std::to_string(i + 1) + " sums to " +
                                  detail::format_number(row));
  }
  if ((m.alpha.array() <= 0.0).any())
    report.violations.push_back("alpha must be strictly positive");
  if (!is_irreducible(m.Q)) report.violations.push_back("Q is not irreducible");
  return report;
}

inline void require_admissible(const MultitypeModel& m) {
  const auto report = validate_model(m);
  if (!report.ok()) throw ModelError("inadmissible model: " + report.summary());
}

inline MultitypeModel make_model(Matrix Q, Vector beta, Vector alpha, std::string name = {}) {
  MultitypeModel m{std::move(name), std::move(Q), std::move(beta), std::move(alpha)};
  require_admissible(m);
  return m;
}

// ---------------------------------------------------------------------------
// JSON serialization

namespace detail {

inline Vector vector_field(const nlohmann::json& doc, const char* field, int K) {
  if (!doc.contains(field)) throw ParseError(std::string("missing field \"") + field + "\"");
  const auto& arr = doc.at(field);
  if (!arr.is_array() || static_cast<int>(arr.size()) != K)
    throw ParseError(std::string("field \"") + field + "\" must be an array of " +
                     std::to_string(K) + " numbers");
  Vector out(K);
  for (int i = 0; i < K; ++i) {
    if (!arr[i].is_number())
      throw ParseError(std::string("field \"") + field + "\" entry " + std::to_string(i + 1) +
                       " is not a number");
    out(i) = arr[i].get<double>();
  }
  return out;
}

}  // namespace detail

inline nlohmann::json to_json(const Vector& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

inline nlohmann::json to_json(const Matrix& M) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < M.rows(); ++i) rows.push_back(to_json(Vector(M.row(i).transpose())));
  return rows;
}

inline nlohmann::json to_json(const MultitypeModel& m) {
  nlohmann::json doc;
  if (!m.name.empty()) doc["name"] = m.name;
  doc["K"] = m.K();
  doc["Q"] = to_json(m.Q);
  doc["beta"] = to_json(m.beta);
  doc["alpha"] = to_json(m.alpha);
  return doc;
}

/// Parses a model document without checking admissibility.
inline MultitypeModel model_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ParseError("model document must be an object");
  if (!doc.contains("K")) throw ParseError("missing field \"K\"");
  if (!doc.at("K").is_number_integer() || doc.at("K").get<long>() <= 0)
    throw ParseError("field \"K\" must be a positive integer");
  const int K = doc.at("K").get<int>();

  if (!doc.contains("Q")) throw ParseError("missing field \"Q\"");
  const auto& rows = doc.at("Q");
  if (!rows.is_array() || static_cast<int>(rows.size()) != K)
    throw ParseError("field \"Q\" must have " + std::to_string(K) + " rows");
  Matrix Q(K, K);
  for (int i = 0; i < K; ++i) {
    if (!rows[i].is_array() || static_cast<int>(rows[i].size()) != K)
      throw ParseError("field \"Q\" row " + std::to_string(i + 1) + " must have " +
                       std::to_string(K) + " entries");
    for (int j = 0; j < K; ++j) {
      if (!rows[i][j].is_number())
        throw ParseError("field \"Q\" entry (" + std::to_string(i + 1) + "," +
                         std::to_string(j + 1) + ") is not a number");
      Q(i, j) = rows[i][j].get<double>();
    }
  }
  MultitypeModel m;
  m.Q = std::move(Q);
  m.beta = detail::vector_field(doc, "beta", K);
  m.alpha = detail::vector_field(doc, "alpha", K);
  if (doc.contains("name")) m.name = doc.at("name").get<std::string>();
  return m;
}

inline MultitypeModel parse_model(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed model document: ") + e.what());
  }
  auto m = model_from_json(doc);
  require_admissible(m);
  return m;
}

inline MultitypeModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open model file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_model(buf.str());
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline void save_model(const MultitypeModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ModelError("cannot write model file " + path);
  out << to_json(m).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Reference models used by the verification battery.

namespace reference {

/// K=1, Q=0, beta=1, alpha=1.
inline MultitypeModel homogeneous() {
  return make_model(Matrix::Zero(1, 1), Vector::Constant(1, 1.0), Vector::Constant(1, 1.0),
                    "homogeneous");
}

/// K=2, Q=[[-1,1],[1,-1]], beta=(0.2,0.8), alpha=(1,2).
inline MultitypeModel two_type() {
  Matrix Q(2, 2);
  Q << -1, 1, 1, -1;
  Vector beta(2), alpha(2);
  beta << 0.2, 0.8;
  alpha << 1, 2;
  return make_model(Q, beta, alpha, "ref2type");
}

/// two_type() with beta = 0.
inline MultitypeModel critical() {
  auto m = two_type();
  m.beta.setZero();
  m.name = "critical";
  return m;
}

}  // namespace reference

/// Resolves a built-in reference name or loads a model file.
inline MultitypeModel resolve_model(const std::string& name_or_path) {
  if (name_or_path == "homogeneous" || name_or_path == "m1") return reference::homogeneous();
  if (name_or_path == "ref2type" || name_or_path == "m2") return reference::two_type();
  if (name_or_path == "critical" || name_or_path == "m3") return reference::critical();
  return load_model(name_or_path);
}

}  // namespace willow
