#pragma once

#include "willow/model.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <string>

namespace willow {

/// Perron-Frobenius data of Diag(beta) - Q.
struct SpectralData {
  double lambda0 = 0.0;
  Vector phi0;        // right eigenvector, > 0
  Vector phi0_tilde;  // left eigenvector, > 0
  Vector pi;          // phi0 * phi0_tilde, sums to 1
  double gap = std::numeric_limits<double>::infinity();

  static constexpr const char* convention =
      "max_i phi0(i) = 1; sum_i phi0(i) phi0_tilde(i) = 1; both vectors positive";
};

namespace detail {

inline Vector inverse_iteration(const Matrix& A, double shift, int max_iter = 100) {
  const Eigen::Index K = A.rows();
  const Eigen::PartialPivLU<Matrix> lu(A - shift * Matrix::Identity(K, K));
  Vector x = Vector::Ones(K) / std::sqrt(static_cast<double>(K));
  for (int it = 0; it < max_iter; ++it) {
    Vector y = lu.solve(x);
    y /= y.norm();
    if (y.sum() < 0) y = -y;
    const double change = (y - x).norm();
    x = std::move(y);
    if (change < 1e-15) break;
  }
  return x;
}

}  // namespace detail

/// Generalised eigenvalue lambda0 of Diag(beta) - Q with its positive right and
/// left eigenvectors.  The dense spectrum seeds a shifted inverse iteration;
/// strict positivity of the result certifies the Perron root.
inline SpectralData generalized_eigen(const MultitypeModel& m) {
  require_admissible(m);
  const Matrix A = m.killed_generator();
  const Eigen::Index K = A.rows();

  const Eigen::EigenSolver<Matrix> dense(A, false);
  const auto& spectrum = dense.eigenvalues();
  Eigen::Index seed_index = 0;
  for (Eigen::Index i = 1; i < K; ++i)
    if (spectrum(i).real() < spectrum(seed_index).real()) seed_index = i;
  const double seed = spectrum(seed_index).real();
  const double scale = 1.0 + A.cwiseAbs().maxCoeff();
  const double shift = seed - 1e-9 * scale;

  Vector right = detail::inverse_iteration(A, shift);
  Vector left = detail::inverse_iteration(A.transpose(), shift);
  if ((right.array() <= 0).any() || (left.array() <= 0).any())
    throw NumericError("Perron eigenvector is not strictly positive; root may be degenerate");

  SpectralData out;
  out.lambda0 = left.dot(A * right) / left.dot(right);
  out.phi0 = right / right.maxCoeff();
  out.phi0_tilde = left / left.dot(out.phi0);
  out.pi = out.phi0.cwiseProduct(out.phi0_tilde);

  double gap = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < K; ++i) {
    if (i == seed_index) continue;
    gap = std::min(gap, spectrum(i).real() - out.lambda0);
  }
  if (gap < 1e-8 * scale) throw NumericError("non-simple Perron root (spectral gap " +
                                             std::to_string(gap) + ")");
  out.gap = gap;
  return out;
}

inline double right_residual(const MultitypeModel& m, const SpectralData& s) {
  return (m.killed_generator() * s.phi0 - s.lambda0 * s.phi0).cwiseAbs().maxCoeff();
}

inline double left_residual(const MultitypeModel& m, const SpectralData& s) {
  return (m.killed_generator().transpose() * s.phi0_tilde - s.lambda0 * s.phi0_tilde)
      .cwiseAbs()
      .maxCoeff();
}

/// Generator of the phi0-spine: rates (phi0(j)/phi0(i)) q_ij off the diagonal, rows summing to 0.
inline Matrix qprocess_generator(const MultitypeModel& m, const SpectralData& s) {
  const int K = m.K();
  Matrix G = Matrix::Zero(K, K);
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j)
      if (j != i) G(i, j) = s.phi0(j) / s.phi0(i) * m.Q(i, j);
    G(i, i) = -G.row(i).sum();
  }
  return G;
}

inline nlohmann::json to_json(const SpectralData& s) {
  nlohmann::json doc;
  doc["lambda0"] = s.lambda0;
  doc["phi0"] = to_json(s.phi0);
  doc["phi0_tilde"] = to_json(s.phi0_tilde);
  doc["pi"] = to_json(s.pi);
  if (std::isfinite(s.gap)) doc["gap"] = s.gap; else doc["gap"] = "inf";
  doc["convention"] = SpectralData::convention;
  return doc;
}

}  // namespace willow
