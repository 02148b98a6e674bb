#pragma once

// h-transform by 1/alpha, homogenisation constants and the martingale weights
// built from them.

#include "willow/field.hpp"
#include "willow/model.hpp"
#include "willow/numerics.hpp"
#include "willow/path.hpp"

#include <algorithm>
#include <cmath>

namespace willow {

struct HTransform {
  Matrix L_tilde;
  Vector beta_tilde;
};

/// X -> X/alpha: generator alpha(i) q_ij / alpha(j), drift beta - alpha Q(1/alpha), alpha == 1.
inline HTransform h_transform(const MultitypeModel& m) {
  const int K = m.K();
  HTransform out{Matrix::Zero(K, K), Vector(K)};
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j)
      if (j != i) out.L_tilde(i, j) = m.alpha(i) * m.Q(i, j) / m.alpha(j);
    out.L_tilde(i, i) = -out.L_tilde.row(i).sum();
  }
  out.beta_tilde = m.beta - m.alpha.cwiseProduct(m.Q * m.alpha.cwiseInverse());
  return out;
}

/// The transformed model (L~, beta~, 1) as a model in its own right.
inline MultitypeModel tilde_model(const MultitypeModel& m) {
  const auto ht = h_transform(m);
  return make_model(ht.L_tilde, ht.beta_tilde, Vector::Ones(m.K()),
                    m.name.empty() ? "tilde" : m.name + "~");
}

struct HomogenizationData {
  Matrix L_tilde;
  Vector beta_tilde;
  double beta0 = 0.0;
  Vector q;
  Vector varphi;
};

inline HomogenizationData homogenize(const MultitypeModel& m) {
  require_admissible(m);
  auto ht = h_transform(m);
  HomogenizationData hd;
  const Vector Lb = ht.L_tilde * ht.beta_tilde;
  const Vector disc = ht.beta_tilde.array().square() - 2.0 * Lb.array();
  double beta0 = -std::numeric_limits<double>::infinity();
  for (int x = 0; x < m.K(); ++x)
    beta0 = std::max({beta0, ht.beta_tilde(x), std::sqrt(std::max(disc(x), 0.0))});
  hd.beta0 = beta0;
  hd.q = (beta0 - ht.beta_tilde.array()) / 2.0;
  hd.varphi = (beta0 * beta0 - disc.array()) / 4.0;
  hd.L_tilde = std::move(ht.L_tilde);
  hd.beta_tilde = std::move(ht.beta_tilde);
  return hd;
}

/// v~ = alpha v: extinction function of the transformed model, from v on the same nodes.
inline ScalarField tilde_field(const MultitypeModel& m, const ScalarField& v) {
  return v.scaled(m.alpha);
}

/// Sigma_t(x) = 2 (v0_t + q(x) - v~_t(x)), with v0 the homogeneous (beta0, 1) extinction function.
inline ScalarField sigma_field(const HomogenizationData& hd, const ScalarField& v_tilde) {
  const auto& t = v_tilde.times();
  const auto n = as_index(t.size());
  const int K = v_tilde.K();
  Matrix val(n, K), d1(n, K), d2(n, K);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double s = t[static_cast<std::size_t>(r)];
    const double v0 = v0_closed(hd.beta0, s);
    const double v0p = -hd.beta0 * v0 - v0 * v0;
    const double v0pp = -hd.beta0 * v0p - 2.0 * v0 * v0p;
    for (int k = 0; k < K; ++k) {
      val(r, k) = 2.0 * (v0 + hd.q(k) - v_tilde.node_values()(r, k));
      d1(r, k) = 2.0 * (v0p - v_tilde.node_first()(r, k));
      d2(r, k) = 2.0 * (v0pp - v_tilde.node_second()(r, k));
    }
  }
  return ScalarField(t, std::move(val), std::move(d1), std::move(d2));
}

/// M_t = exp(X_0(q) - X_t(q) - int_0^t X_s(varphi) ds) along a path of the transformed process.
inline double girsanov_weight(const MeasurePath& path, const HomogenizationData& hd, double t) {
  if (path.times.empty() || t > path.times.back() + 1e-12)
    throw PreconditionError("measure path is shorter than t");
  const Vector x0 = path.masses.row(0).transpose();
  return std::exp(x0.dot(hd.q) - path.at(t).dot(hd.q) - path.occupied(t).dot(hd.varphi));
}

/// M^(h)_t = dv_{h-t}(Y_t)/dv_h(Y_0) exp(-int_0^t (beta + 2 alpha v_{h-s})(Y_s) ds),
/// with the integral evaluated exactly on each constant piece of the path.
inline double spine_weight(const TypedPath& path, const MultitypeModel& m, const ScalarField& v,
                           const ScalarField& dv, double h, double t) {
  if (!(t < h)) throw PreconditionError("spine weight needs t < h");
  if (t < path.start() || t > path.end() + 1e-12) throw PreconditionError("path does not cover [0, t]");
  double exponent = 0.0;
  path.for_each_segment(0.0, t, [&](double a, double b, TypeIndex y) {
    exponent += m.beta(y) * (b - a) + 2.0 * m.alpha(y) * v.integral(h - b, h - a, y);
  });
  const TypeIndex x = path.origin(), y = path.at(t);
  return dv.value(h - t, y) / dv.value(h, x) * std::exp(-exponent);
}

}  // namespace willow
