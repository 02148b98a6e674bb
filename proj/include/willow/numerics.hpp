#pragma once

// Deterministic engine: Log-Laplace equation, extinction function v and its
// time derivative, Feynman-Kac linear systems.
//
// For a finite type space the Log-Laplace equation of the (Q, beta, alpha)
// superprocess is the ODE system
//
//   du/dt = Q u - beta * u - alpha * u^2 + phi_src,   u_0 = f,
//
// and the extinction function v_t(x) = N_x[H_max > t] solves the same system
// with f = +infinity.

#include "willow/field.hpp"
#include "willow/model.hpp"

#include <boost/numeric/odeint.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace willow {

struct OdeOptions {
  double rtol = 1e-10;
  double atol = 1e-10;
  double max_step = 0.05;
  double first_step = 1e-3;
  long max_steps = 50'000'000;
};

namespace detail {

using State = std::vector<double>;

inline double underflow_floor(double t) { return 1e-14 * std::max(1.0, std::abs(t)); }

/// Adaptive Dormand-Prince integration from t_start to t_end.  The observer
/// sees (t, x) at the start and after every accepted step; the final step
/// lands exactly on t_end.
template <class System, class Observer>
void integrate_recorded(System&& sys, State& x, double t_start, double t_end,
                        const OdeOptions& opt, Observer&& observe) {
  namespace ode = boost::numeric::odeint;
  using Stepper = ode::runge_kutta_dopri5<State>;
  auto stepper = ode::make_controlled(opt.atol, opt.rtol, Stepper());
  double t = t_start;
  double dt = std::min(opt.first_step, t_end - t_start);
  observe(t, x);
  long steps = 0;
  while (t < t_end) {
    if (++steps > opt.max_steps) throw NumericError("ODE step budget exhausted", t);
    const bool last = t + std::min(dt, opt.max_step) >= t_end;
    double trial = last ? t_end - t : std::min(dt, opt.max_step);
    const double before = t;
    const auto result = stepper.try_step(sys, x, t, trial);
    if (result == ode::success) {
      if (last) t = t_end;
      for (double xi : x)
        if (!std::isfinite(xi)) throw NumericError("ODE solution left the finite range", t);
      observe(t, x);
      dt = trial;
    } else {
      dt = trial;
      if (dt < underflow_floor(before))
        throw NumericError("step-size underflow (stiffness) at t = " + std::to_string(before),
                           before);
    }
  }
}

/// The Log-Laplace right-hand side Q u - beta u - alpha u^2 + src.
inline Vector laplace_rhs(const MultitypeModel& m, const Vector& u, const Vector& src) {
  return m.Q * u - m.beta.cwiseProduct(u) - m.alpha.cwiseProduct(u.cwiseAbs2()) + src;
}

/// Jacobian of laplace_rhs applied to a direction.
inline Vector laplace_jacobian_apply(const MultitypeModel& m, const Vector& u, const Vector& dir) {
  return m.Q * dir - (m.beta + 2.0 * m.alpha.cwiseProduct(u)).cwiseProduct(dir);
}

inline Eigen::Map<const Vector> view(const State& x, int offset, int K) {
  return Eigen::Map<const Vector>(x.data() + offset, K);
}

struct FieldBuilder {
  explicit FieldBuilder(int K) : K(K) {}
  void push(double t, const Vector& v, const Vector& d1, const Vector& d2) {
    times.push_back(t);
    values.insert(values.end(), v.data(), v.data() + K);
    first.insert(first.end(), d1.data(), d1.data() + K);
    second.insert(second.end(), d2.data(), d2.data() + K);
  }
  ScalarField build(Monotonicity flag) const {
    const auto n = as_index(times.size());
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Matrix v = Eigen::Map<const RowMajor>(values.data(), n, K);
    Matrix d1 = Eigen::Map<const RowMajor>(first.data(), n, K);
    Matrix d2 = Eigen::Map<const RowMajor>(second.data(), n, K);
    return ScalarField(times, std::move(v), std::move(d1), std::move(d2), flag);
  }
  int K;
  std::vector<double> times, values, first, second;
};

}  // namespace detail

/// Solution u_t^{f, phi_src} of the Log-Laplace equation on [0, T].
inline ScalarField solve_laplace(const MultitypeModel& m, const Vector& f, const Vector& phi_src,
                                 double T, OdeOptions opt = {.atol = 1e-13}) {
  const int K = m.K();
  if (f.size() != K || phi_src.size() != K) throw PreconditionError("f and phi_src must have K entries");
  if (!f.allFinite() || !phi_src.allFinite() || (f.array() < 0).any() || (phi_src.array() < 0).any())
    throw PreconditionError("f and phi_src must be finite and nonnegative");
  if (!(T > 0)) throw PreconditionError("horizon T must be positive");

  auto sys = [&](const detail::State& x, detail::State& dxdt, double) {
    const auto u = detail::view(x, 0, K);
    Eigen::Map<Vector>(dxdt.data(), K) = detail::laplace_rhs(m, u, phi_src);
  };
  detail::FieldBuilder out(K);
  detail::State x(f.data(), f.data() + K);
  detail::integrate_recorded(sys, x, 0.0, T, opt, [&](double t, const detail::State& s) {
    const Vector u = detail::view(s, 0, K);
    const Vector d1 = detail::laplace_rhs(m, u, phi_src);
    out.push(t, u, d1, detail::laplace_jacobian_apply(m, u, d1));
  });
  auto field = out.build(Monotonicity::none);
  if ((field.node_values().array() < -1e-12).any())
    throw NumericError("Log-Laplace solution became negative");
  return field;
}

/// Extinction function v together with its time derivative on the same nodes.
struct ExtinctionFields {
  ScalarField v;
  ScalarField dv;
};

namespace detail {

inline OdeOptions relative_options(const TimeGrid& grid) {
  // v and dv keep a fixed sign and decay exponentially; pure relative control.
  return {.rtol = 1e-10, .atol = 1e-300, .max_step = grid.max_step, .first_step = 1e-3 * grid.t0};
}

}  // namespace detail

/// Integrates (v, dv) jointly from the short-time asymptotic
/// alpha v_{t0} = 1/t0 - beta~/2 + t0 (beta~^2 - 2 L~ beta~)/12, where
/// beta~ = beta - alpha Q(1/alpha) and L~ is the generator with rates alpha(i) q_ij / alpha(j).
/// dv starts from the right-hand side at t0, so it is the exact derivative of
/// the regularised v rather than of the asymptotic -1/(alpha t0^2).
inline ExtinctionFields solve_extinction(const MultitypeModel& m, const TimeGrid& grid) {
  grid.check();
  const int K = m.K();
  const Vector zero = Vector::Zero(K);
  auto sys = [&](const detail::State& x, detail::State& dxdt, double) {
    const auto v = detail::view(x, 0, K);
    const auto w = detail::view(x, K, K);
    Eigen::Map<Vector>(dxdt.data(), K) = detail::laplace_rhs(m, v, zero);
    Eigen::Map<Vector>(dxdt.data() + K, K) = detail::laplace_jacobian_apply(m, v, w);
  };
  detail::State x(2 * static_cast<std::size_t>(K));
  // alpha v solves a Riccati equation with unit quadratic term whose expansion at 0
  // is 1/t - beta~/2 + c1 t + O(t^2); truncating after 1/t leaves an O(1) start-up error.
  const Vector beta_tilde = m.beta - m.alpha.cwiseProduct(m.Q * m.alpha.cwiseInverse());
  const Vector L_beta = m.alpha.cwiseProduct(m.Q * m.alpha.cwiseInverse().cwiseProduct(beta_tilde)) -
                        (m.beta - beta_tilde).cwiseProduct(beta_tilde);
  const Vector c1 = (beta_tilde.array().square() - 2.0 * L_beta.array()) / 12.0;
  const Vector v_start =
      (Vector::Constant(K, 1.0 / grid.t0) - 0.5 * beta_tilde + grid.t0 * c1).cwiseQuotient(m.alpha);
  const Vector w_start = detail::laplace_rhs(m, v_start, zero);
  for (int k = 0; k < K; ++k) {
    x[static_cast<std::size_t>(k)] = v_start(k);
    x[static_cast<std::size_t>(K + k)] = w_start(k);
  }
  detail::FieldBuilder vb(K), wb(K);
  try {
    detail::integrate_recorded(sys, x, grid.t0, grid.T, detail::relative_options(grid),
                               [&](double t, const detail::State& s) {
      const Vector v = detail::view(s, 0, K);
      const Vector w = detail::view(s, K, K);
      const Vector v1 = detail::laplace_rhs(m, v, zero);
      const Vector v2 = detail::laplace_jacobian_apply(m, v, v1);
      const Vector w1 = detail::laplace_jacobian_apply(m, v, w);
      const Vector w2 = detail::laplace_jacobian_apply(m, v, w1) -
                        2.0 * m.alpha.cwiseProduct(v1).cwiseProduct(w);
      vb.push(t, v, v1, v2);
      wb.push(t, w, w1, w2);
    });
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + "; try a larger t0", e.time());
  }
  ExtinctionFields out{vb.build(Monotonicity::nonincreasing), wb.build(Monotonicity::none)};
  if ((out.v.node_values().array() <= 0.0).any() || (out.dv.node_values().array() >= 0.0).any())
    throw NumericError("extinction function lost positivity or monotonicity; horizon too long "
                       "for double precision");
  return out;
}

/// v_t(x) = N_x[H_max > t] on [t0, T], flagged nonincreasing.
inline ScalarField solve_v(const MultitypeModel& m, const TimeGrid& grid) {
  return solve_extinction(m, grid).v;
}

/// d/dt v on the nodes of v, from the linearised equation
/// dw/dt = Q w - beta w - 2 alpha v w started from the right-hand side at t0.
inline ScalarField solve_dv(const MultitypeModel& m, const ScalarField& v) {
  const int K = m.K();
  if (v.K() != K) throw PreconditionError("v field has the wrong number of types");
  const double t0 = v.front();
  auto sys = [&](const detail::State& x, detail::State& dxdt, double t) {
    const auto w = detail::view(x, 0, K);
    Eigen::Map<Vector>(dxdt.data(), K) = detail::laplace_jacobian_apply(m, v.value(t), w);
  };
  const Vector w_start = detail::laplace_rhs(m, v.value(t0), Vector::Zero(K));
  detail::State x(w_start.data(), w_start.data() + K);

  OdeOptions opt{.rtol = 1e-10, .atol = 1e-300, .max_step = 1e300, .first_step = 1e-3 * t0};
  detail::FieldBuilder wb(K);
  const auto& nodes = v.times();
  auto record = [&](double t, const detail::State& s) {
    const Vector w = detail::view(s, 0, K);
    const Vector vt = v.value(t);
    const Vector w1 = detail::laplace_jacobian_apply(m, vt, w);
    const Vector v1 = detail::laplace_rhs(m, vt, Vector::Zero(K));
    wb.push(t, w, w1,
            detail::laplace_jacobian_apply(m, vt, w1) - 2.0 * m.alpha.cwiseProduct(v1).cwiseProduct(w));
  };
  record(nodes.front(), x);
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    opt.first_step = nodes[i] - nodes[i - 1];
    detail::integrate_recorded(sys, x, nodes[i - 1], nodes[i], opt, [](double, const detail::State&) {});
    record(nodes[i], x);
  }
  auto field = wb.build(Monotonicity::none);
  if ((field.node_values().array() >= 0.0).any())
    throw NumericError("dv lost strict negativity");
  return field;
}

/// Potential as a function of forward time s in [0, t].
using Potential = std::function<Vector(double)>;

/// E_x[exp(-int_0^t potential(s, Y_s) ds) f(Y_t)] for every x, by integrating
/// dw/dtau = Q w - potential(t - tau) w from w_0 = f over tau in [0, t].
inline Vector feynman_kac(const MultitypeModel& m, const Potential& potential, const Vector& f,
                          double t, OdeOptions opt = {.atol = 1e-14}) {
  const int K = m.K();
  if (f.size() != K) throw PreconditionError("terminal function must have K entries");
  if (t < 0) throw PreconditionError("time must be nonnegative");
  if (t == 0) return f;
  auto sys = [&](const detail::State& x, detail::State& dxdt, double tau) {
    const auto w = detail::view(x, 0, K);
    Eigen::Map<Vector>(dxdt.data(), K) = m.Q * w - potential(t - tau).cwiseProduct(w);
  };
  detail::State x(f.data(), f.data() + K);
  detail::integrate_recorded(sys, x, 0.0, t, opt, [](double, const detail::State&) {});
  return detail::view(x, 0, K);
}

/// tau -> E_x[exp(-int_0^tau potential(Y_s) ds) f(Y_tau)] for a time-constant potential,
/// as a field on [0, T].
inline ScalarField feynman_kac_field(const MultitypeModel& m, const Vector& potential,
                                     const Vector& f, double T, OdeOptions opt = {.atol = 1e-14}) {
  const int K = m.K();
  const Matrix A = m.Q - Matrix(potential.asDiagonal());
  auto sys = [&](const detail::State& x, detail::State& dxdt, double) {
    Eigen::Map<Vector>(dxdt.data(), K) = A * detail::view(x, 0, K);
  };
  detail::FieldBuilder wb(K);
  detail::State x(f.data(), f.data() + K);
  detail::integrate_recorded(sys, x, 0.0, T, opt, [&](double t, const detail::State& s) {
    const Vector w = detail::view(s, 0, K);
    const Vector w1 = A * w;
    wb.push(t, w, w1, A * w1);
  });
  return wb.build(Monotonicity::none);
}

/// Many-to-one first moment N_x[X_t(f)] = E_x[exp(-int_0^t beta(Y_s) ds) f(Y_t)].
inline Vector first_moment(const MultitypeModel& m, const Vector& f, double t) {
  const Vector beta = m.beta;
  return feynman_kac(m, [&](double) { return beta; }, f, t);
}

struct BismutSides {
  Vector lhs;
  Vector rhs;
};

/// Both sides of N_x[X_t(f) e^{-X_t(g)}] = E_x[exp(-int_0^t d_lambda psi(Y_s, u^g_{t-s}(Y_s)) ds) f(Y_t)].
/// The left side is the tangent of u^{g + eps f} at eps = 0 integrated jointly with u^g;
/// the right side is a Feynman-Kac solve against the interpolated u^g field.
inline BismutSides bismut_cross_check(const MultitypeModel& m, const Vector& f, const Vector& g,
                                      double t) {
  const int K = m.K();
  if ((f.array() < 0).any() || (g.array() < 0).any())
    throw PreconditionError("f and g must be nonnegative");
  const Vector zero = Vector::Zero(K);
  auto sys = [&](const detail::State& x, detail::State& dxdt, double) {
    const auto u = detail::view(x, 0, K);
    const auto d = detail::view(x, K, K);
    Eigen::Map<Vector>(dxdt.data(), K) = detail::laplace_rhs(m, u, zero);
    Eigen::Map<Vector>(dxdt.data() + K, K) = detail::laplace_jacobian_apply(m, u, d);
  };
  detail::State x(2 * static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    x[static_cast<std::size_t>(k)] = g(k);
    x[static_cast<std::size_t>(K + k)] = f(k);
  }
  detail::integrate_recorded(sys, x, 0.0, t, OdeOptions{.atol = 1e-14},
                             [](double, const detail::State&) {});
  BismutSides out;
  out.lhs = detail::view(x, K, K);

  const auto ug = solve_laplace(m, g, zero, t, OdeOptions{.atol = 1e-14, .max_step = 0.01});
  const Vector beta = m.beta;
  const Vector two_alpha = 2.0 * m.alpha;
  out.rhs = feynman_kac(
      m, [&](double s) { return Vector(beta + two_alpha.cwiseProduct(ug.value(t - s))); }, f, t);
  return out;
}

/// Extinction function of the homogeneous (beta0, 1) mechanism: beta0 / (e^{beta0 t} - 1).
inline double v0_closed(double beta0, double t) {
  if (!(t > 0)) throw PreconditionError("v0 needs t > 0");
  if (beta0 < 0) throw PreconditionError("v0 needs beta0 >= 0");
  if (beta0 < 1e-12) return 1.0 / t;
  return beta0 / std::expm1(beta0 * t);
}

/// d/dt of v0_closed.
inline double dv0_closed(double beta0, double t) {
  if (beta0 < 1e-12) return -1.0 / (t * t);
  const double e = std::expm1(beta0 * t);
  return -beta0 * beta0 * (e + 1.0) / (e * e);
}

}  // namespace willow
