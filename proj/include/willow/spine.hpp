#pragma once

// Spine laws: the conditioned spine P^(h), the phi0-spine of the Q-process,
// the Bismut spine, their forward marginals, and the backward weight.

#include "willow/field.hpp"
#include "willow/model.hpp"
#include "willow/numerics.hpp"
#include "willow/path.hpp"
#include "willow/random.hpp"
#include "willow/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace willow {

/// Time-dependent jump rates of a type chain on a validity window [lo, hi].
/// Either constant, or of the form q_ij F_{horizon - t}(j) / F_{horizon - t}(i)
/// for a field F of constant sign (a Doob transform by a space-time harmonic function).
class RateFunction {
 public:
  static RateFunction constant(Matrix generator, double lo, double hi) {
    RateFunction r;
    r.K_ = static_cast<int>(generator.rows());
    r.base_ = std::move(generator);
    r.lo_ = lo;
    r.hi_ = hi;
    r.breaks_ = {lo, hi};
    r.bounds_ = Matrix(1, r.K_);
    for (int i = 0; i < r.K_; ++i) r.bounds_(0, i) = -r.base_(i, i);
    return r;
  }

  /// Rates q_ij F(horizon - t, j) / F(horizon - t, i) for t in [0, horizon - F.front()].
  static RateFunction ratio(const Matrix& Q, ScalarField F, double horizon) {
    if (horizon > F.back() + 1e-12) throw PreconditionError("field does not reach the horizon");
    RateFunction r;
    r.K_ = static_cast<int>(Q.rows());
    r.base_ = Q;
    r.horizon_ = horizon;
    r.lo_ = 0.0;
    r.hi_ = horizon - F.front();
    // Spine-time breakpoints are the field nodes seen backwards.
    const auto& tau = F.times();
    std::vector<double> br{r.lo_};
    for (auto it = tau.rbegin(); it != tau.rend(); ++it) {
      const double t = horizon - *it;
      if (t > br.back() && t < r.hi_) br.push_back(t);
    }
    br.push_back(r.hi_);
    r.breaks_ = std::move(br);
    r.field_ = std::make_shared<ScalarField>(std::move(F));
    r.build_bounds();
    return r;
  }

  int K() const { return K_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  bool is_constant() const { return !field_; }
  const std::vector<double>& breakpoints() const { return breaks_; }

  double rate(double t, TypeIndex i, TypeIndex j) const {
    if (i == j) return -exit_rate(t, i);
    if (!field_) return base_(i, j);
    check(t);
    const double tau = horizon_ - t;
    return base_(i, j) * field_->value(tau, j) / field_->value(tau, i);
  }

  double exit_rate(double t, TypeIndex i) const {
    if (!field_) return -base_(i, i);
    check(t);
    const double tau = horizon_ - t;
    const double fi = field_->value(tau, i);
    double out = 0.0;
    for (int j = 0; j < K_; ++j)
      if (j != i && base_(i, j) > 0.0) out += base_(i, j) * field_->value(tau, j) / fi;
    return out;
  }

  /// Generator at time t (rows sum to zero).
  Matrix at(double t) const {
    if (!field_) return base_;
    Matrix G = Matrix::Zero(K_, K_);
    for (int i = 0; i < K_; ++i) {
      for (int j = 0; j < K_; ++j)
        if (j != i) G(i, j) = rate(t, i, j);
      G(i, i) = -G.row(i).sum();
    }
    return G;
  }

  /// Upper bound of the exit rate of type i on [breakpoints[k], breakpoints[k+1]].
  double exit_bound(std::size_t k, TypeIndex i) const {
    return bounds_(as_index(std::min<std::size_t>(k, static_cast<std::size_t>(bounds_.rows() - 1))), i);
  }

 private:
  void check(double t) const {
    if (t < lo_ - 1e-12 || t > hi_ + 1e-12)
      throw NumericError("rate evaluated outside its validity window [" + std::to_string(lo_) + ", " +
                             std::to_string(hi_) + "]",
                         t);
  }

  void build_bounds() {
    const auto n = breaks_.size() - 1;
    bounds_ = Matrix::Zero(as_index(n), K_);
    for (std::size_t k = 0; k < n; ++k) {
      // Extremes of |F| over the piece, from the end points and the midpoint, with a margin.
      const double ta = horizon_ - breaks_[k + 1], tb = horizon_ - breaks_[k];
      Vector fmin(K_), fmax(K_);
      for (int j = 0; j < K_; ++j) {
        double mn = std::numeric_limits<double>::infinity(), mx = 0.0;
        for (double tau : {ta, 0.5 * (ta + tb), tb}) {
          const double f = std::abs(field_->value(std::max(tau, field_->front()), j));
          mn = std::min(mn, f);
          mx = std::max(mx, f);
        }
        fmin(j) = mn;
        fmax(j) = mx;
      }
      for (int i = 0; i < K_; ++i) {
        double b = 0.0;
        for (int j = 0; j < K_; ++j)
          if (j != i) b += base_(i, j) * fmax(j) / fmin(i);
        bounds_(as_index(k), i) = b * 1.05;
      }
    }
  }

  int K_ = 0;
  Matrix base_;
  double horizon_ = 0.0;
  double lo_ = 0.0;
  double hi_ = 0.0;
  std::vector<double> breaks_;
  Matrix bounds_;
  std::shared_ptr<const ScalarField> field_;
};

/// Rates of P^(h): (dv_{h-t}(j) / dv_{h-t}(i)) q_ij on [0, h - t0].
inline RateFunction spine_rate_matrix(const MultitypeModel& m, const ScalarField& dv, double h) {
  if (!(h > dv.front())) throw PreconditionError("h must exceed t0");
  return RateFunction::ratio(m.Q, dv, h);
}

/// Rates of the phi0-spine, constant in time.
inline RateFunction qprocess_rates(const MultitypeModel& m, const SpectralData& s, double T) {
  return RateFunction::constant(qprocess_generator(m, s), 0.0, T);
}

/// Rates of the Bismut spine on [0, t]: Doob transform by w(tau, y) = E_y[exp(-int_0^tau beta)].
inline RateFunction bismut_rates(const MultitypeModel& m, double t) {
  if (!(t > 0)) throw PreconditionError("Bismut spine needs t > 0");
  auto w = feynman_kac_field(m, m.beta, Vector::Ones(m.K()), t,
                             OdeOptions{.rtol = 1e-11, .atol = 1e-300, .max_step = 0.05});
  return RateFunction::ratio(m.Q, std::move(w), t);
}

/// Exact simulation of the chain with the given rates on [a, b] by thinning
/// against the per-piece exit bound (Gillespie when the rates are constant).
inline TypedPath sample_chain(const RateFunction& rates, TypeIndex x, double a, double b,
                              RandomStream& rng) {
  if (a < rates.lo() - 1e-12 || b > rates.hi() + 1e-12 || b < a)
    throw PreconditionError("sampling interval outside the rate window");
  const int K = rates.K();
  TypedPath path(x, a, b);
  const auto& br = rates.breakpoints();
  std::size_t k = static_cast<std::size_t>(std::upper_bound(br.begin(), br.end(), a) - br.begin());
  k = k == 0 ? 0 : k - 1;
  double t = a;
  TypeIndex y = x;
  std::vector<double> w(static_cast<std::size_t>(K));
  while (t < b) {
    const double piece_end = std::min(b, k + 1 < br.size() ? br[k + 1] : b);
    const double bound = rates.exit_bound(k, y);
    const double s = bound > 0.0 ? t + rng.exponential(bound) : std::numeric_limits<double>::infinity();
    if (s >= piece_end) {
      t = piece_end;
      ++k;
      continue;
    }
    t = s;
    double total = 0.0;
    for (int j = 0; j < K; ++j) {
      w[static_cast<std::size_t>(j)] = j == y ? 0.0 : rates.rate(t, y, j);
      total += w[static_cast<std::size_t>(j)];
    }
    if (total > bound * (1.0 + 1e-9))
      throw NumericError("thinning bound violated (" + std::to_string(total) + " > " +
                             std::to_string(bound) + "); field grid too coarse",
                         t);
    double u = rng.uniform() * bound;
    if (u >= total) continue;
    TypeIndex next = y;
    for (int j = 0; j < K; ++j) {
      u -= w[static_cast<std::size_t>(j)];
      if (j != y && u < 0.0) {
        next = j;
        break;
      }
    }
    if (next == y) continue;  // rounding at the edge of the last bin
    path.push_jump(t, next);
    y = next;
  }
  return path;
}

/// Plain chain under P_x on [0, t].
inline TypedPath sample_plain_chain(const MultitypeModel& m, TypeIndex x, double t, RandomStream& rng) {
  return sample_chain(RateFunction::constant(m.Q, 0.0, t), x, 0.0, t, rng);
}

/// Path under P^(h)_x on [0, h - t0].
inline TypedPath sample_spine_h(const MultitypeModel& m, const ExtinctionFields& fields, TypeIndex x,
                                double h, RandomStream& rng) {
  const auto rates = spine_rate_matrix(m, fields.dv, h);
  return sample_chain(rates, x, 0.0, rates.hi(), rng);
}

/// Path under P^{phi0}_x on [0, T].
inline TypedPath sample_spine_qprocess(const MultitypeModel& m, const SpectralData& s, TypeIndex x,
                                       double T, RandomStream& rng) {
  return sample_chain(qprocess_rates(m, s, T), x, 0.0, T, rng);
}

enum class BismutMethod { transform, rejection };

/// Path on [0, t] with density exp(-int_0^t beta(Y)) / E_x[exp(-int_0^t beta(Y))] w.r.t. P_x.
inline TypedPath sample_bismut_spine(const MultitypeModel& m, TypeIndex x, double t, RandomStream& rng,
                                     BismutMethod method = BismutMethod::transform,
                                     long max_attempts = 1000000) {
  if (method == BismutMethod::transform) {
    const auto rates = bismut_rates(m, t);
    return sample_chain(rates, x, 0.0, t, rng);
  }
  const double bmin = m.beta.minCoeff();
  const Vector excess = m.beta.array() - bmin;
  const auto plain = RateFunction::constant(m.Q, 0.0, t);
  for (long n = 1; n <= max_attempts; ++n) {
    auto p = sample_chain(plain, x, 0.0, t, rng);
    if (rng.uniform() < std::exp(-p.integrate(excess, 0.0, t))) return p;
  }
  throw BudgetError("Bismut rejection budget of " + std::to_string(max_attempts) +
                    " attempts exhausted (acceptance rate below " +
                    std::to_string(1.0 / static_cast<double>(max_attempts)) + ")");
}

/// Forward equation dp/dt = p R(t) from p = delta_x at the window start; one
/// probability vector per requested time (times ascending, inside the window).
inline std::vector<Vector> spine_marginal(const RateFunction& rates, TypeIndex x,
                                          const std::vector<double>& times) {
  const int K = rates.K();
  std::vector<Vector> out;
  detail::State p(static_cast<std::size_t>(K), 0.0);
  p[static_cast<std::size_t>(x)] = 1.0;
  double t = rates.lo();
  auto sys = [&](const detail::State& s, detail::State& ds, double time) {
    const Vector row = detail::view(s, 0, K);
    Eigen::Map<Vector>(ds.data(), K) = rates.at(time).transpose() * row;
  };
  const OdeOptions opt{.rtol = 1e-11, .atol = 1e-13, .max_step = 0.05};
  for (double target : times) {
    if (target < t - 1e-12 || target > rates.hi() + 1e-12)
      throw PreconditionError("marginal times must be ascending and inside the rate window");
    if (target > t) detail::integrate_recorded(sys, p, t, std::min(target, rates.hi()), opt,
                                               [](double, const detail::State&) {});
    t = std::max(t, target);
    out.push_back(detail::view(p, 0, K));
  }
  return out;
}

struct BackwardWeight {
  double weight = 0.0;      // unnormalised
  double truncation = 0.0;  // bound on the relative error from starting at -T instead of -infinity
};

/// Weight of a phi0-spine path on [-T, 0] towards the backward-from-extinction law:
/// exp(-2 int_{-T}^{-t} alpha v_{-s}(Y_s) ds) |dv_t(Y_{-t})| / phi0(Y_{-t}).
/// (alpha phi0 v^{phi0} = alpha v, so v and dv are taken unscaled.)
inline BackwardWeight backward_weight(const MultitypeModel& m, const SpectralData& s,
                                      const ExtinctionFields& fields, const TypedPath& p, double t) {
  if (!(s.lambda0 > 0)) throw PreconditionError("backward weight needs lambda0 > 0");
  const double T = -p.start();
  if (!(p.end() == 0.0) || !(T > t) || !(t >= fields.v.front()))
    throw PreconditionError("backward weight needs a path on [-T, 0] with T > t >= t0");
  if (T > fields.v.back()) throw PreconditionError("extinction fields do not reach T");
  double exponent = 0.0;
  p.for_each_segment(-T, -t, [&](double a, double b, TypeIndex y) {
    exponent += 2.0 * m.alpha(y) * fields.v.integral(-b, -a, y);
  });
  const TypeIndex y = p.at(-t);
  BackwardWeight out;
  out.weight = std::exp(-exponent) * std::abs(fields.dv.value(t, y)) / s.phi0(y);

  // Envelope v_r(x) <= C4 phi0(x) e^{-lambda0 r} from the second half of the grid,
  // integrated over (T, infinity).
  const auto& tau = fields.v.times();
  double C4 = 0.0;
  for (std::size_t r = tau.size() / 2; r < tau.size(); ++r)
    for (int k = 0; k < m.K(); ++k)
      C4 = std::max(C4, fields.v.node_values()(as_index(r), k) / s.phi0(k) * std::exp(s.lambda0 * tau[r]));
  const double tail = 2.0 * (m.alpha.cwiseProduct(s.phi0)).maxCoeff() * C4 *
                      std::exp(-s.lambda0 * T) / s.lambda0;
  out.truncation = -std::expm1(-tail);
  return out;
}

}  // namespace willow
