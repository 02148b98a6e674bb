#pragma once

// Williams decomposition: extinction time, tree skeletons, the process
// conditioned on its extinction time, the Q-process, the decomposition of P_nu
// and the process seen backwards from extinction.
//
// Subtrees are realised by the particle oracle.  A family started by one
// particle of mass eps obeys the same equations as the superprocess once alpha
// is replaced by alpha - eps beta/2 and v by the particle extinction function
// v^eps (see particle.hpp).  Running the skeleton construction on those
// particle-level fields therefore gives the exact Williams decomposition of
// the particle system, up to the dropped subtrees of height <= delta.

#include "willow/girsanov.hpp"
#include "willow/numerics.hpp"
#include "willow/particle.hpp"
#include "willow/path.hpp"
#include "willow/random.hpp"
#include "willow/spectral.hpp"
#include "willow/spine.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace willow {

/// Continuum model and fields together with their particle-level counterparts.
struct ParticleContext {
  MultitypeModel model;
  MultitypeModel particle_model;  // alpha - eps beta/2
  ParticleFields pf;
  ExtinctionFields fields;        // (v^eps, d/du v^eps)
  double epsilon() const { return pf.epsilon; }
};

inline ParticleContext make_particle_context(const MultitypeModel& m, double eps, double horizon,
                                             double max_step = 0.05) {
  ParticleContext ctx;
  ctx.model = m;
  ctx.particle_model = m;
  ctx.particle_model.alpha = m.alpha - 0.5 * eps * m.beta;
  ctx.pf = solve_particle_fields(m, eps, horizon, max_step);
  ctx.fields = ExtinctionFields{ctx.pf.v, ctx.pf.w};
  return ctx;
}

// ---------------------------------------------------------------------------
// Extinction time

/// Draws H_max under P_nu by inverting F(h) = exp(-nu(v_h)) on the grid of v.
/// Draws beyond the grid are redrawn; the mass beyond the grid must stay below max_tail.
inline double sample_extinction_time(const ScalarField& v, const FiniteMeasure& nu, RandomStream& rng,
                                     double max_tail = 0.01, int max_redraws = 1000) {
  if (nu.is_zero()) throw PreconditionError("initial measure must be nonzero");
  auto load = [&](double h) { return nu.integrate(v.value(h)); };
  const double tail = -std::expm1(-load(v.back()));
  if (tail > max_tail)
    throw NumericError("grid horizon too short: P(H_max > " + std::to_string(v.back()) + ") = " +
                           std::to_string(tail),
                       v.back());
  for (int n = 0; n < max_redraws; ++n) {
    const double target = -std::log(rng.uniform());
    if (target < load(v.back())) continue;
    if (target >= load(v.front())) return v.front();
    double a = v.front(), b = v.back();
    for (int it = 0; it < 200 && b - a > 1e-14 * std::max(1.0, b); ++it) {
      const double mid = 0.5 * (a + b);
      if (load(mid) >= target) a = mid; else b = mid;
    }
    return 0.5 * (a + b);
  }
  throw BudgetError("extinction time redraw budget exhausted");
}

/// Same for the particle system started from the given counts: P(H <= h) = prod_i q_i(h)^n_i.
inline double sample_particle_extinction_time(const ParticleFields& pf, const std::vector<long>& counts,
                                              RandomStream& rng, int max_redraws = 1000) {
  for (int n = 0; n < max_redraws; ++n) {
    const double u = rng.uniform();
    if (u > particle_extinction_cdf(pf, counts, pf.horizon())) continue;
    double a = 0.0, b = pf.horizon();
    for (int it = 0; it < 200 && b - a > 1e-14 * std::max(1.0, b); ++it) {
      const double mid = 0.5 * (a + b);
      if (particle_extinction_cdf(pf, counts, mid) < u) a = mid; else b = mid;
    }
    return 0.5 * (a + b);
  }
  throw BudgetError("extinction time redraw budget exhausted");
}

// ---------------------------------------------------------------------------
// Skeleton

struct Skeleton;

struct SkeletonNode {
  double s = 0.0;       // birth time on the parent spine
  TypeIndex type = 0;   // type of the spine at s
  double r = 0.0;       // height of the subtree
  std::vector<Skeleton> child;  // empty or one skeleton with horizon r
};

struct Skeleton {
  TypedPath spine;
  double horizon = 0.0;
  double delta = 0.0;
  std::vector<SkeletonNode> nodes;
};

struct SkeletonOptions {
  bool recurse = true;
  long max_nodes = 200000;
};

namespace detail {

/// Poisson births along a spine on [0, h - delta] with intensity
/// 2 alpha(Y_s) (v_delta(Y_s) - v_{h-s}(Y_s)), heights from -dv_r on (delta, h - s).
/// With h = +inf the intensity is 2 alpha v_delta and heights live on (delta, grid end].
inline std::vector<SkeletonNode> sample_births(const MultitypeModel& m, const ScalarField& v,
                                               const TypedPath& spine, double h, double delta, double until,
                                               RandomStream& rng, long* clamped = nullptr) {
  std::vector<SkeletonNode> out;
  const bool finite = std::isfinite(h);
  const double end = finite ? std::min(h - delta, until) : until;
  spine.for_each_segment(0.0, end, [&](double a, double b, TypeIndex y) {
    const double vd = v.value(delta, y);
    const double bound = 2.0 * m.alpha(y) * vd;
    if (!(bound > 0.0)) return;
    for (double s = a + rng.exponential(bound); s < b; s += rng.exponential(bound)) {
      const double vrem = finite ? v.value(h - s, y) : 0.0;
      const double rate = 2.0 * m.alpha(y) * (vd - vrem);
      if (rng.uniform() * bound >= rate) continue;
      const double target = vd - rng.uniform() * (vd - vrem);
      double r;
      if (!finite && target <= v.node_values()(as_index(v.size() - 1), y)) {
        r = v.back();
        if (clamped) ++*clamped;
      } else {
        r = v.solve_decreasing(y, target);
      }
      r = std::max(r, std::nextafter(delta, std::numeric_limits<double>::infinity()));
      if (finite) r = std::min(r, std::nextafter(h - s, 0.0));
      out.push_back({s, y, r, {}});
    }
  });
  return out;
}

inline double expected_births(const MultitypeModel& m, const ScalarField& v, const TypedPath& spine, double h,
                              double delta) {
  double total = 0.0;
  spine.for_each_segment(0.0, h - delta, [&](double a, double b, TypeIndex y) {
    total += 2.0 * m.alpha(y) * (v.value(delta, y) * (b - a) - v.integral(h - b, h - a, y));
  });
  return total;
}

inline void grow_skeleton(const MultitypeModel& m, const ExtinctionFields& f, Skeleton& sk,
                          RandomStream& rng, const SkeletonOptions& opt, long& count) {
  sk.nodes = sample_births(m, f.v, sk.spine, sk.horizon, sk.delta, sk.horizon, rng);
  count += static_cast<long>(sk.nodes.size());
  if (count > opt.max_nodes)
    throw BudgetError("skeleton exceeded " + std::to_string(opt.max_nodes) +
                      " nodes (delta too small); this level alone expects " +
                      std::to_string(expected_births(m, f.v, sk.spine, sk.horizon, sk.delta)) + " nodes");
  if (!opt.recurse) return;
  for (auto& node : sk.nodes) {
    if (!(node.r > sk.delta)) continue;
    Skeleton child;
    child.horizon = node.r;
    child.delta = sk.delta;
    const auto rates = spine_rate_matrix(m, f.dv, node.r);
    child.spine = sample_chain(rates, node.type, 0.0, rates.hi(), rng);
    grow_skeleton(m, f, child, rng, opt, count);
    node.child.push_back(std::move(child));
  }
}

}  // namespace detail

/// Spine under P^(h)_x dressed with the Poissonian subtrees of height in (delta, h - s).
inline Skeleton sample_skeleton(const MultitypeModel& m, const ExtinctionFields& f, TypeIndex x, double h,
                                double delta, RandomStream& rng, const SkeletonOptions& opt = {}) {
  if (!(delta > f.v.front()) || !(h > f.v.front())) throw PreconditionError("skeleton needs t0 < delta and t0 < h");
  Skeleton sk;
  sk.horizon = h;
  sk.delta = delta;
  const auto rates = spine_rate_matrix(m, f.dv, h);
  sk.spine = sample_chain(rates, x, 0.0, rates.hi(), rng);
  long count = 0;
  detail::grow_skeleton(m, f, sk, rng, opt, count);
  return sk;
}

inline long count_nodes(const Skeleton& sk) {
  long n = static_cast<long>(sk.nodes.size());
  for (const auto& node : sk.nodes)
    for (const auto& c : node.child) n += count_nodes(c);
  return n;
}

inline nlohmann::json to_json(const Skeleton& sk) {
  nlohmann::json doc;
  doc["horizon"] = sk.horizon;
  doc["delta"] = sk.delta;
  doc["spine"] = to_json(sk.spine);
  nlohmann::json children = nlohmann::json::array();
  for (const auto& node : sk.nodes) {
    nlohmann::json n;
    n["s"] = node.s;
    n["type"] = node.type;
    n["r"] = node.r;
    n["children"] = node.child.empty() ? nlohmann::json::array() : to_json(node.child.front())["children"];
    children.push_back(std::move(n));
  }
  doc["children"] = std::move(children);
  return doc;
}

// ---------------------------------------------------------------------------
// Measure-valued samplers

namespace detail {

/// Adds the mass eps of the distinguished particle following `spine` on [0, end).
inline void add_spine_particle(MeasurePath& out, const TypedPath& spine, double eps, double end) {
  for (std::size_t k = 0; k < out.times.size(); ++k) {
    const double t = out.times[k];
    if (t < spine.start()) continue;
    const double upto = std::min(t, end);
    if (upto > spine.start()) out.occupation.row(as_index(k)) += eps * spine.occupation(out.K(), spine.start(), upto).transpose();
    if (t < end) out.masses(as_index(k), spine.at(std::min(t, spine.end()))) += eps;
  }
}

inline void check_grid(const std::vector<double>& grid, double lo, double hi) {
  if (grid.empty()) throw PreconditionError("output grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (grid[i] < lo - 1e-12 || grid[i] > hi + 1e-12 || (i && !(grid[i] > grid[i - 1])))
      throw PreconditionError("output grid must increase inside [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "]");
}

}  // namespace detail

struct ConditionedOptions {
  double delta = -1.0;            // default 0.05 h
  double skip_before = -1.0;      // subtrees dying before this time are not realised
};

/// Approximate N^(h)_x: particle-level spine conditioned on extinction at h,
/// Poissonian subtrees of height > delta realised as particle families conditioned
/// on their height.  Extinction is pinned at h.
inline MeasurePath sample_conditioned_superprocess(const ParticleContext& ctx, TypeIndex x, double h,
                                                   const std::vector<double>& grid, RandomStream& rng,
                                                   ConditionedOptions opt = {}) {
  const double delta = opt.delta > 0 ? opt.delta : 0.05 * h;
  if (h > ctx.pf.horizon()) throw PreconditionError("particle fields do not reach h");
  detail::check_grid(grid, 0.0, h);
  const double eps = ctx.epsilon();
  const auto& pm = ctx.particle_model;
  MeasurePath out(grid, pm.K());

  const auto rates = spine_rate_matrix(pm, ctx.fields.dv, h);
  const TypedPath spine = sample_chain(rates, x, 0.0, rates.hi(), rng);
  const double u_min = ctx.pf.v.times()[1];
  detail::add_spine_particle(out, spine, eps, h - u_min);

  const auto births = detail::sample_births(pm, ctx.fields.v, spine, h, delta, grid.back(), rng);
  long events = 0;
  std::size_t realised = 0;
  for (std::size_t j = 0; j < births.size(); ++j) {
    const auto& b = births[j];
    if (opt.skip_before > 0 && b.s + b.r <= opt.skip_before) {
      // Dead before the observed window: only its occupation is lost, never read there.
      continue;
    }
    MeasurePath part(grid, pm.K());
    auto sub = RandomStream(make_key(rng.bits(), "subtree"));
    events += simulate_conditioned_family(ctx.model, ctx.pf, b.type, b.s, b.s + b.r, grid.back(), part, sub).events;
    out.masses += part.masses;
    out.occupation += part.occupation;
    ++realised;
  }
  out.extinction = h;
  out.metadata["epsilon"] = eps;
  out.metadata["delta"] = delta;
  out.metadata["h"] = h;
  out.metadata["subtrees"] = static_cast<long>(realised);
  out.metadata["events"] = events;
  out.metadata["unresolved_final_time"] = u_min;
  return out;
}

/// Approximate Q-process X^(infinity) on [0, T]: phi0-spine with immigration at rate
/// 2 alpha v_delta along it, unconditioned heights on (delta, field horizon].
inline MeasurePath sample_qprocess(const ParticleContext& ctx, const SpectralData& s, TypeIndex x, double T,
                                   const std::vector<double>& grid, double delta, RandomStream& rng) {
  if (s.lambda0 < 0) throw PreconditionError("Q-process needs lambda0 >= 0");
  detail::check_grid(grid, 0.0, T);
  const double eps = ctx.epsilon();
  const auto& pm = ctx.particle_model;
  MeasurePath out(grid, pm.K());
  const TypedPath spine = sample_spine_qprocess(pm, s, x, T, rng);
  detail::add_spine_particle(out, spine, eps, std::numeric_limits<double>::infinity());
  long clamped = 0;
  const auto births = detail::sample_births(pm, ctx.fields.v, spine, std::numeric_limits<double>::infinity(),
                                            delta, T, rng, &clamped);
  long events = 0;
  for (const auto& b : births) {
    auto sub = RandomStream(make_key(rng.bits(), "subtree"));
    MeasurePath part(grid, pm.K());
    events += simulate_conditioned_family(ctx.model, ctx.pf, b.type, b.s, b.s + b.r, T, part, sub).events;
    out.masses += part.masses;
    out.occupation += part.occupation;
  }
  out.extinction = std::numeric_limits<double>::infinity();
  out.metadata["epsilon"] = eps;
  out.metadata["delta"] = delta;
  out.metadata["subtrees"] = static_cast<long>(births.size());
  out.metadata["heights_clamped"] = clamped;
  out.metadata["events"] = events;
  return out;
}

enum class RestMethod { conditioned, rejection };

struct Decomposition {
  MeasurePath path;
  double h0 = 0.0;
  TypeIndex x0 = 0;
  long rejections = 0;
};

/// P_nu as X' + X^(h0): extinction time h0, type x0 of the last-dying family with
/// probability proportional to nu(x) dv_{h0}(x), X^(h0) from the conditioned sampler
/// and X' the remaining families conditioned to die before h0.
inline Decomposition assemble_pnu_decomposition(const ParticleContext& ctx, const FiniteMeasure& nu,
                                                const std::vector<double>& grid, RandomStream& rng,
                                                ConditionedOptions opt = {},
                                                RestMethod method = RestMethod::conditioned,
                                                long max_attempts = 100000) {
  if (nu.is_zero()) throw PreconditionError("initial measure must be nonzero");
  const double eps = ctx.epsilon();
  const auto counts = initial_counts(nu, eps);
  const int K = nu.K();
  Decomposition out;
  out.h0 = sample_particle_extinction_time(ctx.pf, counts, rng);
  // Family that dies last: type i with weight n_i g_i(h0)/q_i(h0).
  Vector w(K);
  for (int i = 0; i < K; ++i)
    w(i) = counts[static_cast<std::size_t>(i)] > 0
               ? static_cast<double>(counts[static_cast<std::size_t>(i)]) * ctx.pf.g(out.h0, i) / ctx.pf.q(out.h0, i)
               : 0.0;
  double u = rng.uniform() * w.sum();
  out.x0 = 0;
  for (int i = 0; i < K; ++i) {
    if (w(i) <= 0) continue;
    out.x0 = i;
    u -= w(i);
    if (u < 0) break;
  }
  std::vector<double> inner;
  for (double t : grid) if (t <= out.h0) inner.push_back(t);
  out.path = MeasurePath(grid, K);
  if (!inner.empty()) {
    auto cond = sample_conditioned_superprocess(ctx, out.x0, out.h0, inner, rng, opt);
    out.path.masses.topRows(as_index(inner.size())) = cond.masses;
    out.path.occupation.topRows(as_index(inner.size())) = cond.occupation;
    for (std::size_t k = inner.size(); k < grid.size(); ++k)
      out.path.occupation.row(as_index(k)) = cond.occupation.row(as_index(inner.size() - 1));
    out.path.metadata = cond.metadata;
  }
  auto rest = counts;
  --rest[static_cast<std::size_t>(out.x0)];
  MeasurePath other(grid, K);
  if (method == RestMethod::rejection) {
    bool ok = false;
    for (long n = 0; n < max_attempts && !ok; ++n) {
      auto run = simulate_counts(ctx.model, rest, eps, std::max(out.h0, grid.back()), grid, rng);
      if (run.extinction < out.h0) {
        other = std::move(run.path);
        ok = true;
      } else {
        ++out.rejections;
      }
    }
    if (!ok)
      throw BudgetError("rejection budget for the remaining families exhausted; acceptance rate " +
                        std::to_string(particle_extinction_cdf(ctx.pf, rest, out.h0)));
  } else {
    for (int i = 0; i < K; ++i)
      for (long c = 0; c < rest[static_cast<std::size_t>(i)]; ++c) {
        // A family conditioned to die before h0 is a conditioned family with the distinguished
        // particle removed; sample its extinction time and condition on it exactly.
        const double qi = ctx.pf.q(out.h0, i);
        const double target = rng.uniform() * qi;
        double a = 0.0, b = out.h0;
        for (int it = 0; it < 200 && b - a > 1e-14 * std::max(1.0, b); ++it) {
          const double mid = 0.5 * (a + b);
          if (ctx.pf.q(mid, i) < target) a = mid; else b = mid;
        }
        const double H = 0.5 * (a + b);
        if (H <= ctx.pf.v.times()[1]) continue;
        auto sub = RandomStream(make_key(rng.bits(), "rest"));
        simulate_conditioned_family(ctx.model, ctx.pf, i, 0.0, H, grid.back(), other, sub);
      }
  }
  out.path.masses += other.masses;
  out.path.occupation += other.occupation;
  out.path.extinction = out.h0;
  out.path.metadata["h0"] = out.h0;
  out.path.metadata["x0"] = out.x0;
  out.path.metadata["rejections"] = out.rejections;
  return out;
}

/// theta_h(X^(h)) on [-window, 0]: the conditioned process seen from its extinction time.
inline MeasurePath sample_backward(const ParticleContext& ctx, TypeIndex x, double h, double window,
                                   const std::vector<double>& offsets, RandomStream& rng,
                                   ConditionedOptions opt = {}) {
  if (!(window > 0) || !(window < h)) throw PreconditionError("backward window must lie in (0, h)");
  std::vector<double> grid;
  for (double o : offsets) {
    if (o < -window - 1e-12 || o > 1e-12) throw PreconditionError("offsets must lie in [-window, 0]");
    grid.push_back(h + o);
  }
  opt.skip_before = h - window;
  auto fwd = sample_conditioned_superprocess(ctx, x, h, grid, rng, opt);
  fwd.times = offsets;
  // Occupation is only meaningful relative to the window start.
  for (Eigen::Index r = fwd.occupation.rows() - 1; r >= 0; --r) fwd.occupation.row(r) -= fwd.occupation.row(0);
  fwd.extinction = 0.0;
  fwd.metadata["window"] = window;
  return fwd;
}

}  // namespace willow
