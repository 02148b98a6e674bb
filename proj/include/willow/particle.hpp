#pragma once

// Branching-particle approximation of the (L, beta, alpha)-superprocess.
//
// Every particle carries mass eps, moves as a Q-chain and branches at rate
// 2 alpha/eps into 0 or 2 offspring with p2 = (1 - eps beta/(2 alpha))/2, so the
// mass has drift -beta X and quadratic variation 2 alpha X per unit time.
//
// The family of a single particle has an exact extinction law: with
// q_i(u) = P(extinct by u | one particle of type i) and v^eps = (1 - q)/eps,
//     d/du v^eps = Q v^eps - beta v^eps - (alpha - eps beta/2) (v^eps)^2,   v^eps(0) = 1/eps,
// the particle analogue of the extinction function.  Those fields drive both
// the deterministic epsilon-bias envelopes and the exact simulation of a family
// conditioned on its extinction time.

#include "willow/field.hpp"
#include "willow/model.hpp"
#include "willow/numerics.hpp"
#include "willow/path.hpp"
#include "willow/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace willow {

struct BranchingRates {
  double epsilon;
  Vector branch;  // 2 alpha / eps
  Vector p2;      // probability of two offspring
  Vector exit;    // -Q(i,i)
  Vector total;   // branch + exit
};

/// Largest admissible particle mass: p2 in [0, 1] needs eps |beta| <= 2 alpha.
inline double max_epsilon(const MultitypeModel& m) {
  double out = std::numeric_limits<double>::infinity();
  for (int i = 0; i < m.K(); ++i)
    if (m.beta(i) != 0.0) out = std::min(out, 2.0 * m.alpha(i) / std::abs(m.beta(i)));
  return out;
}

inline BranchingRates branching_rates(const MultitypeModel& m, double eps) {
  if (!(eps > 0.0) || !(eps < max_epsilon(m)))
    throw PreconditionError("particle mass epsilon = " + std::to_string(eps) +
                            " violates simulate_particles precondition epsilon < min_i 2 alpha_i/|beta_i| = " +
                            std::to_string(max_epsilon(m)));
  BranchingRates r;
  r.epsilon = eps;
  r.branch = 2.0 * m.alpha / eps;
  r.p2 = (1.0 - eps * m.beta.cwiseQuotient(2.0 * m.alpha).array()) / 2.0;
  r.exit = -m.Q.diagonal();
  r.total = r.branch + r.exit;
  return r;
}

/// Particles per type for an initial measure: ceil(nu(i)/eps), ignoring round-off.
inline std::vector<long> initial_counts(const FiniteMeasure& nu, double eps) {
  std::vector<long> out;
  for (int i = 0; i < nu.K(); ++i) {
    if (nu.masses(i) < 0) throw PreconditionError("initial measure must be nonnegative");
    out.push_back(static_cast<long>(std::ceil(nu.masses(i) / eps - 1e-9)));
  }
  return out;
}

/// Chooses j != i with probability proportional to Q(i, j).
inline TypeIndex draw_jump_target(const MultitypeModel& m, TypeIndex i, RandomStream& rng) {
  double u = rng.uniform() * -m.Q(i, i);
  TypeIndex last = i;
  for (int j = 0; j < m.K(); ++j) {
    if (j == i || m.Q(i, j) <= 0.0) continue;
    last = j;
    u -= m.Q(i, j);
    if (u < 0.0) return j;
  }
  return last;
}

namespace detail {

/// Writes eps * counts into a measure path while time advances, keeping the
/// exact running occupation integral.
class PathRecorder {
 public:
  PathRecorder(MeasurePath& out, double eps, double start) : out_(out), eps_(eps), time_(start) {
    next_ = static_cast<std::size_t>(std::lower_bound(out.times.begin(), out.times.end(), start) -
                                     out.times.begin());
    running_ = Vector::Zero(out.K());
  }

  /// counts held constant on [current time, t).
  template <class Counts>
  void advance(double t, const Counts& counts) {
    while (next_ < out_.times.size() && out_.times[next_] <= t) {
      const double tk = out_.times[next_];
      for (int k = 0; k < out_.K(); ++k) {
        const double mass = eps_ * static_cast<double>(counts[static_cast<std::size_t>(k)]);
        running_(k) += mass * (tk - time_);
        out_.masses(as_index(next_), k) += mass;
      }
      out_.occupation.row(as_index(next_)) += running_.transpose();
      time_ = tk;
      ++next_;
    }
    if (t > time_) {
      for (int k = 0; k < out_.K(); ++k)
        running_(k) += eps_ * static_cast<double>(counts[static_cast<std::size_t>(k)]) * (t - time_);
      time_ = t;
    }
  }

  /// The family is dead: later nodes only see the accumulated occupation.
  void finish_extinct() {
    for (; next_ < out_.times.size(); ++next_) out_.occupation.row(as_index(next_)) += running_.transpose();
  }

 private:
  MeasurePath& out_;
  double eps_;
  double time_;
  std::size_t next_ = 0;
  Vector running_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Count-based simulation (no genealogy)

struct CountRun {
  MeasurePath path;
  double extinction = std::numeric_limits<double>::infinity();  // +inf: alive at the horizon
  long events = 0;
};

/// Exact Gillespie simulation of type counts on [0, T], recorded on grid (ascending, within [0, T]).
inline CountRun simulate_counts(const MultitypeModel& m, std::vector<long> counts, double eps, double T,
                                const std::vector<double>& grid, RandomStream& rng,
                                long population_cap = 50'000'000) {
  const auto br = branching_rates(m, eps);
  const int K = m.K();
  CountRun run{MeasurePath(grid, K)};
  detail::PathRecorder rec(run.path, eps, 0.0);
  double t = 0.0;
  long alive = 0;
  for (long c : counts) alive += c;
  std::vector<double> w(static_cast<std::size_t>(K));
  while (alive > 0) {
    double total = 0.0;
    for (int i = 0; i < K; ++i) {
      w[static_cast<std::size_t>(i)] = static_cast<double>(counts[static_cast<std::size_t>(i)]) * br.total(i);
      total += w[static_cast<std::size_t>(i)];
    }
    const double next = t + rng.exponential(total);
    if (next >= T) break;
    rec.advance(next, counts);
    t = next;
    double u = rng.uniform() * total;
    int i = 0;
    for (; i < K - 1; ++i) {
      u -= w[static_cast<std::size_t>(i)];
      if (u < 0.0) break;
    }
    const auto si = static_cast<std::size_t>(i);
    if (counts[si] == 0) continue;  // rounding at the edge of the last bin
    ++run.events;
    const double v = rng.uniform() * br.total(i);
    if (v < br.branch(i)) {
      if (v < br.branch(i) * br.p2(i)) {
        ++counts[si];
        if (++alive > population_cap)
          throw BudgetError("particle population exceeded the cap of " + std::to_string(population_cap) +
                            " at t = " + std::to_string(t));
      } else {
        --counts[si];
        --alive;
      }
    } else {
      --counts[si];
      ++counts[static_cast<std::size_t>(draw_jump_target(m, i, rng))];
    }
  }
  if (alive == 0) {
    run.extinction = t;
    run.path.extinction = t;
    rec.finish_extinct();
  } else {
    rec.advance(T, counts);
    run.path.extinction = std::numeric_limits<double>::infinity();
  }
  run.path.metadata["epsilon"] = eps;
  return run;
}

// ---------------------------------------------------------------------------
// Individual particles with genealogy

enum class EventKind { jump, death, split };

struct ParticleEvent {
  double time;
  long id;
  EventKind kind;
  long data;  // new type for a jump, child id for a split
};

struct ParticleRecord {
  long parent = -1;
  double birth = 0.0;
  TypeIndex birth_type = 0;
  double death = std::numeric_limits<double>::infinity();
  std::vector<Jump> jumps;
};

struct ParticleTrajectory {
  double epsilon = 0.0;
  double horizon = 0.0;
  std::vector<ParticleRecord> particles;
  std::vector<ParticleEvent> events;
  MeasurePath path;
  double extinction = std::numeric_limits<double>::infinity();
  long last = -1;  // id of the particle whose death ended the population
  /// marks[id][k]: type of the ancestor of particle id at mark time k (-1 if born later).
  std::vector<std::vector<TypeIndex>> marks;
};

struct ParticleOptions {
  std::vector<double> grid;         // snapshot times
  std::vector<double> mark_times;   // ancestral types recorded at these times
  bool genealogy = true;            // keep per-particle records and the event list
  long population_cap = 5'000'000;
};

/// Exact simulation of individual particles on [0, T] from ceil(nu(i)/eps) particles per type.
inline ParticleTrajectory simulate_particles(const MultitypeModel& m, const FiniteMeasure& nu, double eps,
                                             double T, RandomStream& rng, const ParticleOptions& opt = {}) {
  const auto br = branching_rates(m, eps);
  const int K = m.K();
  if (nu.K() != K) throw PreconditionError("initial measure has the wrong number of types");
  ParticleTrajectory out;
  out.epsilon = eps;
  out.horizon = T;
  out.path = MeasurePath(opt.grid, K);
  detail::PathRecorder rec(out.path, eps, 0.0);

  std::vector<std::vector<long>> by_type(static_cast<std::size_t>(K));
  std::vector<std::size_t> slot;
  std::vector<TypeIndex> type_of;
  std::vector<long> counts(static_cast<std::size_t>(K), 0);
  const std::size_t n_marks = opt.mark_times.size();
  std::size_t next_mark = 0;

  auto add = [&](TypeIndex y, long parent, double t) {
    const long id = static_cast<long>(type_of.size());
    type_of.push_back(y);
    auto& list = by_type[static_cast<std::size_t>(y)];
    slot.push_back(list.size());
    list.push_back(id);
    ++counts[static_cast<std::size_t>(y)];
    if (opt.genealogy) out.particles.push_back({parent, t, y, std::numeric_limits<double>::infinity(), {}});
    if (n_marks) {
      out.marks.emplace_back(n_marks, -1);
      if (parent >= 0) out.marks.back() = out.marks[static_cast<std::size_t>(parent)];
    }
    return id;
  };
  auto remove = [&](long id) {
    const TypeIndex y = type_of[static_cast<std::size_t>(id)];
    auto& list = by_type[static_cast<std::size_t>(y)];
    const std::size_t s = slot[static_cast<std::size_t>(id)];
    list[s] = list.back();
    slot[static_cast<std::size_t>(list[s])] = s;
    list.pop_back();
    --counts[static_cast<std::size_t>(y)];
  };
  auto stamp_marks = [&](double t) {
    while (next_mark < n_marks && opt.mark_times[next_mark] <= t) {
      for (int y = 0; y < K; ++y)
        for (long id : by_type[static_cast<std::size_t>(y)]) out.marks[static_cast<std::size_t>(id)][next_mark] = y;
      ++next_mark;
    }
  };

  const auto init = initial_counts(nu, eps);
  for (int y = 0; y < K; ++y)
    for (long c = 0; c < init[static_cast<std::size_t>(y)]; ++c) add(y, -1, 0.0);
  stamp_marks(0.0);

  double t = 0.0;
  long alive = static_cast<long>(type_of.size());
  std::vector<double> w(static_cast<std::size_t>(K));
  while (alive > 0) {
    double total = 0.0;
    for (int i = 0; i < K; ++i) {
      w[static_cast<std::size_t>(i)] = static_cast<double>(counts[static_cast<std::size_t>(i)]) * br.total(i);
      total += w[static_cast<std::size_t>(i)];
    }
    const double next = t + rng.exponential(total);
    if (next >= T) break;
    stamp_marks(next);
    rec.advance(next, counts);
    t = next;
    double u = rng.uniform() * total;
    int i = 0;
    for (; i < K - 1; ++i) {
      u -= w[static_cast<std::size_t>(i)];
      if (u < 0.0) break;
    }
    const auto& list = by_type[static_cast<std::size_t>(i)];
    if (list.empty()) continue;
    const long id = list[static_cast<std::size_t>(rng.below(list.size()))];
    const double v = rng.uniform() * br.total(i);
    if (v < br.branch(i)) {
      if (v < br.branch(i) * br.p2(i)) {
        const long child = add(i, id, t);
        if (opt.genealogy) out.events.push_back({t, id, EventKind::split, child});
        if (++alive > opt.population_cap)
          throw BudgetError("particle population exceeded the cap of " + std::to_string(opt.population_cap) +
                            " at t = " + std::to_string(t));
      } else {
        remove(id);
        --alive;
        if (opt.genealogy) {
          out.particles[static_cast<std::size_t>(id)].death = t;
          out.events.push_back({t, id, EventKind::death, -1});
        }
        if (alive == 0) out.last = id;
      }
    } else {
      const TypeIndex j = draw_jump_target(m, i, rng);
      remove(id);
      type_of[static_cast<std::size_t>(id)] = j;
      auto& target = by_type[static_cast<std::size_t>(j)];
      slot[static_cast<std::size_t>(id)] = target.size();
      target.push_back(id);
      ++counts[static_cast<std::size_t>(j)];
      if (opt.genealogy) {
        out.particles[static_cast<std::size_t>(id)].jumps.push_back({t, j});
        out.events.push_back({t, id, EventKind::jump, j});
      }
    }
  }
  if (alive == 0) {
    out.extinction = t;
    out.path.extinction = t;
    rec.finish_extinct();
  } else {
    stamp_marks(T);
    rec.advance(T, counts);
    out.path.extinction = std::numeric_limits<double>::infinity();
  }
  out.path.metadata["epsilon"] = eps;
  return out;
}

/// Last death time, +inf if alive at the horizon, 0 for an empty start.
inline double empirical_extinction_time(const ParticleTrajectory& traj) { return traj.extinction; }

/// Id of the particle with the maximal death time.  Deaths are events of a
/// continuous-time chain, so the maximum is attained by a single particle.
inline long last_particle(const ParticleTrajectory& traj) {
  if (std::isinf(traj.extinction) || traj.last < 0)
    throw PreconditionError("trajectory is not extinct before its horizon");
  return traj.last;
}

/// Types of the last particle's ancestors at the requested mark times.
inline std::vector<TypeIndex> last_lineage_marks(const ParticleTrajectory& traj) {
  return traj.marks.at(static_cast<std::size_t>(last_particle(traj)));
}

/// Ancestral type path of the particle with the maximal death time, on [0, H_max].
inline TypedPath extract_last_lineage(const ParticleTrajectory& traj) {
  const long last = last_particle(traj);
  if (static_cast<std::size_t>(last) >= traj.particles.size())
    throw PreconditionError("trajectory was simulated without genealogy");
  std::vector<long> chain;
  for (long id = last; id >= 0; id = traj.particles[static_cast<std::size_t>(id)].parent)
    chain.push_back(id);
  std::reverse(chain.begin(), chain.end());
  const auto& root = traj.particles[static_cast<std::size_t>(chain.front())];
  TypedPath path(root.birth_type, 0.0, traj.extinction);
  for (std::size_t k = 0; k < chain.size(); ++k) {
    const auto& rec = traj.particles[static_cast<std::size_t>(chain[k])];
    const double until = k + 1 < chain.size() ? traj.particles[static_cast<std::size_t>(chain[k + 1])].birth
                                              : rec.death;
    for (const auto& j : rec.jumps)
      if (j.time < until) path.push_jump(j.time, j.type);
  }
  return path;
}

// ---------------------------------------------------------------------------
// Exact single-particle extinction law

struct ParticleFields {
  double epsilon = 0.0;
  ScalarField v;  // v^eps_u = (1 - q(u))/eps
  ScalarField w;  // d/du v^eps, negative
  double horizon() const { return v.back(); }
  /// Extinction probability by remaining time u of one particle's family.
  double q(double u, TypeIndex i) const { return u <= 0.0 ? 0.0 : 1.0 - epsilon * v.value(u, i); }
  /// Density of that extinction time.
  double g(double u, TypeIndex i) const { return -epsilon * w.value(u, i); }

  /// Per-piece envelopes of q and g (rows: pieces between nodes), from node and
  /// midpoint values, widened slightly.
  Matrix q_lo, q_hi, g_lo, g_hi;

  void build_bounds() {
    const auto& tau = v.times();
    const auto n = as_index(tau.size() - 1);
    const int K = v.K();
    q_lo.resize(n, K), q_hi.resize(n, K), g_lo.resize(n, K), g_hi.resize(n, K);
    for (Eigen::Index r = 0; r < n; ++r) {
      const std::size_t p = static_cast<std::size_t>(r);
      const double ua = tau[p], ub = tau[p + 1], um = 0.5 * (ua + ub);
      for (int j = 0; j < K; ++j) {
        const double qa = q(ua, j), qb = q(ub, j), qm = q(um, j);
        const double ga = g(ua, j), gb = g(ub, j), gm = g(um, j);
        q_lo(r, j) = std::min({qa, qb, qm}) * (1 - 1e-3);
        q_hi(r, j) = std::min(1.0, std::max({qa, qb, qm}) * (1 + 1e-3));
        g_lo(r, j) = std::min({ga, gb, gm}) * (1 - 2e-2);
        g_hi(r, j) = std::max({ga, gb, gm}) * (1 + 2e-2);
      }
    }
  }
};

inline ParticleFields solve_particle_fields(const MultitypeModel& m, double eps, double T,
                                            double max_step = 0.05) {
  branching_rates(m, eps);
  MultitypeModel me = m;
  me.alpha = m.alpha - 0.5 * eps * m.beta;
  const int K = m.K();
  const Vector zero = Vector::Zero(K);
  auto sys = [&](const detail::State& x, detail::State& dxdt, double) {
    const auto v = detail::view(x, 0, K);
    const auto w = detail::view(x, K, K);
    Eigen::Map<Vector>(dxdt.data(), K) = detail::laplace_rhs(me, v, zero);
    Eigen::Map<Vector>(dxdt.data() + K, K) = detail::laplace_jacobian_apply(me, v, w);
  };
  const Vector v0 = Vector::Constant(K, 1.0 / eps);
  const Vector w0 = detail::laplace_rhs(me, v0, zero);
  detail::State x(2 * static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    x[static_cast<std::size_t>(k)] = v0(k);
    x[static_cast<std::size_t>(K + k)] = w0(k);
  }
  detail::FieldBuilder vb(K), wb(K);
  const OdeOptions opt{.rtol = 1e-11, .atol = 1e-300, .max_step = max_step, .first_step = 1e-4 * eps};
  detail::integrate_recorded(sys, x, 0.0, T, opt, [&](double t, const detail::State& s) {
    const Vector v = detail::view(s, 0, K);
    const Vector w = detail::view(s, K, K);
    const Vector v1 = detail::laplace_rhs(me, v, zero);
    const Vector w1 = detail::laplace_jacobian_apply(me, v, w);
    const Vector w2 = detail::laplace_jacobian_apply(me, v, w1) - 2.0 * me.alpha.cwiseProduct(v1).cwiseProduct(w);
    vb.push(t, v, v1, detail::laplace_jacobian_apply(me, v, v1));
    wb.push(t, w, w1, w2);
  });
  ParticleFields out;
  out.epsilon = eps;
  out.v = vb.build(Monotonicity::nonincreasing);
  out.w = wb.build(Monotonicity::none);
  if ((out.w.node_values().array() >= 0.0).any())
    throw NumericError("particle extinction density lost positivity");
  out.build_bounds();
  return out;
}

/// Exact P(H_max <= t) of the particle system started from the given counts.
inline double particle_extinction_cdf(const ParticleFields& pf, const std::vector<long>& counts, double t) {
  double log_p = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) continue;
    const double q = pf.q(t, static_cast<TypeIndex>(i));
    if (q <= 0.0) return 0.0;
    log_p += static_cast<double>(counts[i]) * std::log(q);
  }
  return std::exp(log_p);
}

// ---------------------------------------------------------------------------
// Family of one particle conditioned on its extinction time

struct FamilyStats {
  long events = 0;
  long proposals = 0;
};

/// Simulates, on [birth, min(deadline, until)], the family of one particle of
/// type x born at `birth` and conditioned to die out exactly at `deadline`, and
/// adds eps * counts to `out`.  With u the remaining time, the distinguished
/// (last-dying) particle jumps at rate q_ij g_j(u)/g_i(u) and splits at rate
/// 2 b p2 q_i(u); every other particle is conditioned to die out before the
/// deadline: jumps q_ij q_j(u)/q_i(u), deaths b p0/q_i(u), splits b p2 q_i(u).
/// Rates are simulated by thinning on the nodes of the particle fields; the
/// last u_min of remaining time (the first field step) is not resolved and the
/// family is declared dead there.
inline FamilyStats simulate_conditioned_family(const MultitypeModel& m, const ParticleFields& pf,
                                               TypeIndex x, double birth, double deadline, double until,
                                               MeasurePath& out, RandomStream& rng,
                                               long population_cap = 5'000'000) {
  const double H = deadline - birth;
  if (!(H > 0.0)) throw PreconditionError("conditioned family needs deadline > birth");
  if (H > pf.horizon()) throw PreconditionError("particle fields do not reach the family height");
  const auto br = branching_rates(m, pf.epsilon);
  const int K = m.K();
  const auto& nodes = pf.v.times();
  const double u_min = nodes[1];
  const double stop = std::min(deadline - u_min, until);

  std::vector<long> counts(static_cast<std::size_t>(K), 0);  // non-distinguished particles
  std::vector<long> shown(static_cast<std::size_t>(K), 0);   // including the distinguished one
  TypeIndex spine = x;
  detail::PathRecorder rec(out, pf.epsilon, birth);
  FamilyStats stats;

  double t = birth;
  // Piece index: remaining time u lies in [nodes[k], nodes[k+1]].
  std::size_t k = static_cast<std::size_t>(std::upper_bound(nodes.begin(), nodes.end(), deadline - t) -
                                           nodes.begin());
  k = std::min(k == 0 ? 0 : k - 1, nodes.size() - 2);

  // Field values inside the current piece; v and w share their nodes.
  auto q_at = [&](double u, int j) { return 1.0 - pf.epsilon * pf.v.value_on(k, u, j); };
  auto g_at = [&](double u, int j) { return -pf.epsilon * pf.w.value_on(k, u, j); };
  std::vector<double> other_bound(static_cast<std::size_t>(K)), spine_bound_of(other_bound);
  auto piece_bounds = [&](std::size_t piece) {
    const auto r = as_index(piece);
    for (int i = 0; i < K; ++i) {
      const auto I = static_cast<std::size_t>(i);
      double jump = 0.0, spine_jump = 0.0;
      for (int j = 0; j < K; ++j)
        if (j != i && m.Q(i, j) > 0.0) {
          jump += m.Q(i, j) * pf.q_hi(r, j) / pf.q_lo(r, i);
          spine_jump += m.Q(i, j) * pf.g_hi(r, j) / pf.g_lo(r, i);
        }
      other_bound[I] = jump + br.branch(i) * ((1.0 - br.p2(i)) / pf.q_lo(r, i) + br.p2(i) * pf.q_hi(r, i));
      spine_bound_of[I] = spine_jump + 2.0 * br.branch(i) * br.p2(i) * pf.q_hi(r, i);
    }
  };
  piece_bounds(k);
  auto show = [&] {
    for (int i = 0; i < K; ++i)
      shown[static_cast<std::size_t>(i)] = counts[static_cast<std::size_t>(i)] + (i == spine);
  };

  long alive_other = 0;
  while (t < stop) {
    const double piece_end_t = std::min(stop, deadline - nodes[k]);
    const double spine_bound = spine_bound_of[static_cast<std::size_t>(spine)];
    double total = spine_bound;
    for (int i = 0; i < K; ++i)
      total += static_cast<double>(counts[static_cast<std::size_t>(i)]) * other_bound[static_cast<std::size_t>(i)];

    const double s = t + rng.exponential(total);
    if (s >= piece_end_t) {
      show();
      rec.advance(piece_end_t, shown);
      t = piece_end_t;
      if (k == 0) break;
      --k;
      piece_bounds(k);
      continue;
    }
    show();
    rec.advance(s, shown);
    t = s;
    ++stats.proposals;
    const double u = deadline - t;

    double pick = rng.uniform() * total;
    if (pick < spine_bound) {
      // Distinguished particle.
      const double g_spine = g_at(u, spine);
      double acc = 0.0;
      TypeIndex to = -1;
      for (int j = 0; j < K && to < 0; ++j) {
        if (j == spine || m.Q(spine, j) <= 0.0) continue;
        acc += m.Q(spine, j) * g_at(u, j) / g_spine;
        if (pick < acc) to = j;
      }
      const double split = 2.0 * br.branch(spine) * br.p2(spine) * q_at(u, spine);
      if (acc + split > spine_bound * (1 + 1e-9))
        throw NumericError("conditioned-family thinning bound violated", t);
      if (to >= 0) {
        spine = to;
        ++stats.events;
      } else if (pick < acc + split) {
        ++counts[static_cast<std::size_t>(spine)];
        ++alive_other;
        ++stats.events;
      }
      continue;
    }
    pick -= spine_bound;
    int i = 0;
    for (; i < K; ++i) {
      const double block = static_cast<double>(counts[static_cast<std::size_t>(i)]) * other_bound[static_cast<std::size_t>(i)];
      if (pick < block) break;
      pick -= block;
    }
    if (i == K) continue;
    pick = std::fmod(pick, other_bound[static_cast<std::size_t>(i)]);
    const double q_i = q_at(u, i);
    double acc = 0.0;
    TypeIndex to = -1;
    for (int j = 0; j < K && to < 0; ++j) {
      if (j == i || m.Q(i, j) <= 0.0) continue;
      acc += m.Q(i, j) * q_at(u, j) / q_i;
      if (pick < acc) to = j;
    }
    const double death = br.branch(i) * (1.0 - br.p2(i)) / q_i;
    const double split = br.branch(i) * br.p2(i) * q_i;
    if (acc + death + split > other_bound[static_cast<std::size_t>(i)] * (1 + 1e-9))
      throw NumericError("conditioned-family thinning bound violated", t);
    if (to >= 0) {
      --counts[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(to)];
      ++stats.events;
    } else if (pick < acc + death) {
      --counts[static_cast<std::size_t>(i)];
      --alive_other;
      ++stats.events;
    } else if (pick < acc + death + split) {
      ++counts[static_cast<std::size_t>(i)];
      if (++alive_other > population_cap)
        throw BudgetError("conditioned family exceeded the population cap of " + std::to_string(population_cap));
      ++stats.events;
    }
  }
  if (until >= stop) rec.finish_extinct();
  return stats;
}

}  // namespace willow
