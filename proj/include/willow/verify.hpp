#pragma once

// Verification battery: every identity the library implements, checked against an
// independent deterministic or Monte-Carlo oracle.  Reports are deterministic
// given (check, model, master seed, suite); runtimes are kept out of the serialised
// report so that reruns compare byte for byte.

#include "willow/girsanov.hpp"
#include "willow/model.hpp"
#include "willow/numerics.hpp"
#include "willow/parallel.hpp"
#include "willow/particle.hpp"
#include "willow/random.hpp"
#include "willow/spectral.hpp"
#include "willow/spine.hpp"
#include "willow/stats.hpp"
#include "willow/williams.hpp"

#include <unsupported/Eigen/MatrixFunctions>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace willow {

struct CheckConfig {
  std::uint64_t seed = 7;
  bool full = true;  // false: the fast suite, reduced replicate counts
  int threads = 0;
};

struct CheckReport {
  std::string name;
  std::string model;
  std::string fingerprint;
  std::string status = "fail";  // pass | fail | skipped
  double statistic = std::numeric_limits<double>::quiet_NaN();
  double threshold = std::numeric_limits<double>::quiet_NaN();
  std::string comparison = "<=";
  nlohmann::json parameters = nlohmann::json::object();
  nlohmann::json details = nlohmann::json::object();
  std::uint64_t seed = 0;
  double runtime = 0.0;  // seconds; not serialised

  bool passed() const { return status == "pass"; }
  bool skipped() const { return status == "skipped"; }
};

inline nlohmann::json to_json(const CheckReport& r) {
  nlohmann::json doc;
  doc["name"] = r.name;
  doc["model"] = r.model;
  doc["fingerprint"] = r.fingerprint;
  doc["status"] = r.status;
  doc["statistic"] = r.statistic;
  doc["comparison"] = r.comparison;
  doc["threshold"] = r.threshold;
  doc["parameters"] = r.parameters;
  doc["details"] = r.details;
  doc["seed"] = r.seed;
  return doc;
}

inline std::string fingerprint(const MultitypeModel& m) {
  auto doc = to_json(m);
  doc.erase("name");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_label(doc.dump())));
  return buf;
}

/// Irreducible model with K types: a ring of positive rates plus random extra edges.
inline MultitypeModel random_model(RandomStream& rng, int K) {
  Matrix Q = Matrix::Zero(K, K);
  for (int i = 0; i < K; ++i) {
    if (K > 1) Q(i, (i + 1) % K) = 0.1 + 1.9 * rng.uniform();
    for (int j = 0; j < K; ++j)
      if (j != i && Q(i, j) == 0.0 && rng.uniform() < 0.4) Q(i, j) = 2.0 * rng.uniform();
    Q(i, i) = -Q.row(i).sum();
  }
  Vector beta(K), alpha(K);
  for (int i = 0; i < K; ++i) {
    beta(i) = -1.0 + 2.0 * rng.uniform();
    alpha(i) = 0.5 + 1.5 * rng.uniform();
  }
  return make_model(Q, beta, alpha, "random" + std::to_string(K));
}

namespace detail {

struct Check {
  const MultitypeModel& m;
  const CheckConfig& cfg;
  StreamKey key;
  CheckReport& report;

  long reps(long full, long fast) const { return cfg.full ? full : fast; }
  RandomStream stream(std::uint64_t r, std::string_view label = "rep") const {
    return RandomStream(key.with_label(label).with_replicate(r));
  }
  void skip(const std::string& why) {
    report.status = "skipped";
    report.details["reason"] = why;
  }
  void gate(double statistic, double threshold, bool extra = true) {
    report.statistic = statistic;
    report.threshold = threshold;
    report.comparison = "<=";
    report.status = (statistic <= threshold && extra) ? "pass" : "fail";
  }
  void gate_above(double statistic, double threshold, bool extra = true) {
    report.statistic = statistic;
    report.threshold = threshold;
    report.comparison = ">=";
    report.status = (statistic >= threshold && extra) ? "pass" : "fail";
  }
};

inline nlohmann::json vec_json(const Vector& v) { return to_json(v); }

inline std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = a + (b - a) * i / (n - 1);
  return out;
}

/// Relative tolerance used for grid-wise inequalities between fields of size ~1/t.
inline double slack(double scale) { return 1e-9 * std::max(1.0, std::abs(scale)); }

inline bool is_critical(const SpectralData& s) { return std::abs(s.lambda0) < 1e-10; }

// --- deterministic checks --------------------------------------------------

inline void closed_form_v(Check& c) {
  const auto& m = c.m;
  if (m.K() != 1 || m.beta(0) < 0) return c.skip("needs a single-type model with beta >= 0");
  const TimeGrid grid{1e-6, 10.0, 0.05};
  const auto f = solve_extinction(m, grid);
  const double b = m.beta(0), a = m.alpha(0);
  double err_v = 0.0, err_dv = 0.0;
  for (double t : linspace(0.01, 10.0, 5000)) {
    err_v = std::max(err_v, std::abs(f.v.value(t, 0) - v0_closed(b, t) / a));
    err_dv = std::max(err_dv, std::abs(f.dv.value(t, 0) - dv0_closed(b, t) / a) / std::max(1.0, std::abs(dv0_closed(b, t) / a)));
  }
  c.report.parameters = {{"t_range", {0.01, 10.0}}, {"t0", grid.t0}, {"max_step", grid.max_step}, {"points", 5000}};
  c.report.details = {{"sup_error_dv_relative", err_dv}};
  c.gate(err_v, 1e-8, err_dv <= 1e-7);
}

inline void v_refinement(Check& c) {
  const TimeGrid base{1e-6, 10.0, 0.05}, fine{0.5e-6, 10.0, 0.025};
  const auto a = solve_extinction(c.m, base), b = solve_extinction(c.m, fine);
  double drift = 0.0;
  for (double t : linspace(0.01, 10.0, 2000))
    for (int k = 0; k < c.m.K(); ++k) drift = std::max(drift, std::abs(a.v.value(t, k) - b.v.value(t, k)));
  c.report.parameters = {{"t_range", {0.01, 10.0}}, {"base", {base.t0, base.max_step}}, {"fine", {fine.t0, fine.max_step}}};
  c.gate(drift, 1e-8);
}

inline void eigen_residuals(Check& c) {
  auto worst = [](const MultitypeModel& m) {
    const auto s = generalized_eigen(m);
    double r = std::max(right_residual(m, s), left_residual(m, s));
    // Perron root is the eigenvalue with minimal real part.
    const Eigen::EigenSolver<Matrix> dense(m.killed_generator(), false);
    double min_re = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < dense.eigenvalues().size(); ++i) min_re = std::min(min_re, dense.eigenvalues()(i).real());
    const double scale = 1.0 + m.killed_generator().cwiseAbs().maxCoeff();
    const bool ordered = std::abs(min_re - s.lambda0) <= 1e-9 * scale;
    const bool normal = std::abs(s.phi0.dot(s.phi0_tilde) - 1.0) < 1e-12 && std::abs(s.pi.sum() - 1.0) < 1e-12;
    return std::tuple{r, ordered && normal, s};
  };
  auto [res, ok, s] = worst(c.m);
  nlohmann::json d;
  d["lambda0"] = s.lambda0;
  d["residual"] = res;
  if (c.m.K() == 2) {
    // Characteristic polynomial root of the 2x2 matrix.
    const Matrix A = c.m.killed_generator();
    const double tr = A.trace(), det = A.determinant();
    const double root = (tr - std::sqrt(tr * tr - 4.0 * det)) / 2.0;
    d["polynomial_root"] = root;
    d["root_error"] = std::abs(root - s.lambda0);
    ok = ok && std::abs(root - s.lambda0) <= 1e-10;
  }
  auto rng = c.stream(0, "random-models");
  double worst_random = 0.0;
  bool random_ok = true;
  for (int n = 0; n < 100; ++n) {
    const int K = 1 + static_cast<int>(rng.below(6));
    auto [r, good, sd] = worst(random_model(rng, K));
    worst_random = std::max(worst_random, r);
    random_ok = random_ok && good;
  }
  d["random_models"] = 100;
  d["random_worst_residual"] = worst_random;
  d["random_ordering_ok"] = random_ok;
  c.report.details = d;
  c.report.parameters = {{"random_models", 100}, {"max_types", 6}};
  c.gate(std::max(res, worst_random), 1e-10, ok && random_ok);
}

inline void bismut_identity(Check& c) {
  const Vector ones = Vector::Ones(c.m.K());
  const auto b = bismut_cross_check(c.m, ones, ones, 1.5);
  c.report.parameters = {{"f", "1"}, {"g", "1"}, {"t", 1.5}};
  c.report.details = {{"lhs", vec_json(b.lhs)}, {"rhs", vec_json(b.rhs)}};
  c.gate((b.lhs - b.rhs).cwiseAbs().maxCoeff(), 1e-6);
}

struct TildeFields {
  HomogenizationData hd;
  ScalarField v_tilde;
  ScalarField sigma;
};

inline TildeFields tilde_fields(const MultitypeModel& m, double T) {
  const auto hd = homogenize(m);
  auto vt = solve_v(tilde_model(m), TimeGrid{1e-6, T, 0.05});
  auto sig = sigma_field(hd, vt);
  return {hd, std::move(vt), std::move(sig)};
}

inline void sigma_bounds(Check& c) {
  const double T = 20.0;
  const auto tf = tilde_fields(c.m, T);
  double worst = -std::numeric_limits<double>::infinity();
  const auto& tau = tf.v_tilde.times();
  for (std::size_t r = 0; r < tau.size(); ++r)
    for (int k = 0; k < c.m.K(); ++k) {
      const double s = tf.sigma.node_values()(as_index(r), k);
      const double tol = slack(tf.v_tilde.node_values()(as_index(r), k));
      worst = std::max({worst, (-s) / tol, (s - 2.0 * tf.hd.q(k)) / tol});
    }
  // Excess over the bounds in units of the round-off tolerance 1e-9 max(1, v~).
  c.report.parameters = {{"T", T}, {"tolerance", "1e-9 max(1, v~)"}};
  c.report.details = {{"q", vec_json(tf.hd.q)}, {"sigma_T", vec_json(tf.sigma.value(T))}, {"nodes", tau.size()}};
  c.gate(worst, 1.0);
}

inline void v_sandwich(Check& c) {
  const double T = 20.0;
  const auto tf = tilde_fields(c.m, T);
  // v~ computed directly must agree with alpha v.
  const auto v = solve_v(c.m, TimeGrid{1e-6, T, 0.05});
  double norm_err = 0.0;
  for (double t : linspace(0.01, T, 2000))
    for (int k = 0; k < c.m.K(); ++k)
      norm_err = std::max(norm_err, std::abs(tf.v_tilde.value(t, k) - c.m.alpha(k) * v.value(t, k)) /
                                        std::max(1.0, tf.v_tilde.value(t, k)));
  double worst = -std::numeric_limits<double>::infinity();
  const auto& tau = tf.v_tilde.times();
  for (std::size_t r = 0; r < tau.size(); ++r) {
    const double v0 = v0_closed(tf.hd.beta0, tau[r]);
    for (int k = 0; k < c.m.K(); ++k) {
      const double vt = tf.v_tilde.node_values()(as_index(r), k);
      const double tol = slack(vt);
      worst = std::max({worst, (v0 - vt) / tol, (vt - v0 - tf.hd.q(k)) / tol});
    }
  }
  c.report.parameters = {{"T", T}, {"tolerance", "1e-9 max(1, v~)"}};
  c.report.details = {{"beta0", tf.hd.beta0}, {"alpha_v_relative_error", norm_err}};
  c.gate(worst, 1.0, norm_err <= 1e-7);
}

inline void v_exponential(Check& c) {
  const auto s = generalized_eigen(c.m);
  if (!(s.lambda0 > 1e-10)) return c.skip("needs lambda0 > 0");
  const double t_min = 1.0, T = std::max(10.0, 20.0 / s.lambda0);
  const auto f = solve_extinction(c.m, TimeGrid{1e-6, T + 1.0, 0.05});
  const auto ts = linspace(t_min, T, 400);
  auto band = [&](bool derivative) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    double var_first = 0.0, var_second = 0.0;
    for (int k = 0; k < c.m.K(); ++k) {
      std::vector<double> g;
      for (double t : ts) {
        const double val = derivative ? -f.dv.value(t, k) : f.v.value(t, k);
        g.push_back(val / s.phi0(k) * std::exp(s.lambda0 * t));
      }
      for (double x : g) lo = std::min(lo, x), hi = std::max(hi, x);
      const std::size_t half = g.size() / 2;
      auto spread = [&](std::size_t a, std::size_t b) {
        const auto [mn, mx] = std::minmax_element(g.begin() + static_cast<long>(a), g.begin() + static_cast<long>(b));
        return *mx - *mn;
      };
      var_first = std::max(var_first, spread(0, half));
      var_second = std::max(var_second, spread(half, g.size()));
    }
    return std::tuple{lo, hi, var_first, var_second};
  };
  const auto [lo, hi, a1, a2] = band(false);
  const auto [dlo, dhi, b1, b2] = band(true);
  const double ratio = std::max(hi / lo, dhi / dlo);
  const bool flattening = a2 <= a1 && b2 <= b1;
  c.report.parameters = {{"t_range", {t_min, T}}, {"band_factor", 10}};
  c.report.details = {{"v_band", {lo, hi}}, {"dv_band", {dlo, dhi}},
                      {"v_spread_halves", {a1, a2}}, {"dv_spread_halves", {b1, b2}}, {"flattening", flattening}};
  c.gate(ratio, 10.0, flattening && lo > 0 && dlo > 0);
}

inline void v_critical(Check& c) {
  const auto s = generalized_eigen(c.m);
  if (!is_critical(s)) return c.skip("needs lambda0 = 0");
  const double T = 100.0;
  const auto v = solve_v(c.m, TimeGrid{1e-6, T, 0.05});
  const Vector ap = c.m.alpha.cwiseProduct(s.phi0);
  const double sup = ap.maxCoeff(), inv_sup = ap.cwiseInverse().maxCoeff();
  double worst = -std::numeric_limits<double>::infinity();
  const auto& tau = v.times();
  for (std::size_t r = 0; r < tau.size(); ++r)
    for (int k = 0; k < c.m.K(); ++k) {
      const double x = tau[r] * v.node_values()(as_index(r), k) / s.phi0(k);
      const double lower = ap(k) / (sup * sup), upper = ap(k) * inv_sup * inv_sup;
      worst = std::max({worst, (lower - x) / slack(x), (x - upper) / slack(x)});
    }
  c.report.parameters = {{"T", T}, {"tolerance", "1e-9 max(1, t v/phi0)"}};
  c.report.details = {{"t_v_phi_T", vec_json(T * v.value(T).cwiseQuotient(s.phi0))}};
  c.gate(worst, 1.0);
}

inline void spine_rate_limit(Check& c) {
  const auto s = generalized_eigen(c.m);
  if (!(s.lambda0 > 1e-10)) return c.skip("needs lambda0 > 0");
  const double h_max = 30.0 / s.lambda0;
  const auto f = solve_extinction(c.m, TimeGrid{1e-6, h_max + 1.0, 0.05});
  const Matrix G = qprocess_generator(c.m, s);
  std::vector<double> hs, gaps;
  for (int k = 6; k >= 0; --k) hs.push_back(h_max / std::pow(2.0, k));
  for (double h : hs) {
    const Matrix R = spine_rate_matrix(c.m, f.dv, h).at(0.0);
    double gap = 0.0;
    for (int i = 0; i < c.m.K(); ++i)
      for (int j = 0; j < c.m.K(); ++j)
        if (i != j) gap = std::max(gap, std::abs(R(i, j) - G(i, j)));
    gaps.push_back(gap);
  }
  // Monotone decay beyond the burn-in h >= 1/lambda0; below 1e-14 the gap is round-off.
  bool monotone = true;
  for (std::size_t k = 1; k < hs.size(); ++k)
    if (hs[k - 1] >= 1.0 / s.lambda0 && gaps[k] > gaps[k - 1] && gaps[k] > 1e-13) monotone = false;
  c.report.parameters = {{"h_grid", hs}, {"burn_in", 1.0 / s.lambda0}};
  c.report.details = {{"gaps", gaps}, {"monotone", monotone}};
  c.gate(gaps.back(), 1e-6, monotone);
}

inline void eigen_density_limit(Check& c) {
  const auto s = generalized_eigen(c.m);
  if (!(s.lambda0 > 1e-10)) return c.skip("needs lambda0 > 0");
  const double h = 20.0 / s.lambda0;
  const auto f = solve_extinction(c.m, TimeGrid{1e-6, h + 1.0, 0.05});
  const Vector nu = Vector::Ones(c.m.K());
  const Vector dv = f.dv.value(h);
  const Vector lhs = dv / nu.dot(dv), rhs = s.phi0 / nu.dot(s.phi0);
  c.report.parameters = {{"h", h}, {"nu", "counting measure"}};
  c.report.details = {{"density", vec_json(lhs)}, {"limit", vec_json(rhs)}};
  c.gate((lhs - rhs).cwiseAbs().maxCoeff(), 1e-4);
}

inline void h7_tail(Check& c) {
  const auto s = generalized_eigen(c.m);
  if (s.lambda0 < -1e-10) return c.skip("needs lambda0 >= 0");
  const double h_max = is_critical(s) ? 200.0 : 20.0 / s.lambda0;
  const double T = 2.0 * h_max;
  const auto v = solve_v(c.m, TimeGrid{1e-6, T, 0.1});
  std::vector<double> hs, g;
  for (int k = 5; k >= 0; --k) hs.push_back(h_max / std::pow(2.0, k));
  for (double h : hs) {
    // sup over x and t in [0, T - h] of v_h - v_{h+t}, attained at t = T - h.
    g.push_back((v.value(h) - v.value(T)).maxCoeff());
  }
  bool monotone = true;
  for (std::size_t k = 1; k < g.size(); ++k) monotone = monotone && g[k] <= g[k - 1];
  c.report.parameters = {{"h_grid", hs}, {"T", T}};
  c.report.details = {{"g", g}, {"monotone", monotone}};
  c.gate(g.back() / g.front(), 0.05, monotone);
}

// --- Monte-Carlo checks ------------------------------------------------------

inline void many_to_one(Check& c) {
  const double eps = 1.0 / 200, mass = 0.125;
  const long n = c.reps(10000, 2000);
  const std::vector<double> ts{0.5, 1.0, 2.0};
  nlohmann::json per_type = nlohmann::json::array();
  double worst = 0.0;
  for (int x = 0; x < c.m.K(); ++x) {
    // Linearity: N_x[X_t(1)] = E_{mass delta_x}[X_t(1)] / mass.
    const auto start = initial_counts(FiniteMeasure::dirac(c.m.K(), x, mass), eps);
    auto runs = parallel_map<std::vector<double>>(n, thread_count(c.cfg.threads), [&](long r) {
      auto rng = c.stream(static_cast<std::uint64_t>(r), "type" + std::to_string(x));
      auto run = simulate_counts(c.m, start, eps, ts.back(), ts, rng);
      std::vector<double> z;
      for (double t : ts) z.push_back(run.path.total(t) / mass);
      return z;
    });
    for (std::size_t k = 0; k < ts.size(); ++k) {
      std::vector<double> col;
      for (const auto& z : runs) col.push_back(z[k]);
      const auto sm = summarize(col);
      const double exact = first_moment(c.m, Vector::Ones(c.m.K()), ts[k])(x);
      const double z = std::abs(sm.mean - exact) / sm.se();
      worst = std::max(worst, z);
      per_type.push_back({{"x", x}, {"t", ts[k]}, {"mc", sm.mean}, {"se", sm.se()}, {"oracle", exact}, {"z", z}});
    }
  }
  c.report.parameters = {{"epsilon", eps}, {"reps", n}, {"t", ts}, {"start_mass", mass}};
  c.report.details = {{"cells", per_type}};
  c.gate(worst, 3.0);
}

inline void extinction_cdf(Check& c) {
  const auto s = generalized_eigen(c.m);
  if (s.lambda0 < -1e-10) return c.skip("needs lambda0 >= 0");
  const double eps = 1.0 / 40, censor = 5.0;
  const long n = c.reps(100000, 20000);
  const TypeIndex x = 0;
  const FiniteMeasure nu = FiniteMeasure::dirac(c.m.K(), x, 1.0);
  const auto counts = initial_counts(nu, eps);
  const std::vector<double> grid{0.0};
  auto H = parallel_map<double>(n, thread_count(c.cfg.threads), [&](long r) {
    auto rng = c.stream(static_cast<std::uint64_t>(r));
    return simulate_counts(c.m, counts, eps, censor, grid, rng).extinction;
  });
  const auto v = solve_v(c.m, TimeGrid{1e-6, censor, 0.05});
  auto F = [&](double h) { return h <= v.front() ? 0.0 : std::exp(-nu.integrate(v.value(h))); };
  const auto ks = ks_one_sample(H, F, censor);
  // Exact particle-level bias at eps and eps/2.
  auto bias = [&](double e) {
    const auto pf = solve_particle_fields(c.m, e, censor);
    const auto cn = initial_counts(nu, e);
    double b = 0.0;
    for (double t : linspace(0.01, censor, 1000)) b = std::max(b, std::abs(particle_extinction_cdf(pf, cn, t) - F(t)));
    return b;
  };
  const double b1 = bias(eps), b2 = bias(eps / 2);
  c.report.parameters = {{"epsilon", eps}, {"reps", n}, {"nu", "dirac(1) mass 1"}, {"censor", censor}};
  c.report.details = {{"ks_pvalue", ks.pvalue}, {"bias_eps", b1}, {"bias_eps_half", b2},
                      {"censored_fraction", static_cast<double>(std::count_if(H.begin(), H.end(), [&](double h) { return h > censor; })) / static_cast<double>(n)}};
  c.gate(ks.statistic, 0.02, b2 < b1);
}

inline void girsanov_mean(Check& c) {
  const double eps = 1.0 / 100, t = 1.0;
  const long n = c.reps(10000, 2000);
  const auto tm = tilde_model(c.m);
  const auto hd = homogenize(c.m);
  const FiniteMeasure nu = FiniteMeasure::dirac(c.m.K(), 0, 1.0);
  const auto counts = initial_counts(nu, eps);
  const std::vector<double> grid{0.0, t};
  auto M = parallel_map<double>(n, thread_count(c.cfg.threads), [&](long r) {
    auto rng = c.stream(static_cast<std::uint64_t>(r));
    auto run = simulate_counts(tm, counts, eps, t, grid, rng);
    return girsanov_weight(run.path, hd, t);
  });
  const auto sm = summarize(M);
  // Exact particle-level expectation: u' = L~u - (beta~ + eps varphi) u - (1 - eps beta~/2) u^2 + varphi.
  MultitypeModel pm = tm;
  pm.beta = tm.beta + eps * hd.varphi;
  pm.alpha = tm.alpha - 0.5 * eps * tm.beta;
  const Vector u0 = (Vector::Ones(c.m.K()) - (-eps * hd.q.array()).exp().matrix()) / eps;
  const auto u = solve_laplace(pm, u0, hd.varphi, t);
  double log_exact = 0.0;
  for (int i = 0; i < c.m.K(); ++i)
    log_exact += static_cast<double>(counts[static_cast<std::size_t>(i)]) *
                 (std::log1p(-eps * u.value(t, i)) + eps * hd.q(i));
  const double exact = std::exp(log_exact);
  c.report.parameters = {{"epsilon", eps}, {"reps", n}, {"t", t}, {"nu", "dirac(1) mass 1"}};
  c.report.details = {{"mean", sm.mean}, {"se", sm.se()}, {"particle_level_expectation", exact}};
  c.gate(std::abs(sm.mean - 1.0) / sm.se(), 3.0);
}

inline void spine_martingale(Check& c) {
  const double h = 3.0, t = 1.0;
  const long n = c.reps(100000, 20000);
  const auto f = solve_extinction(c.m, TimeGrid{1e-6, h + 1.0, 0.05});
  nlohmann::json cells = nlohmann::json::array();
  double worst = 0.0;
  for (int x = 0; x < c.m.K(); ++x) {
    auto w = parallel_map<double>(n, thread_count(c.cfg.threads), [&](long r) {
      auto rng = c.stream(static_cast<std::uint64_t>(r), "type" + std::to_string(x));
      return spine_weight(sample_plain_chain(c.m, x, t, rng), c.m, f.v, f.dv, h, t);
    });
    const auto sm = summarize(w);
    const double z = std::abs(sm.mean - 1.0) / sm.se();
    worst = std::max(worst, z);
    cells.push_back({{"x", x}, {"mean", sm.mean}, {"se", sm.se()}, {"z", z}});
  }
  c.report.parameters = {{"h", h}, {"t", t}, {"reps", n}};
  c.report.details = {{"cells", cells}};
  c.gate(worst, 3.0);
}

inline std::vector<long> type_counts(const std::vector<TypeIndex>& ys, int K) {
  std::vector<long> out(static_cast<std::size_t>(K), 0);
  for (auto y : ys) ++out[static_cast<std::size_t>(y)];
  return out;
}

inline std::vector<double> as_probs(const Vector& p) { return {p.data(), p.data() + p.size()}; }

inline void spine_marginals(Check& c) {
  const auto s = generalized_eigen(c.m);
  const double h = 3.0, t = 1.0;
  const long n = c.reps(100000, 20000);
  const auto f = solve_extinction(c.m, TimeGrid{1e-6, h + 1.0, 0.05});
  const int K = c.m.K();
  struct Law {
    std::string name;
    RateFunction rates;
  };
  const std::vector<Law> laws{{"h", spine_rate_matrix(c.m, f.dv, h)},
                              {"qprocess", qprocess_rates(c.m, s, h)},
                              {"bismut", bismut_rates(c.m, 2.0)}};
  nlohmann::json cells = nlohmann::json::array();
  double min_p = 1.0;
  for (const auto& law : laws) {
    auto ys = parallel_map<TypeIndex>(n, thread_count(c.cfg.threads), [&](long r) {
      auto rng = c.stream(static_cast<std::uint64_t>(r), law.name);
      return sample_chain(law.rates, 0, law.rates.lo(), law.rates.hi(), rng).at(t);
    });
    const auto p = spine_marginal(law.rates, 0, {t}).front();
    const auto test = chi_square(type_counts(ys, K), as_probs(p));
    min_p = std::min(min_p, test.pvalue);
    cells.push_back({{"law", law.name}, {"chi2", test.statistic}, {"pvalue", test.pvalue}, {"marginal", vec_json(p)}});
  }
  c.report.parameters = {{"h", h}, {"t", t}, {"bismut_horizon", 2.0}, {"reps", n}, {"level", 0.05}, {"bonferroni", 3}};
  c.report.details = {{"cells", cells}};
  c.gate_above(min_p, 0.05 / 3.0);
}

inline void williams_lineage(Check& c) {
  const double eps = 1.0 / 20, lo = 2.8, hi = 3.2, h = 3.0;
  const std::vector<double> marks{1.0, 2.0};
  const long n = c.reps(100000, 20000);
  const int K = c.m.K();
  const TypeIndex x = 0;
  const FiniteMeasure nu = FiniteMeasure::dirac(K, x, 1.0);
  ParticleOptions opt;
  opt.grid = {0.0};
  opt.mark_times = marks;
  opt.genealogy = false;
  struct Out {
    double H = 0;
    std::vector<TypeIndex> marks;
  };
  auto runs = parallel_map<Out>(n, thread_count(c.cfg.threads), [&](long r) {
    auto rng = c.stream(static_cast<std::uint64_t>(r));
    auto traj = simulate_particles(c.m, nu, eps, hi, rng, opt);
    Out o;
    o.H = traj.extinction;
    if (o.H >= lo && o.H <= hi) o.marks = last_lineage_marks(traj);
    return o;
  });
  std::vector<std::vector<TypeIndex>> at(marks.size());
  long kept = 0;
  for (const auto& o : runs)
    if (!o.marks.empty()) {
      ++kept;
      for (std::size_t k = 0; k < marks.size(); ++k) at[k].push_back(o.marks[k]);
    }
  const auto f = solve_extinction(c.m, TimeGrid{1e-6, hi + 1.0, 0.02});
  const auto oracle = spine_marginal(spine_rate_matrix(c.m, f.dv, h), x, marks);
  // Same oracle at particle level, mixed over the conditioning window.
  const auto ctx = make_particle_context(c.m, eps, hi + 1.0, 0.02);
  const auto counts = initial_counts(nu, eps);
  std::vector<Vector> mix(marks.size(), Vector::Zero(K));
  double mass = 0.0;
  for (double hh : linspace(lo, hi, 41)) {
    const double wgt = (particle_extinction_cdf(ctx.pf, counts, hh + 1e-4) - particle_extinction_cdf(ctx.pf, counts, hh - 1e-4)) *
                       ((hh == lo || hh == hi) ? 0.5 : 1.0);
    const auto p = spine_marginal(spine_rate_matrix(ctx.particle_model, ctx.fields.dv, hh), x, marks);
    for (std::size_t k = 0; k < marks.size(); ++k) mix[k] += wgt * p[k];
    mass += wgt;
  }
  nlohmann::json cells = nlohmann::json::array();
  double min_p = 1.0;
  for (std::size_t k = 0; k < marks.size(); ++k) {
    mix[k] /= mass;
    const auto obs = type_counts(at[k], K);
    const auto test = chi_square(obs, as_probs(oracle[k]));
    const auto test_mix = chi_square(obs, as_probs(mix[k]));
    min_p = std::min(min_p, test.pvalue);
    cells.push_back({{"t", marks[k]}, {"observed", obs}, {"spine_marginal", vec_json(oracle[k])},
                     {"chi2", test.statistic}, {"pvalue", test.pvalue},
                     {"particle_mixture_marginal", vec_json(mix[k])}, {"particle_mixture_pvalue", test_mix.pvalue}});
  }
  c.report.parameters = {{"epsilon", eps}, {"reps", n}, {"window", {lo, hi}}, {"h", h}, {"nu", "dirac(1) mass 1"},
                         {"level", 0.05}, {"bonferroni", marks.size()}};
  c.report.details = {{"conditioned_runs", kept}, {"cells", cells}};
  c.gate_above(min_p, 0.05 / static_cast<double>(marks.size()), kept > 0);
}

/// Deterministic first moment of the Q-process: the double-ODE value
/// int_0^t E^{phi0}_x[2 alpha m_{t-s}(Y_s)] ds, and the exact expectation of the
/// particle-level sampler (spine particle, alpha - eps beta/2, dropped heights <= delta).
struct QMoment {
  double oracle = 0.0;
  double sampler = 0.0;
};

inline QMoment qprocess_moment(const ParticleContext& ctx, const SpectralData& s, TypeIndex x, double t, double delta) {
  const auto& m = ctx.model;
  const int K = m.K();
  const Matrix G = qprocess_generator(m, s);
  const Matrix A = m.Q - Matrix(m.beta.asDiagonal());
  const Vector ones = Vector::Ones(K);
  const Vector alpha_e = ctx.particle_model.alpha;
  auto truncated = [&](double u) -> Vector {
    if (u >= delta) return Vector::Zero(K);
    Vector f(K);
    for (int i = 0; i < K; ++i) f(i) = ctx.pf.q(delta - u, i);
    auto pot = [&](double r) {
      Vector p(K);
      for (int i = 0; i < K; ++i) p(i) = m.beta(i) + 2.0 * alpha_e(i) * ctx.pf.v.value(delta - r, i);
      return p;
    };
    return feynman_kac(m, pot, f, u, OdeOptions{.rtol = 1e-10, .atol = 1e-14, .max_step = 0.01});
  };
  auto integrand = [&](double s_) {
    const Matrix P = (s_ * G).exp();
    const Vector mom = (( t - s_) * A).exp() * ones;
    const Vector a = P.row(x).transpose();
    return std::pair{a.dot(2.0 * m.alpha.cwiseProduct(mom)),
                     a.dot(2.0 * alpha_e.cwiseProduct(mom - truncated(t - s_)))};
  };
  // Composite Simpson on [0, t - delta] and [t - delta, t].
  QMoment out;
  auto simpson = [&](double a, double b, int n) {
    if (!(b > a)) return;
    const double hstep = (b - a) / n;
    for (int i = 0; i <= n; ++i) {
      const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
      const auto [o, e] = integrand(a + i * hstep);
      out.oracle += w * hstep / 3.0 * o;
      out.sampler += w * hstep / 3.0 * e;
    }
  };
  const double split = std::max(0.0, t - delta);
  simpson(0.0, split, 400);
  simpson(split, t, 400);
  out.sampler += ctx.epsilon();
  return out;
}

inline void qprocess_moment_check(Check& c) {
  const auto s = generalized_eigen(c.m);
  if (s.lambda0 < -1e-10) return c.skip("needs lambda0 >= 0");
  const double eps = 1.0 / 50, delta = 0.05;
  const std::vector<double> ts{0.0, 1.0, 2.0};
  const long n = c.reps(10000, 2000);
  const TypeIndex x = 0;
  const double horizon = is_critical(s) ? 400.0 : std::max(20.0, 40.0 / s.lambda0);
  const auto ctx = make_particle_context(c.m, eps, horizon, 0.05);
  auto runs = parallel_map<std::vector<double>>(n, thread_count(c.cfg.threads), [&](long r) {
    auto rng = c.stream(static_cast<std::uint64_t>(r));
    auto p = sample_qprocess(ctx, s, x, ts.back(), ts, delta, rng);
    return std::vector<double>{p.total(1.0), p.total(2.0)};
  });
  nlohmann::json cells = nlohmann::json::array();
  double worst = 0.0;
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<double> col;
    for (const auto& v : runs) col.push_back(v[k]);
    const auto sm = summarize(col);
    const auto mo = qprocess_moment(ctx, s, x, ts[k + 1], delta);
    const double envelope = std::abs(mo.sampler - mo.oracle);
    const double z = (std::abs(sm.mean - mo.oracle) - envelope) / sm.se();
    worst = std::max(worst, z);
    cells.push_back({{"t", ts[k + 1]}, {"mc", sm.mean}, {"se", sm.se()}, {"oracle", mo.oracle},
                     {"bias_envelope", envelope}, {"sampler_expectation", mo.sampler},
                     {"z_sampler", (sm.mean - mo.sampler) / sm.se()}});
  }
  c.report.parameters = {{"epsilon", eps}, {"delta", delta}, {"reps", n}, {"x", x}, {"t", {1.0, 2.0}}};
  c.report.details = {{"cells", cells}};
  c.gate(worst, 3.0);
}

inline void backward_stabilize(Check& c) {
  const auto s = generalized_eigen(c.m);
  if (!(s.lambda0 > 1e-10)) return c.skip("needs lambda0 > 0");
  const double eps = 1.0 / 20, delta = 0.05, window = 1.0;
  const double h = 20.0 / s.lambda0;
  const long n = c.reps(1000, 200);
  const std::vector<double> offsets{-1.0, -0.5, 0.0};
  const auto ctx = make_particle_context(c.m, eps, 2.0 * h + 1.0, 0.05);
  auto sample = [&](double hh, const char* label) {
    return parallel_map<std::vector<double>>(n, thread_count(c.cfg.threads), [&](long r) {
      auto rng = c.stream(static_cast<std::uint64_t>(r), label);
      auto p = sample_backward(ctx, 0, hh, window, offsets, rng, {.delta = delta});
      return std::vector<double>{p.total(-1.0), p.total(-0.5), p.total(0.0)};
    });
  };
  const auto a = sample(h, "h"), b = sample(2.0 * h, "2h");
  nlohmann::json cells = nlohmann::json::array();
  double min_p = 1.0;
  bool vanish = true;
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<double> xa, xb;
    for (const auto& v : a) xa.push_back(v[k]);
    for (const auto& v : b) xb.push_back(v[k]);
    const auto test = ks_two_sample(xa, xb);
    min_p = std::min(min_p, test.pvalue);
    cells.push_back({{"offset", offsets[k]}, {"ks", test.statistic}, {"pvalue", test.pvalue},
                     {"mean_h", summarize(xa).mean}, {"mean_2h", summarize(xb).mean}});
  }
  for (const auto& v : a) vanish = vanish && v[2] == 0.0;
  for (const auto& v : b) vanish = vanish && v[2] == 0.0;
  c.report.parameters = {{"epsilon", eps}, {"delta", delta}, {"h", h}, {"reps", n}, {"window", window},
                         {"level", 0.05}, {"bonferroni", 2}};
  c.report.details = {{"cells", cells}, {"mass_vanishes_at_0", vanish}};
  c.gate_above(min_p, 0.05 / 2.0, vanish);
}

using CheckFn = void (*)(Check&);

inline const std::map<std::string, CheckFn>& registry() {
  static const std::map<std::string, CheckFn> table{
      {"backward-stabilize", backward_stabilize},
      {"bismut-identity", bismut_identity},
      {"closed-form-v", closed_form_v},
      {"eigen-density-limit", eigen_density_limit},
      {"eigen-residuals", eigen_residuals},
      {"extinction-cdf", extinction_cdf},
      {"girsanov-mean", girsanov_mean},
      {"h7-tail", h7_tail},
      {"many-to-one", many_to_one},
      {"qprocess-moment", qprocess_moment_check},
      {"sigma-bounds", sigma_bounds},
      {"spine-marginals", spine_marginals},
      {"spine-martingale", spine_martingale},
      {"spine-rate-limit", spine_rate_limit},
      {"v-critical", v_critical},
      {"v-exponential", v_exponential},
      {"v-refinement", v_refinement},
      {"v-sandwich", v_sandwich},
      {"williams-lineage", williams_lineage},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> check_names() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : detail::registry()) out.push_back(name);
  return out;
}

/// Runs one named check.  Unknown names throw std::invalid_argument; a model that
/// does not meet the check's prerequisites yields status "skipped".
inline CheckReport run_check(const std::string& name, const MultitypeModel& m, const CheckConfig& cfg = {}) {
  const auto& table = detail::registry();
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown check '" + name + "'");
  require_admissible(m);
  CheckReport report;
  report.name = name;
  report.model = m.name;
  report.fingerprint = fingerprint(m);
  StreamKey key = make_key(cfg.seed, name).with_label(report.fingerprint);
  report.seed = key.seed();
  detail::Check c{m, cfg, key, report};
  const auto start = std::chrono::steady_clock::now();
  it->second(c);
  report.runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report.parameters["suite"] = cfg.full ? "full" : "fast";
  return report;
}

struct BatteryEntry {
  std::string check;
  MultitypeModel model;
};

/// Reference battery: each check on the reference models it is stated for.
inline std::vector<BatteryEntry> reference_battery() {
  const auto m1 = reference::homogeneous(), m2 = reference::two_type(), m3 = reference::critical();
  return {
      {"closed-form-v", m1},      {"v-refinement", m1},       {"v-refinement", m2},
      {"eigen-residuals", m1},    {"eigen-residuals", m2},    {"eigen-residuals", m3},
      {"bismut-identity", m1},    {"bismut-identity", m2},    {"sigma-bounds", m1},
      {"sigma-bounds", m2},       {"v-sandwich", m1},         {"v-sandwich", m2},
      {"v-exponential", m1},      {"v-exponential", m2},      {"v-critical", m3},
      {"spine-rate-limit", m2},   {"eigen-density-limit", m2}, {"h7-tail", m2},
      {"h7-tail", m3},            {"many-to-one", m2},        {"extinction-cdf", m3},
      {"girsanov-mean", m2},      {"spine-martingale", m2},   {"spine-marginals", m2},
      {"williams-lineage", m2},   {"qprocess-moment", m2},    {"backward-stabilize", m2},
  };
}

/// Every check on one model.
inline std::vector<BatteryEntry> model_battery(const MultitypeModel& m) {
  std::vector<BatteryEntry> out;
  for (const auto& name : check_names()) out.push_back({name, m});
  return out;
}

inline std::vector<CheckReport> run_battery(const std::vector<BatteryEntry>& entries, const CheckConfig& cfg,
                                            const std::function<void(const CheckReport&)>& progress = {}) {
  std::vector<CheckReport> out;
  for (const auto& e : entries) {
    out.push_back(run_check(e.check, e.model, cfg));
    if (progress) progress(out.back());
  }
  return out;
}

inline nlohmann::json battery_json(const std::vector<CheckReport>& reports, const CheckConfig& cfg) {
  nlohmann::json doc;
  doc["suite"] = cfg.full ? "full" : "fast";
  doc["seed"] = cfg.seed;
  nlohmann::json checks = nlohmann::json::array();
  int passed = 0, failed = 0, skipped = 0;
  for (const auto& r : reports) {
    checks.push_back(to_json(r));
    (r.passed() ? passed : r.skipped() ? skipped : failed)++;
  }
  doc["checks"] = std::move(checks);
  doc["summary"] = {{"passed", passed}, {"failed", failed}, {"skipped", skipped}};
  return doc;
}

/// One line per check: name, model, status, statistic vs threshold, runtime.
inline std::string summary_table(const std::vector<CheckReport>& reports) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-22s %-10s %-8s %14s %3s %-12s %9s\n", "check", "model", "status", "statistic",
                "", "threshold", "seconds");
  os << line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-22s %-10s %-8s %14.6g %3s %-12.6g %9.2f\n", r.name.c_str(), r.model.c_str(),
                  r.status.c_str(), r.statistic, r.comparison.c_str(), r.threshold, r.runtime);
    os << line;
  }
  return os.str();
}

}  // namespace willow
