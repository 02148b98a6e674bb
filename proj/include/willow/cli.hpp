#pragma once

// Command-line front end.  dispatch() parses argv, runs one subcommand and maps
// errors to exit codes: usage 2, model 3, numeric 4, budget 5 (1: other failures,
// including failed verification checks).
//
// Types are numbered from 1 on the command line and in CSV output.  Every output
// starts with a comment line "# willow <subcommand> <run config as JSON>",
// followed by a CSV header row.

#include "willow/girsanov.hpp"
#include "willow/model.hpp"
#include "willow/numerics.hpp"
#include "willow/parallel.hpp"
#include "willow/particle.hpp"
#include "willow/spectral.hpp"
#include "willow/spine.hpp"
#include "willow/verify.hpp"
#include "willow/williams.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace willow::cli {

enum Exit { ok = 0, failure = 1, usage = 2, model = 3, numeric = 4, budget = 5 };

struct Common {
  std::string model = "ref2type";
  std::uint64_t seed = 7;
  std::string out;
  int threads = 0;
};

namespace detail {

inline std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::vector<double> make_grid(double a, double b, double step) {
  if (!(step > 0) || !(b >= a)) throw PreconditionError("output grid needs step > 0 and end >= start");
  std::vector<double> g;
  const long n = static_cast<long>(std::ceil((b - a) / step - 1e-9));
  for (long i = 0; i < n; ++i) g.push_back(a + static_cast<double>(i) * step);
  g.push_back(b);
  return g;
}

inline TypeIndex type_arg(int x, const MultitypeModel& m) {
  if (x < 1 || x > m.K()) throw PreconditionError("type must lie in 1.." + std::to_string(m.K()));
  return x - 1;
}

inline FiniteMeasure measure_arg(const std::string& text, const MultitypeModel& m) {
  FiniteMeasure nu;
  nu.masses = Vector::Zero(m.K());
  std::stringstream ss(text);
  std::string item;
  int k = 0;
  while (std::getline(ss, item, ',')) {
    if (k >= m.K()) throw PreconditionError("initial measure has more than K entries");
    try {
      nu.masses(k++) = std::stod(item);
    } catch (const std::exception&) {
      throw PreconditionError("initial measure entry '" + item + "' is not a number");
    }
  }
  if (k != m.K()) throw PreconditionError("initial measure needs K comma-separated masses");
  if ((nu.masses.array() < 0).any()) throw PreconditionError("initial masses must be nonnegative");
  return nu;
}

/// Output sink: file if given, otherwise the supplied stream.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : os_(&fallback) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path);
      if (!*file_) throw std::runtime_error("cannot open output file '" + path + "'");
      os_ = file_.get();
    }
  }
  std::ostream& operator*() { return *os_; }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream* os_;
};

inline void header(std::ostream& os, const std::string& cmd, const nlohmann::json& config) {
  os << "# willow " << cmd << ' ' << config.dump() << '\n';
}

inline void mass_header(std::ostream& os, int K, const std::string& extra = {}) {
  os << "rep,t";
  for (int k = 1; k <= K; ++k) os << ",mass_" << k;
  os << extra << '\n';
}

inline void mass_rows(std::ostream& os, long rep, const MeasurePath& p, const std::string& extra = {}) {
  for (std::size_t i = 0; i < p.times.size(); ++i) {
    os << rep << ',' << num(p.times[i]);
    for (int k = 0; k < p.K(); ++k) os << ',' << num(p.masses(as_index(i), k));
    os << extra << '\n';
  }
}

inline void path_rows(std::ostream& os, long rep, const TypedPath& p) {
  os << rep << ',' << num(p.start()) << ',' << p.origin() + 1 << '\n';
  for (const auto& j : p.jumps()) os << rep << ',' << num(j.time) << ',' << j.type + 1 << '\n';
}

}  // namespace detail

/// Runs the command line; all output goes to `out` (or --out), diagnostics to `err`.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"willow: Williams decomposition and Q-process of multitype superprocesses"};
  app.set_help_flag("--help", "print help");  // -h is taken by --h
  app.require_subcommand(1);
  Common c;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--model", c.model, "reference name (homogeneous|ref2type|critical) or model file")
        ->capture_default_str();
    sub->add_option("--seed", c.seed, "master seed")->capture_default_str();
    sub->add_option("--out", c.out, "output file (default: stdout)");
    sub->add_option("--threads", c.threads, "worker threads (default: WILLOW_THREADS or all cores)");
  };
  std::function<void()> run;

  auto* eigen = app.add_subcommand("eigen", "generalised eigenvalue, eigenvectors and stationary law");
  common(eigen);
  eigen->callback([&] {
    run = [&] {
      const auto m = resolve_model(c.model);
      const auto s = generalized_eigen(m);
      detail::Sink sink(c.out, out);
      nlohmann::json doc = to_json(s);
      doc["model"] = to_json(m);
      doc["convention"] = SpectralData::convention;
      doc["right_residual"] = right_residual(m, s);
      doc["left_residual"] = left_residual(m, s);
      *sink << doc.dump(2) << '\n';
    };
  });

  double T = 10.0, t0 = 1e-6, max_step = 0.05;
  auto* solve = app.add_subcommand("solve-v", "extinction function v and its time derivative");
  common(solve);
  solve->add_option("--T", T, "horizon")->capture_default_str();
  solve->add_option("--t0", t0, "singular-end cutoff")->capture_default_str();
  solve->add_option("--max-step", max_step, "maximal node spacing")->capture_default_str();
  solve->callback([&] {
    run = [&] {
      const auto m = resolve_model(c.model);
      const auto f = solve_extinction(m, TimeGrid{t0, T, max_step});
      detail::Sink sink(c.out, out);
      detail::header(*sink, "solve-v", {{"model", to_json(m)}, {"T", T}, {"t0", t0}, {"max_step", max_step}});
      *sink << 't';
      for (int k = 1; k <= m.K(); ++k) *sink << ",v_" << k;
      for (int k = 1; k <= m.K(); ++k) *sink << ",dv_" << k;
      *sink << '\n';
      const auto& tau = f.v.times();
      for (std::size_t r = 0; r < tau.size(); ++r) {
        *sink << detail::num(tau[r]);
        for (int k = 0; k < m.K(); ++k) *sink << ',' << detail::num(f.v.node_values()(as_index(r), k));
        for (int k = 0; k < m.K(); ++k) *sink << ',' << detail::num(f.dv.node_values()(as_index(r), k));
        *sink << '\n';
      }
    };
  });

  auto* homog = app.add_subcommand("homogenize", "h-transform and homogenisation constants");
  common(homog);
  homog->callback([&] {
    run = [&] {
      const auto m = resolve_model(c.model);
      const auto hd = homogenize(m);
      detail::Sink sink(c.out, out);
      detail::header(*sink, "homogenize", {{"model", to_json(m)}});
      *sink << "type,beta_tilde,beta0,q,varphi\n";
      for (int k = 0; k < m.K(); ++k)
        *sink << k + 1 << ',' << detail::num(hd.beta_tilde(k)) << ',' << detail::num(hd.beta0) << ','
              << detail::num(hd.q(k)) << ',' << detail::num(hd.varphi(k)) << '\n';
    };
  });

  std::string law = "h";
  double h = 3.0, t = 1.0, delta = -1.0, epsilon = 1.0 / 20, step = -1.0, window = 1.0;
  int x = 1;
  long reps = 1;
  auto* spine = app.add_subcommand("spine", "sample spine paths");
  common(spine);
  spine->add_option("--law", law, "h | qprocess | bismut")->check(CLI::IsMember({"h", "qprocess", "bismut"}))->capture_default_str();
  spine->add_option("--h", h, "extinction time for --law h")->capture_default_str();
  spine->add_option("--t", t, "horizon for --law qprocess and bismut")->capture_default_str();
  spine->add_option("--x", x, "starting type")->capture_default_str();
  spine->add_option("--reps", reps, "number of paths")->capture_default_str();
  spine->callback([&] {
    run = [&] {
      const auto m = resolve_model(c.model);
      const TypeIndex x0 = detail::type_arg(x, m);
      RateFunction rates = [&] {
        if (law == "h") {
          const auto f = solve_extinction(m, TimeGrid{1e-6, h + 1.0, 0.05});
          return spine_rate_matrix(m, f.dv, h);
        }
        if (law == "qprocess") return qprocess_rates(m, generalized_eigen(m), t);
        return bismut_rates(m, t);
      }();
      const auto key = make_key(c.seed, "spine");
      auto paths = parallel_map<TypedPath>(reps, thread_count(c.threads), [&](long r) {
        RandomStream rng(key.with_replicate(static_cast<std::uint64_t>(r)));
        return sample_chain(rates, x0, rates.lo(), rates.hi(), rng);
      });
      detail::Sink sink(c.out, out);
      detail::header(*sink, "spine", {{"model", to_json(m)}, {"law", law}, {"h", h}, {"t", t}, {"x", x},
                                      {"reps", reps}, {"seed", c.seed}, {"window", {rates.lo(), rates.hi()}}});
      *sink << "rep,time,type\n";
      for (long r = 0; r < reps; ++r) detail::path_rows(*sink, r, paths[static_cast<std::size_t>(r)]);
    };
  });

  std::string skeleton_out;
  auto* williams = app.add_subcommand("williams", "process conditioned on extinction at h");
  common(williams);
  williams->add_option("--h", h, "extinction time")->capture_default_str();
  williams->add_option("--x", x, "starting type")->capture_default_str();
  williams->add_option("--delta", delta, "subtree height cutoff (default 0.05 h)");
  williams->add_option("--epsilon", epsilon, "particle mass")->capture_default_str();
  williams->add_option("--step", step, "output grid step (default h/20)");
  williams->add_option("--reps", reps, "replicates")->capture_default_str();
  williams->add_option("--skeleton", skeleton_out, "write the skeleton of replicate 0 to this JSON file");
  williams->callback([&] {
    run = [&] {
      const auto m = resolve_model(c.model);
      const TypeIndex x0 = detail::type_arg(x, m);
      const double d = delta > 0 ? delta : 0.05 * h;
      const auto grid = detail::make_grid(0.0, h, step > 0 ? step : h / 20);
      const auto ctx = make_particle_context(m, epsilon, h + 1.0);
      const auto key = make_key(c.seed, "williams");
      auto paths = parallel_map<MeasurePath>(reps, thread_count(c.threads), [&](long r) {
        RandomStream rng(key.with_replicate(static_cast<std::uint64_t>(r)));
        return sample_conditioned_superprocess(ctx, x0, h, grid, rng, {.delta = d});
      });
      if (!skeleton_out.empty()) {
        const auto f = solve_extinction(m, TimeGrid{1e-6, h + 1.0, 0.05});
        RandomStream rng(key.with_label("skeleton"));
        std::ofstream js(skeleton_out);
        if (!js) throw std::runtime_error("cannot open skeleton file '" + skeleton_out + "'");
        js << to_json(sample_skeleton(m, f, x0, h, d, rng)).dump(1) << '\n';
      }
      detail::Sink sink(c.out, out);
      detail::header(*sink, "williams", {{"model", to_json(m)}, {"h", h}, {"x", x}, {"delta", d}, {"epsilon", epsilon},
                                         {"reps", reps}, {"seed", c.seed}});
      detail::mass_header(*sink, m.K());
      for (long r = 0; r < reps; ++r) detail::mass_rows(*sink, r, paths[static_cast<std::size_t>(r)]);
    };
  });

  auto* qproc = app.add_subcommand("qprocess", "Q-process (conditioned on survival forever)");
  common(qproc);
  qproc->add_option("--T", T, "horizon")->capture_default_str();
  qproc->add_option("--x", x, "spine starting type")->capture_default_str();
  qproc->add_option("--delta", delta, "subtree height cutoff (default 0.05)");
  qproc->add_option("--epsilon", epsilon, "particle mass")->capture_default_str();
  qproc->add_option("--step", step, "output grid step (default T/20)");
  qproc->add_option("--reps", reps, "replicates")->capture_default_str();
  qproc->callback([&] {
    run = [&] {
      const auto m = resolve_model(c.model);
      const TypeIndex x0 = detail::type_arg(x, m);
      const auto s = generalized_eigen(m);
      const double d = delta > 0 ? delta : 0.05;
      const auto grid = detail::make_grid(0.0, T, step > 0 ? step : T / 20);
      const double horizon = s.lambda0 > 1e-10 ? std::max(T + 1.0, 40.0 / s.lambda0) : std::max(T + 1.0, 400.0);
      const auto ctx = make_particle_context(m, epsilon, horizon);
      const auto key = make_key(c.seed, "qprocess");
      auto paths = parallel_map<MeasurePath>(reps, thread_count(c.threads), [&](long r) {
        RandomStream rng(key.with_replicate(static_cast<std::uint64_t>(r)));
        return sample_qprocess(ctx, s, x0, T, grid, d, rng);
      });
      detail::Sink sink(c.out, out);
      detail::header(*sink, "qprocess", {{"model", to_json(m)}, {"T", T}, {"x", x}, {"delta", d}, {"epsilon", epsilon},
                                         {"reps", reps}, {"seed", c.seed}, {"height_horizon", horizon}});
      detail::mass_header(*sink, m.K());
      for (long r = 0; r < reps; ++r) detail::mass_rows(*sink, r, paths[static_cast<std::size_t>(r)]);
    };
  });

  std::string nu_text = "1";
  std::string method = "conditioned";
  auto* pnu = app.add_subcommand("decompose-pnu", "P_nu assembled from its Williams decomposition");
  common(pnu);
  pnu->add_option("--nu", nu_text, "initial masses, comma separated (default: 1 on type 1)");
  pnu->add_option("--T", T, "output horizon")->capture_default_str();
  pnu->add_option("--delta", delta, "subtree height cutoff (default 0.05 h0)");
  pnu->add_option("--epsilon", epsilon, "particle mass")->capture_default_str();
  pnu->add_option("--step", step, "output grid step (default T/20)");
  pnu->add_option("--reps", reps, "replicates")->capture_default_str();
  pnu->add_option("--method", method, "conditioned | rejection (remaining families)")
      ->check(CLI::IsMember({"conditioned", "rejection"}))->capture_default_str();
  pnu->callback([&] {
    run = [&] {
      const auto m = resolve_model(c.model);
      std::string text = nu_text;
      if (text == "1") for (int k = 1; k < m.K(); ++k) text += ",0";
      const auto nu = detail::measure_arg(text, m);
      const auto grid = detail::make_grid(0.0, T, step > 0 ? step : T / 20);
      const auto s = generalized_eigen(m);
      const double horizon = s.lambda0 > 1e-10 ? std::max(T + 1.0, 60.0 / s.lambda0) : std::max(T + 1.0, 2000.0);
      const auto ctx = make_particle_context(m, epsilon, horizon, 0.1);
      const auto key = make_key(c.seed, "decompose-pnu");
      auto runs = parallel_map<Decomposition>(reps, thread_count(c.threads), [&](long r) {
        RandomStream rng(key.with_replicate(static_cast<std::uint64_t>(r)));
        ConditionedOptions opt;
        opt.delta = delta;
        return assemble_pnu_decomposition(ctx, nu, grid, rng, opt,
                                          method == "rejection" ? RestMethod::rejection : RestMethod::conditioned);
      });
      detail::Sink sink(c.out, out);
      detail::header(*sink, "decompose-pnu", {{"model", to_json(m)}, {"nu", to_json(nu.masses)}, {"T", T},
                                              {"delta", delta > 0 ? nlohmann::json(delta) : nlohmann::json("0.05 h0")},
                                              {"epsilon", epsilon}, {"reps", reps}, {"seed", c.seed}, {"method", method}});
      detail::mass_header(*sink, m.K(), ",h0,x0");
      for (long r = 0; r < reps; ++r) {
        const auto& d = runs[static_cast<std::size_t>(r)];
        detail::mass_rows(*sink, r, d.path, "," + detail::num(d.h0) + "," + std::to_string(d.x0 + 1));
      }
    };
  });

  auto* back = app.add_subcommand("backward", "conditioned process seen backwards from its extinction time");
  common(back);
  back->add_option("--h", h, "extinction time (default 20/lambda0)");
  back->add_option("--window", window, "length of the window before extinction")->capture_default_str();
  back->add_option("--x", x, "starting type")->capture_default_str();
  back->add_option("--delta", delta, "subtree height cutoff (default 0.05)");
  back->add_option("--epsilon", epsilon, "particle mass")->capture_default_str();
  back->add_option("--step", step, "output grid step (default window/10)");
  back->add_option("--reps", reps, "replicates")->capture_default_str();
  bool h_given = false;
  back->callback([&] {
    h_given = back->count("--h") > 0;
    run = [&] {
      const auto m = resolve_model(c.model);
      const TypeIndex x0 = detail::type_arg(x, m);
      const auto s = generalized_eigen(m);
      if (!(s.lambda0 > 1e-10)) throw PreconditionError("backward sampling needs lambda0 > 0");
      const double hh = h_given ? h : 20.0 / s.lambda0;
      const double d = delta > 0 ? delta : 0.05;
      const auto offsets = detail::make_grid(-window, 0.0, step > 0 ? step : window / 10);
      const auto ctx = make_particle_context(m, epsilon, hh + 1.0);
      const auto key = make_key(c.seed, "backward");
      auto paths = parallel_map<MeasurePath>(reps, thread_count(c.threads), [&](long r) {
        RandomStream rng(key.with_replicate(static_cast<std::uint64_t>(r)));
        return sample_backward(ctx, x0, hh, window, offsets, rng, {.delta = d});
      });
      detail::Sink sink(c.out, out);
      detail::header(*sink, "backward", {{"model", to_json(m)}, {"h", hh}, {"window", window}, {"x", x}, {"delta", d},
                                         {"epsilon", epsilon}, {"reps", reps}, {"seed", c.seed}});
      detail::mass_header(*sink, m.K());
      for (long r = 0; r < reps; ++r) detail::mass_rows(*sink, r, paths[static_cast<std::size_t>(r)]);
    };
  });

  std::string lineage_out;
  auto* parts = app.add_subcommand("particles", "branching particle approximation");
  common(parts);
  parts->add_option("--nu", nu_text, "initial masses, comma separated (default: 1 on type 1)");
  parts->add_option("--epsilon", epsilon, "particle mass")->capture_default_str();
  parts->add_option("--T", T, "horizon")->capture_default_str();
  parts->add_option("--step", step, "output grid step (default T/20)");
  parts->add_option("--reps", reps, "replicates")->capture_default_str();
  parts->add_option("--lineage", lineage_out, "write last-surviving lineages (extinct runs) to this CSV file");
  parts->callback([&] {
    run = [&] {
      const auto m = resolve_model(c.model);
      std::string text = nu_text;
      if (text == "1") for (int k = 1; k < m.K(); ++k) text += ",0";
      const auto nu = detail::measure_arg(text, m);
      branching_rates(m, epsilon);
      ParticleOptions opt;
      opt.grid = detail::make_grid(0.0, T, step > 0 ? step : T / 20);
      opt.genealogy = !lineage_out.empty();
      const auto key = make_key(c.seed, "particles");
      auto runs = parallel_map<ParticleTrajectory>(reps, thread_count(c.threads), [&](long r) {
        RandomStream rng(key.with_replicate(static_cast<std::uint64_t>(r)));
        auto traj = simulate_particles(m, nu, epsilon, T, rng, opt);
        if (lineage_out.empty()) traj.particles.clear();
        traj.events.clear();
        return traj;
      });
      if (!lineage_out.empty()) {
        std::ofstream ls(lineage_out);
        if (!ls) throw std::runtime_error("cannot open lineage file '" + lineage_out + "'");
        ls << "rep,time,type\n";
        for (long r = 0; r < reps; ++r) {
          const auto& traj = runs[static_cast<std::size_t>(r)];
          if (std::isfinite(traj.extinction) && traj.last >= 0) detail::path_rows(ls, r, extract_last_lineage(traj));
        }
      }
      detail::Sink sink(c.out, out);
      detail::header(*sink, "particles", {{"model", to_json(m)}, {"nu", to_json(nu.masses)}, {"epsilon", epsilon},
                                          {"T", T}, {"reps", reps}, {"seed", c.seed}});
      detail::mass_header(*sink, m.K(), ",extinction");
      for (long r = 0; r < reps; ++r) {
        const auto& traj = runs[static_cast<std::size_t>(r)];
        detail::mass_rows(*sink, r, traj.path, "," + (std::isfinite(traj.extinction) ? detail::num(traj.extinction) : std::string("inf")));
      }
    };
  });

  std::string suite = "full";
  std::vector<std::string> only;
  bool model_given = false;
  auto* ver = app.add_subcommand("verify", "run the verification battery");
  common(ver);
  ver->add_option("--suite", suite, "full | fast")->check(CLI::IsMember({"full", "fast"}))->capture_default_str();
  ver->add_option("--check", only, "run only these checks (repeatable)");
  ver->callback([&] {
    model_given = ver->count("--model") > 0;
    run = [&] {
      CheckConfig cfg_v;
      cfg_v.seed = c.seed;
      cfg_v.full = suite == "full";
      cfg_v.threads = c.threads;
      auto entries = model_given ? model_battery(resolve_model(c.model)) : reference_battery();
      if (!only.empty()) {
        const auto names = check_names();
        for (const auto& n : only)
          if (std::find(names.begin(), names.end(), n) == names.end()) throw std::invalid_argument("unknown check '" + n + "'");
        std::vector<BatteryEntry> kept;
        for (auto& e : entries)
          if (std::find(only.begin(), only.end(), e.check) != only.end()) kept.push_back(std::move(e));
        entries = std::move(kept);
      }
      const auto reports = run_battery(entries, cfg_v, [&](const CheckReport& r) {
        err << "  " << r.status << "  " << r.name << " [" << r.model << "]\n";
      });
      const auto doc = battery_json(reports, cfg_v);
      if (!c.out.empty()) {
        std::ofstream os(c.out);
        if (!os) throw std::runtime_error("cannot open output file '" + c.out + "'");
        os << doc.dump(2) << '\n';
      }
      out << summary_table(reports);
      if (doc["summary"]["failed"].get<int>() > 0) throw std::runtime_error("verification checks failed");
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help();
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return usage;
  }
  try {
    run();
    return ok;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << '\n';
    return usage;
  } catch (const ModelError& e) {
    err << "model error: " << e.what() << '\n';
    return model;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return numeric;
  } catch (const BudgetError& e) {
    err << "budget error: " << e.what() << '\n';
    return budget;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return failure;
  }
}

}  // namespace willow::cli
