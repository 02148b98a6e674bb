// Acceptance run: the full battery at seed 7, one pass/fail line per criterion.

#include "willow/verify.hpp"

#include <chrono>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

namespace {

using namespace willow;

struct Criterion {
  std::string id;
  std::string what;
  std::vector<std::pair<std::string, std::string>> checks;  // (check, model name)
  double budget;                                             // seconds
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> table{
      {"AC1", "closed-form v on M1", {{"closed-form-v", "homogeneous"}}, 1},
      {"AC2",
       "eigen residuals M1-M3 + random, M2 root",
       {{"eigen-residuals", "homogeneous"}, {"eigen-residuals", "ref2type"}, {"eigen-residuals", "critical"}},
       1},
      {"AC3", "many-to-one on M2", {{"many-to-one", "ref2type"}}, 120},
      {"AC4", "extinction CDF on M3", {{"extinction-cdf", "critical"}}, 300},
      {"AC5", "Girsanov mean on M2", {{"girsanov-mean", "ref2type"}}, 120},
      {"AC6", "spine martingale on M2", {{"spine-martingale", "ref2type"}}, 60},
      {"AC7", "Bismut identity on M1, M2", {{"bismut-identity", "homogeneous"}, {"bismut-identity", "ref2type"}}, 1},
      {"AC8",
       "bounds battery",
       {{"sigma-bounds", "homogeneous"},
        {"sigma-bounds", "ref2type"},
        {"v-sandwich", "homogeneous"},
        {"v-sandwich", "ref2type"},
        {"v-exponential", "homogeneous"},
        {"v-exponential", "ref2type"},
        {"v-critical", "critical"}},
       5},
      {"AC9", "spine-rate limit on M2", {{"spine-rate-limit", "ref2type"}}, 5},
      {"AC10", "Williams end-to-end on M2", {{"williams-lineage", "ref2type"}}, 600},
      {"AC11", "Q-process moment on M2", {{"qprocess-moment", "ref2type"}}, 300},
      {"AC12", "backward stabilization on M2", {{"backward-stabilize", "ref2type"}}, 600},
  };
  return table;
}

}  // namespace

int main() {
  CheckConfig cfg;
  cfg.seed = 7;
  cfg.full = true;
  const auto timed = [&] {
    const auto start = std::chrono::steady_clock::now();
    auto reports = run_battery(reference_battery(), cfg, [](const CheckReport& r) {
      std::fprintf(stderr, "  %-8s %-20s [%s] %.1fs\n", r.status.c_str(), r.name.c_str(), r.model.c_str(), r.runtime);
    });
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return std::pair{std::move(reports), seconds};
  };

  const auto [first, first_seconds] = timed();
  bool all = true;
  for (const auto& ac : criteria()) {
    bool ok = true;
    double seconds = 0.0;
    std::string detail;
    for (const auto& [check, model] : ac.checks) {
      bool found = false;
      for (const auto& r : first)
        if (r.name == check && r.model == model) {
          found = true;
          ok = ok && r.passed();
          seconds += r.runtime;
          char buf[160];
          std::snprintf(buf, sizeof buf, " %s[%s]=%s(%.3g %s %.3g)", check.c_str(), model.c_str(), r.status.c_str(),
                        r.statistic, r.comparison.c_str(), r.threshold);
          detail += buf;
        }
      ok = ok && found;
    }
    const bool in_time = seconds < ac.budget;
    std::printf("%-5s %s  %s; %.2fs (< %gs)%s\n", ac.id.c_str(), ok && in_time ? "PASS" : "FAIL", ac.what.c_str(),
                seconds, ac.budget, detail.c_str());
    all = all && ok && in_time;
  }

  const auto [second, second_seconds] = timed();
  const bool same = battery_json(first, cfg).dump() == battery_json(second, cfg).dump();
  const bool in_time = std::max(first_seconds, second_seconds) < 1800.0;
  std::printf("AC13  %s  full suite byte-identical across two runs: %s; %.0fs and %.0fs (< 1800s)\n",
              same && in_time ? "PASS" : "FAIL", same ? "yes" : "no", first_seconds, second_seconds);
  all = all && same && in_time;

  int failed = 0;
  for (const auto& r : first) failed += !r.passed() && !r.skipped();
  std::printf("battery: %zu entries, %d failed\n%s", first.size(), failed, summary_table(first).c_str());
  return all ? 0 : 1;
}
