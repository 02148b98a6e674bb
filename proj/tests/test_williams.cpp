#include "support.hpp"

#include "willow/numerics.hpp"
#include "willow/spectral.hpp"
#include "willow/verify.hpp"
#include "willow/williams.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

using namespace willow;
using namespace willow::test;

namespace {

void check_nodes(const Skeleton& sk, long& seen) {
  for (const auto& node : sk.nodes) {
    ++seen;
    EXPECT_GT(node.r, sk.delta);
    EXPECT_LT(node.r, sk.horizon - node.s);
    EXPECT_GE(node.s, 0.0);
    EXPECT_EQ(node.type, sk.spine.at(node.s));
    for (const auto& child : node.child) {
      EXPECT_EQ(child.horizon, node.r);
      EXPECT_EQ(child.spine.origin(), node.type);
      check_nodes(child, seen);
    }
  }
}

}  // namespace

TEST(ExtinctionTime, CriticalScalarLaw) {
  const auto m = scalar(0.0);
  const auto f = solve_extinction(m, TimeGrid{1e-6, 200.0, 0.1});
  const auto nu = FiniteMeasure::dirac(1, 0, 1.0);
  std::vector<double> hs;
  for (long r = 0; r < 100000; ++r) {
    RandomStream rng(make_key(91, "H").with_replicate(static_cast<std::uint64_t>(r)));
    hs.push_back(sample_extinction_time(f.v, nu, rng));
  }
  const auto ks = ks_one_sample(hs, [](double h) { return std::exp(-1.0 / h); });
  EXPECT_LT(ks.statistic, 0.01);
  const double top = std::exp(-1.0 / 200.0);
  EXPECT_GT(ks_one_sample(hs, [&](double h) { return std::min(1.0, std::exp(-1.0 / h) / top); }).pvalue, 0.05);
  std::nth_element(hs.begin(), hs.begin() + 50000, hs.end());
  EXPECT_NEAR(hs[50000], 1.0 / std::log(2.0), 0.03);
}

TEST(ExtinctionTime, Deterministic) {
  const auto m = m2();
  const auto f = solve_extinction(m, TimeGrid{1e-6, 30.0, 0.05});
  const FiniteMeasure nu{(Vector(2) << 0.3, 0.2).finished()};
  RandomStream a(make_key(92, "det")), b(make_key(92, "det"));
  for (int k = 0; k < 10; ++k) EXPECT_EQ(sample_extinction_time(f.v, nu, a), sample_extinction_time(f.v, nu, b));
}

TEST(ExtinctionTime, ShortGridIsRejected) {
  const auto f = solve_extinction(scalar(0.0), TimeGrid{1e-6, 5.0, 0.1});
  RandomStream rng(93);
  EXPECT_THROW(sample_extinction_time(f.v, FiniteMeasure::dirac(1, 0, 1.0), rng), NumericError);
}

TEST(Skeleton, WideCutoffLeavesBareSpine) {
  const auto m = m2();
  const auto f = solve_extinction(m, TimeGrid{1e-6, 4.0, 0.05});
  RandomStream rng(94);
  const auto sk = sample_skeleton(m, f, 0, 3.0, 3.0, rng);
  EXPECT_TRUE(sk.nodes.empty());
  EXPECT_EQ(count_nodes(sk), 0);
}

TEST(SkeletonProperty, HeightsStayInsideWindows) {
  const auto m = m2();
  const auto f = solve_extinction(m, TimeGrid{1e-6, 4.0, 0.05});
  long seen = 0;
  for (long r = 0; r < 200; ++r) {
    RandomStream rng(make_key(95, "sk").with_replicate(static_cast<std::uint64_t>(r)));
    const auto sk = sample_skeleton(m, f, static_cast<TypeIndex>(r % 2), 3.0, 0.15, rng);
    long here = 0;
    check_nodes(sk, here);
    EXPECT_EQ(here, count_nodes(sk));
    seen += here;
  }
  EXPECT_GT(seen, 1000);
}

TEST(Skeleton, FirstGenerationCountMatchesQuadrature) {
  const auto m = m1();
  const double h = 3.0, delta = 0.15;
  const auto f = solve_extinction(m, TimeGrid{1e-6, 4.0, 0.05});
  const double oracle = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      [&](double s) { return 2.0 * (v0_closed(1.0, delta) - v0_closed(1.0, h - s)); }, 0.0, h - delta);
  std::vector<double> ns;
  for (long r = 0; r < 10000; ++r) {
    RandomStream rng(make_key(96, "count").with_replicate(static_cast<std::uint64_t>(r)));
    ns.push_back(static_cast<double>(sample_skeleton(m, f, 0, h, delta, rng, {.recurse = false}).nodes.size()));
  }
  EXPECT_LT(std::abs(zscore(summarize(ns), oracle)), 3.0) << oracle;
}

TEST(Skeleton, NodeBudgetIsEnforced) {
  const auto m = m2();
  const auto f = solve_extinction(m, TimeGrid{1e-6, 11.0, 0.05});
  RandomStream rng(97);
  EXPECT_THROW(sample_skeleton(m, f, 0, 10.0, 0.001, rng, {.recurse = true, .max_nodes = 100}), BudgetError);
}

TEST(ConditionedSuperprocess, ExtinctionPinnedAtH) {
  const auto ctx = make_particle_context(m2(), 1.0 / 20, 4.0);
  std::vector<double> grid;
  for (int k = 0; k <= 30; ++k) grid.push_back(0.1 * k);
  for (long r = 0; r < 50; ++r) {
    RandomStream rng(make_key(98, "cond").with_replicate(static_cast<std::uint64_t>(r)));
    const auto p = sample_conditioned_superprocess(ctx, 0, 3.0, grid, rng);
    EXPECT_EQ(p.extinction, 3.0);
    EXPECT_EQ(p.total(3.0), 0.0);
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) EXPECT_GT(p.total(grid[k]), 0.0);
  }
}

TEST(QProcess, ScalarFirstMoment) {
  const auto m = m1();
  const auto s = generalized_eigen(m);
  const double eps = 1.0 / 50, delta = 0.05, t = 1.0;
  const auto ctx = make_particle_context(m, eps, 40.0);
  const auto mo = detail::qprocess_moment(ctx, s, 0, t, delta);
  EXPECT_NEAR(mo.oracle, 2.0 * (1.0 - std::exp(-t)), 1e-6);
  std::vector<double> xs;
  for (long r = 0; r < 4000; ++r) {
    RandomStream rng(make_key(99, "q").with_replicate(static_cast<std::uint64_t>(r)));
    const auto p = sample_qprocess(ctx, s, 0, 2.0, {0.0, 0.5, t, 2.0}, delta, rng);
    EXPECT_GT(p.total(2.0), 0.0);
    xs.push_back(p.total(t));
  }
  const auto sm = summarize(xs);
  EXPECT_LT(std::abs(zscore(sm, mo.sampler)), 3.0);
  EXPECT_LT(std::abs(sm.mean - mo.oracle), 3.0 * sm.se() + std::abs(mo.sampler - mo.oracle));
}

TEST(Decomposition, DiracInitialTypeIsKept) {
  const auto ctx = make_particle_context(m2(), 1.0 / 20, 60.0, 0.1);
  const auto nu = FiniteMeasure::dirac(2, 1, 0.5);
  for (long r = 0; r < 50; ++r) {
    RandomStream rng(make_key(100, "dirac").with_replicate(static_cast<std::uint64_t>(r)));
    EXPECT_EQ(assemble_pnu_decomposition(ctx, nu, {0.0, 1.0}, rng).x0, 1);
  }
}

TEST(Decomposition, ExtinctionLawAndMeanMass) {
  const auto m = m2();
  const double eps = 1.0 / 20;
  const auto ctx = make_particle_context(m, eps, 60.0, 0.1);
  const FiniteMeasure nu{(Vector(2) << 0.3, 0.2).finished()};
  const auto n = initial_counts(nu, eps);
  std::vector<double> h0, x1;
  for (long r = 0; r < 3000; ++r) {
    RandomStream rng(make_key(101, "pnu").with_replicate(static_cast<std::uint64_t>(r)));
    const auto d = assemble_pnu_decomposition(ctx, nu, {0.0, 1.0}, rng, {.delta = 0.02});
    h0.push_back(d.h0);
    x1.push_back(d.path.total(1.0));
  }
  EXPECT_GT(ks_one_sample(h0, [&](double t) { return particle_extinction_cdf(ctx.pf, n, t); }).pvalue, 0.05);
  const double oracle = nu.integrate(first_moment(m, Vector::Ones(2), 1.0));
  EXPECT_LT(std::abs(zscore(summarize(x1), oracle)), 3.0) << summarize(x1).mean << " vs " << oracle;
}

TEST(Backward, MassVanishesAtExtinction) {
  const auto m = m2();
  const auto ctx = make_particle_context(m, 1.0 / 20, 11.0);
  const std::vector<double> offsets{-1.0, -0.5, -0.1, 0.0};
  for (long r = 0; r < 20; ++r) {
    RandomStream rng(make_key(102, "back").with_replicate(static_cast<std::uint64_t>(r)));
    const auto p = sample_backward(ctx, 0, 10.0, 1.0, offsets, rng, {.delta = 0.05});
    EXPECT_EQ(p.times, offsets);
    EXPECT_EQ(p.total(0.0), 0.0);
    EXPECT_GT(p.total(-0.1), 0.0);
    EXPECT_EQ(p.occupation.row(0).sum(), 0.0);
  }
}
