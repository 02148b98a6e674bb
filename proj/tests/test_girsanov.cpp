#include "support.hpp"

#include "willow/girsanov.hpp"
#include "willow/numerics.hpp"
#include "willow/particle.hpp"
#include "willow/spine.hpp"

using namespace willow;
using namespace willow::test;

TEST(HTransform, ConstantAlphaIsIdentity) {
  const auto m = symmetric(0.4, 2.0, 2.0);
  const auto ht = h_transform(m);
  EXPECT_LE((ht.L_tilde - m.Q).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((ht.beta_tilde - m.beta).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(HTransform, ReferenceModel) {
  const auto ht = h_transform(m2());
  EXPECT_NEAR(ht.beta_tilde(0), 0.7, 1e-15);
  EXPECT_NEAR(ht.beta_tilde(1), -0.2, 1e-15);
  const Matrix expect = (Matrix(2, 2) << -0.5, 0.5, 2, -2).finished();
  EXPECT_LE((ht.L_tilde - expect).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(HTransformProperty, RowsSumToZero) {
  RandomStream rng(41);
  for (int n = 0; n < 100; ++n) {
    const auto ht = h_transform(random_dense(rng, 1 + static_cast<int>(rng.below(6))));
    EXPECT_LE(ht.L_tilde.rowwise().sum().cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Homogenize, HomogeneousDegeneracy) {
  for (double b : {0.0, 0.5, 1.0}) {
    const auto hd = homogenize(symmetric(b, 1.5, 1.5));
    EXPECT_NEAR(hd.beta0, b, 1e-15);
    EXPECT_LE(hd.q.cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LE(hd.varphi.cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Homogenize, ReferenceModel) {
  const auto hd = homogenize(m2());
  EXPECT_NEAR(hd.beta0, std::sqrt(1.39), 1e-14);
  EXPECT_NEAR(hd.beta0, 1.17898, 1e-5);
  EXPECT_NEAR(hd.q(0), 0.23949, 1e-5);
  EXPECT_NEAR(hd.q(1), 0.68949, 1e-5);
  const Vector disc = hd.beta_tilde.array().square() - 2.0 * (hd.L_tilde * hd.beta_tilde).array();
  EXPECT_NEAR(disc(0), 1.39, 1e-14);
  EXPECT_NEAR(disc(1), -3.56, 1e-14);
}

TEST(HomogenizeProperty, VarphiAndQNonnegative) {
  RandomStream rng(42);
  for (int n = 0; n < 1000; ++n) {
    const auto hd = homogenize(random_dense(rng, 1 + static_cast<int>(rng.below(6)), -2.0));
    EXPECT_GE(hd.varphi.minCoeff(), -1e-12);
    EXPECT_GE(hd.q.minCoeff(), 0.0);
  }
}

TEST(HomogenizeProperty, QVanishesIffBetaTildeIsConstant) {
  RandomStream rng(43);
  for (int n = 0; n < 300; ++n) {
    const auto m = random_dense(rng, 2 + static_cast<int>(rng.below(4)), 0.0);
    const auto hd = homogenize(m);
    const bool flat = hd.beta_tilde.maxCoeff() - hd.beta_tilde.minCoeff() < 1e-12;
    EXPECT_FALSE(flat);
    EXPECT_GT(hd.q.maxCoeff(), 0.0);
  }
  // Constant beta~ with beta~ >= 0: q == 0.
  const auto hd = homogenize(symmetric(0.7));
  EXPECT_EQ(hd.q.maxCoeff(), 0.0);
}

TEST(Sigma, HomogeneousIsZero) {
  const auto m = symmetric(1.0);
  const auto f = solve_extinction(m, TimeGrid{1e-6, 5.0, 0.05});
  const auto sig = sigma_field(homogenize(m), tilde_field(m, f.v));
  double worst = 0.0;
  for (double t = 0.01; t <= 5.0; t += 0.01) worst = std::max(worst, sig.value(t).cwiseAbs().maxCoeff() / std::max(1.0, f.v.value(t, 0)));
  EXPECT_LE(worst, 1e-8);
}

TEST(Sigma, BoundsAndLimitOnReferenceModel) {
  const auto m = m2();
  const auto hd = homogenize(m);
  const auto f = solve_extinction(m, TimeGrid{1e-6, 60.0, 0.05});
  const auto vt = tilde_field(m, f.v);
  const auto sig = sigma_field(hd, vt);
  const auto& tau = sig.times();
  for (std::size_t r = 0; r < tau.size(); ++r)
    for (int i = 0; i < 2; ++i) {
      const double tol = 2e-9 * std::max(1.0, vt.node_values()(as_index(r), i));
      EXPECT_GE(sig.node_values()(as_index(r), i), -tol);
      EXPECT_LE(sig.node_values()(as_index(r), i), 2.0 * hd.q(i) + tol);
    }
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(sig.value(60.0, i), 2.0 * hd.q(i), 1e-9);
}

TEST(GirsanovWeight, HomogeneousIsOne) {
  const auto m = symmetric(0.5);
  const auto hd = homogenize(m);
  RandomStream rng(44);
  ParticleOptions opt;
  opt.grid = {0.0, 0.5, 1.0};
  const auto traj = simulate_particles(m, FiniteMeasure{(Vector(2) << 0.5, 0.5).finished()}, 0.05, 1.0, rng, opt);
  EXPECT_NEAR(girsanov_weight(traj.path, hd, 1.0), 1.0, 1e-15);
}

TEST(GirsanovWeight, ExtinctPath) {
  const auto hd = homogenize(m2());
  MeasurePath p({0.0, 1.0, 2.0}, 2);
  p.masses.row(0) << 0.3, 0.1;
  p.masses.row(1) << 0.1, 0.05;
  p.occupation.row(1) << 0.2, 0.08;
  p.occupation.row(2) << 0.25, 0.1;
  const double expect = std::exp(0.3 * hd.q(0) + 0.1 * hd.q(1) - 0.25 * hd.varphi(0) - 0.1 * hd.varphi(1));
  EXPECT_NEAR(girsanov_weight(p, hd, 2.0), expect, 1e-15);
}

TEST(SpineWeight, IdentityAtTimeZero) {
  const auto m = m2();
  const auto f = solve_extinction(m, TimeGrid{1e-6, 4.0, 0.05});
  RandomStream rng(45);
  const auto p = sample_plain_chain(m, 1, 1.0, rng);
  EXPECT_NEAR(spine_weight(p, m, f.v, f.dv, 3.0, 0.0), 1.0, 1e-15);
}

TEST(SpineWeight, HomogeneousMechanismGivesOne) {
  const auto m = symmetric(0.5, 1.0, 1.0);
  const auto f = solve_extinction(m, TimeGrid{1e-6, 4.0, 0.05});
  RandomStream rng(46);
  for (int n = 0; n < 50; ++n) {
    const auto p = sample_plain_chain(m, static_cast<TypeIndex>(n % 2), 2.0, rng);
    EXPECT_NEAR(spine_weight(p, m, f.v, f.dv, 3.0, 2.0), 1.0, 1e-8);
  }
}

TEST(SpineWeightProperty, MartingaleMeanOnGrid) {
  const auto m = m2();
  const auto f = solve_extinction(m, TimeGrid{1e-6, 6.0, 0.05});
  for (double h : {2.0, 5.0})
    for (double t : {0.5, 1.5})
      for (TypeIndex x : {0, 1}) {
        RandomStream rng(make_key(47, "spine-weight").with_replicate(static_cast<std::uint64_t>(10 * h + t + x)));
        std::vector<double> w;
        for (int n = 0; n < 20000; ++n) w.push_back(spine_weight(sample_plain_chain(m, x, t, rng), m, f.v, f.dv, h, t));
        EXPECT_LT(std::abs(zscore(summarize(w), 1.0)), 3.0) << "h=" << h << " t=" << t << " x=" << x;
      }
}
