#include "support.hpp"

#include "willow/numerics.hpp"
#include "willow/spectral.hpp"

using namespace willow;
using namespace willow::test;

TEST(Spectral, ScalarCase) {
  const auto s = generalized_eigen(scalar(0.5));
  EXPECT_NEAR(s.lambda0, 0.5, 1e-14);
  EXPECT_NEAR(s.phi0(0), 1.0, 1e-14);
  EXPECT_NEAR(s.phi0_tilde(0), 1.0, 1e-14);
  EXPECT_NEAR(s.pi(0), 1.0, 1e-14);
}

TEST(Spectral, SymmetricTwoType) {
  const auto s = generalized_eigen(symmetric(0.3));
  EXPECT_NEAR(s.lambda0, 0.3, 1e-12);
  EXPECT_NEAR(s.phi0(0), s.phi0(1), 1e-12);
  EXPECT_NEAR(s.pi(0), 0.5, 1e-12);
}

TEST(Spectral, ReferenceRootOfCharacteristicPolynomial) {
  const auto s = generalized_eigen(m2());
  // lambda^2 - 3 lambda + 1.16: smaller root by the cancellation-free form.
  const double disc = std::sqrt(9.0 - 4.0 * 1.16);
  const double root = 2.0 * 1.16 / (3.0 + disc);
  EXPECT_NEAR(s.lambda0, root, 1e-12);
  EXPECT_NEAR(s.lambda0, (3.0 - std::sqrt(4.36)) / 2.0, 1e-10);
  EXPECT_NEAR(s.lambda0 * s.lambda0 - 3.0 * s.lambda0 + 1.16, 0.0, 1e-12);
}

TEST(Spectral, Normalisation) {
  const auto s = generalized_eigen(m2());
  EXPECT_NEAR(s.phi0.maxCoeff(), 1.0, 1e-15);
  EXPECT_NEAR(s.phi0.dot(s.phi0_tilde), 1.0, 1e-12);
  EXPECT_NEAR(s.pi.sum(), 1.0, 1e-12);
  EXPECT_GT(s.phi0.minCoeff(), 0.0);
  EXPECT_GT(s.phi0_tilde.minCoeff(), 0.0);
}

TEST(SpectralProperty, ResidualsOnRandomModels) {
  RandomStream rng(31);
  for (int n = 0; n < 200; ++n) {
    const auto m = random_dense(rng, 1 + static_cast<int>(rng.below(6)));
    const auto s = generalized_eigen(m);
    EXPECT_LE(right_residual(m, s), 1e-10);
    EXPECT_LE(left_residual(m, s), 1e-10);
  }
}

TEST(SpectralProperty, MinimalRealPartOfDenseSpectrum) {
  RandomStream rng(32);
  for (int n = 0; n < 200; ++n) {
    const auto m = random_dense(rng, 1 + static_cast<int>(rng.below(4)));
    const auto s = generalized_eigen(m);
    const Eigen::EigenSolver<Matrix> es(m.killed_generator(), false);
    double lo = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) lo = std::min(lo, es.eigenvalues()(i).real());
    EXPECT_NEAR(s.lambda0, lo, 1e-10);
  }
}

TEST(SpectralProperty, QProcessGeneratorIsConservative) {
  RandomStream rng(33);
  for (int n = 0; n < 100; ++n) {
    const auto m = random_dense(rng, 1 + static_cast<int>(rng.below(6)));
    const Matrix G = qprocess_generator(m, generalized_eigen(m));
    EXPECT_LE(G.rowwise().sum().cwiseAbs().maxCoeff(), 1e-12);
    for (int i = 0; i < m.K(); ++i)
      for (int j = 0; j < m.K(); ++j) {
        if (i != j) {
          EXPECT_GE(G(i, j), 0.0);
        }
      }
  }
}

TEST(Spectral, DecayRateOfExtinctionDerivative) {
  const auto m = m2();
  const auto s = generalized_eigen(m);
  const auto f = solve_extinction(m, TimeGrid{1e-6, 60.0, 0.05});
  for (int i = 0; i < 2; ++i) {
    const double rate = -std::log(-f.dv.value(60.0, i)) / 60.0;
    const double slope = -(std::log(-f.dv.value(60.0, i)) - std::log(-f.dv.value(50.0, i))) / 10.0;
    EXPECT_NEAR(rate, s.lambda0, 0.05);
    EXPECT_NEAR(slope, s.lambda0, 1e-6);
  }
}
