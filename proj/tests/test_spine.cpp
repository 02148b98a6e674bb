#include "support.hpp"

#include "willow/girsanov.hpp"
#include "willow/numerics.hpp"
#include "willow/spectral.hpp"
#include "willow/spine.hpp"

#include <unsupported/Eigen/MatrixFunctions>

using namespace willow;
using namespace willow::test;

namespace {

ExtinctionFields fields(const MultitypeModel& m, double T) { return solve_extinction(m, TimeGrid{1e-6, T, 0.05}); }

std::vector<TypeIndex> endpoints(const RateFunction& rates, TypeIndex x, double t, long n, const StreamKey& key) {
  std::vector<TypeIndex> ys;
  for (long r = 0; r < n; ++r) {
    RandomStream rng(key.with_replicate(static_cast<std::uint64_t>(r)));
    ys.push_back(sample_chain(rates, x, rates.lo(), rates.hi(), rng).at(t));
  }
  return ys;
}

std::vector<double> probs(const Vector& p) { return {p.data(), p.data() + p.size()}; }

// Equal up to rounding of the time shifts.
void expect_same_path(const TypedPath& a, const TypedPath& b) {
  EXPECT_EQ(a.origin(), b.origin());
  EXPECT_NEAR(a.start(), b.start(), 1e-12);
  EXPECT_NEAR(a.end(), b.end(), 1e-12);
  ASSERT_EQ(a.jumps().size(), b.jumps().size());
  for (std::size_t i = 0; i < a.jumps().size(); ++i) {
    EXPECT_EQ(a.jumps()[i].type, b.jumps()[i].type);
    EXPECT_NEAR(a.jumps()[i].time, b.jumps()[i].time, 1e-12);
  }
}

}  // namespace

TEST(SpineRates, HomogeneousMechanismGivesTildeGenerator) {
  const auto m = symmetric(0.5, 1.0, 1.0);
  const auto f = fields(m, 4.0);
  const auto rates = spine_rate_matrix(m, f.dv, 3.0);
  const Matrix Qt = h_transform(m).L_tilde;
  for (double t : {0.0, 1.0, 2.5})
    EXPECT_LE((rates.at(t) - Qt).cwiseAbs().maxCoeff(), 1e-9) << t;
}

TEST(SpineRates, SymmetricModelKeepsOriginalRates) {
  const auto m = symmetric(0.3, 1.0, 1.0);
  const auto rates = spine_rate_matrix(m, fields(m, 6.0).dv, 5.0);
  for (double t = 0.0; t < 4.9; t += 0.35) EXPECT_LE((rates.at(t) - m.Q).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(SpineRates, LargeHorizonApproachesPhi0Rates) {
  const auto m = m2();
  const auto s = generalized_eigen(m);
  const double H = 30.0 / s.lambda0;
  const auto f = fields(m, H + 1.0);
  const Matrix G = qprocess_generator(m, s);
  double previous = std::numeric_limits<double>::infinity();
  for (double h = H / 8; h <= H + 1e-9; h *= 2) {
    const double gap = (spine_rate_matrix(m, f.dv, h).at(0.0) - G).cwiseAbs().maxCoeff();
    EXPECT_LE(gap, previous);
    previous = gap;
  }
  EXPECT_LT(previous, 1e-6);
  EXPECT_NEAR(G(0, 1), s.phi0(1) / s.phi0(0) * m.Q(0, 1), 1e-15);
}

TEST(SpineRatesProperty, RowsSumToZero) {
  RandomStream rng(51);
  for (int n = 0; n < 10; ++n) {
    const auto m = random_dense(rng, 2 + static_cast<int>(rng.below(4)));
    const auto rates = spine_rate_matrix(m, fields(m, 4.0).dv, 3.0);
    for (double t = 0.0; t < 2.9; t += 0.3) EXPECT_LE(rates.at(t).rowwise().sum().cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(SampleSpine, SameSeedSamePath) {
  const auto m = m2();
  const auto f = fields(m, 4.0);
  RandomStream a(make_key(7, "spine").with_replicate(3)), b(make_key(7, "spine").with_replicate(3));
  EXPECT_EQ(sample_spine_h(m, f, 0, 3.0, a), sample_spine_h(m, f, 0, 3.0, b));
  EXPECT_NEAR(sample_spine_h(m, f, 0, 3.0, a).end(), 3.0 - 1e-6, 1e-12);
}

TEST(SampleSpine, ConditionedMarginalMatchesForwardEquation) {
  const auto m = m2();
  const auto rates = spine_rate_matrix(m, fields(m, 4.0).dv, 3.0);
  const auto ys = endpoints(rates, 0, 1.0, 100000, make_key(52, "h-spine"));
  const auto p = spine_marginal(rates, 0, {1.0}).front();
  EXPECT_GT(chi_square(counts(ys, 2), probs(p)).pvalue, 0.05);
}

TEST(SampleSpine, HomogeneousLawIsTildeChain) {
  const auto m = symmetric(0.5, 1.0, 1.0);
  const auto rates = spine_rate_matrix(m, fields(m, 4.0).dv, 3.0);
  const auto plain = RateFunction::constant(h_transform(m).L_tilde, 0.0, rates.hi());
  const auto a = endpoints(rates, 0, 1.3, 20000, make_key(53, "a"));
  const auto b = endpoints(plain, 0, 1.3, 20000, make_key(53, "b"));
  const auto ca = counts(a, 2), cb = counts(b, 2);
  const double pooled = static_cast<double>(ca[0] + cb[0]) / 40000.0;
  const double z = (static_cast<double>(ca[0] - cb[0]) / 20000.0) / std::sqrt(2 * pooled * (1 - pooled) / 20000.0);
  EXPECT_LT(std::abs(z), 3.0);
}

TEST(SampleQProcess, ScalarPathHasNoJumps) {
  const auto m = scalar(0.7);
  RandomStream rng(54);
  EXPECT_TRUE(sample_spine_qprocess(m, generalized_eigen(m), 0, 50.0, rng).jumps().empty());
}

TEST(SampleQProcess, OccupationApproachesStationaryLaw) {
  for (const auto& m : {m2(), symmetric(0.4, 1.0, 3.0)}) {
    const auto s = generalized_eigen(m);
    std::vector<double> frac;
    for (long r = 0; r < 400; ++r) {
      RandomStream rng(make_key(55, "occ").with_replicate(static_cast<std::uint64_t>(r)));
      const auto p = sample_spine_qprocess(m, s, 0, 200.0, rng);
      frac.push_back(p.occupation(2, 0.0, 200.0)(0) / 200.0);
    }
    EXPECT_LT(std::abs(zscore(summarize(frac), s.pi(0))), 3.0) << m.name;
  }
  EXPECT_NEAR(generalized_eigen(symmetric(0.4, 1.0, 3.0)).pi(0), 0.5, 1e-12);
}

TEST(SpineMarginal, StartsAtDirac) {
  const auto m = m2();
  const auto p = spine_marginal(spine_rate_matrix(m, fields(m, 4.0).dv, 3.0), 1, {0.0}).front();
  EXPECT_EQ(p(0), 0.0);
  EXPECT_EQ(p(1), 1.0);
}

TEST(SpineMarginal, ConstantRatesGiveMatrixExponential) {
  const auto m = m2();
  const Matrix G = h_transform(m).L_tilde;
  const auto ps = spine_marginal(RateFunction::constant(G, 0.0, 5.0), 0, {0.5, 2.0, 5.0});
  const std::vector<double> ts{0.5, 2.0, 5.0};
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const Matrix P = (ts[k] * G).exp();
    EXPECT_LE((ps[k] - P.row(0).transpose()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(SpineMarginalProperty, MassIsConserved) {
  RandomStream rng(56);
  for (int n = 0; n < 10; ++n) {
    const auto m = random_dense(rng, 2 + static_cast<int>(rng.below(4)));
    const auto rates = spine_rate_matrix(m, fields(m, 5.0).dv, 4.0);
    std::vector<double> ts;
    for (double t = 0.0; t < 3.99; t += 0.1) ts.push_back(t);
    for (const auto& p : spine_marginal(rates, 0, ts)) {
      EXPECT_NEAR(p.sum(), 1.0, 1e-10);
      EXPECT_GE(p.minCoeff(), -1e-12);
    }
  }
}

TEST(SampleBismut, ConstantBetaIsPlainChain) {
  const auto m = symmetric(0.9, 1.0, 2.0);
  const auto rates = bismut_rates(m, 2.0);
  for (double t : {0.0, 1.0, 1.9}) EXPECT_LE((rates.at(t) - m.Q).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(SampleBismut, EndpointMatchesNormalisedFeynmanKac) {
  const auto m = m2();
  const double t = 2.0;
  std::vector<TypeIndex> ys;
  for (long r = 0; r < 50000; ++r) {
    RandomStream rng(make_key(57, "bismut").with_replicate(static_cast<std::uint64_t>(r)));
    ys.push_back(sample_bismut_spine(m, 0, t, rng).at(t));
  }
  Vector p(2);
  for (int j = 0; j < 2; ++j) p(j) = first_moment(m, Vector::Unit(2, j), t)(0);
  p /= p.sum();
  EXPECT_GT(chi_square(counts(ys, 2), probs(p)).pvalue, 0.05);
}

TEST(SampleBismut, TransformAgreesWithRejection) {
  const auto m = m2();
  std::vector<TypeIndex> a, b;
  for (long r = 0; r < 20000; ++r) {
    RandomStream ra(make_key(58, "transform").with_replicate(static_cast<std::uint64_t>(r)));
    RandomStream rb(make_key(58, "rejection").with_replicate(static_cast<std::uint64_t>(r)));
    a.push_back(sample_bismut_spine(m, 0, 1.5, ra).at(0.75));
    b.push_back(sample_bismut_spine(m, 0, 1.5, rb, BismutMethod::rejection).at(0.75));
  }
  const auto ca = counts(a, 2), cb = counts(b, 2);
  const double pooled = static_cast<double>(ca[0] + cb[0]) / 40000.0;
  const double z = (static_cast<double>(ca[0] - cb[0]) / 20000.0) / std::sqrt(2 * pooled * (1 - pooled) / 20000.0);
  EXPECT_LT(std::abs(z), 3.0);
}

TEST(SampleBismut, LongHorizonRatesApproachPhi0Rates) {
  const auto m = m2();
  const Matrix G = qprocess_generator(m, generalized_eigen(m));
  const double near = (bismut_rates(m, 5.0).at(0.0) - G).cwiseAbs().maxCoeff();
  const double far = (bismut_rates(m, 40.0).at(0.0) - G).cwiseAbs().maxCoeff();
  EXPECT_LT(far, near);
  EXPECT_LT(far, 1e-8);
}

TEST(ReverseSpine, InvolutionAndEndpoints) {
  const auto m = m2();
  const auto f = fields(m, 4.0);
  for (long r = 0; r < 100; ++r) {
    RandomStream rng(make_key(59, "rev").with_replicate(static_cast<std::uint64_t>(r)));
    const auto p = sample_spine_h(m, f, 0, 3.0, rng);
    const auto back = reverse_spine(p, 3.0);
    expect_same_path(forward_spine(back), p);
    expect_same_path(reverse_spine(forward_spine(back), 3.0), back);
    EXPECT_EQ(back.at(0.0), p.at(p.end()));
    EXPECT_EQ(back.end(), 0.0);
  }
}

TEST(ReverseSpine, BackwardMarginalStabilises) {
  const auto m = m2();
  const auto s = generalized_eigen(m);
  const double h = 10.0 / s.lambda0;
  const auto f = fields(m, 4.0 * h + 1.0);
  std::vector<double> gaps;
  for (double H : {h, 2 * h, 4 * h}) {
    const auto rates = spine_rate_matrix(m, f.dv, H);
    gaps.push_back(spine_marginal(rates, 0, {H - 1.0}).front()(0));
  }
  EXPECT_LT(std::abs(gaps[2] - gaps[1]), std::abs(gaps[1] - gaps[0]) + 1e-12);
  EXPECT_LT(std::abs(gaps[2] - gaps[1]), 1e-6);
}

TEST(BackwardWeight, TypeFreeForHomogeneousModel) {
  const auto m = symmetric(0.5, 1.0, 1.0);
  const auto s = generalized_eigen(m);
  const auto f = fields(m, 12.0);
  double first = -1.0;
  for (long r = 0; r < 50; ++r) {
    RandomStream rng(make_key(60, "bw").with_replicate(static_cast<std::uint64_t>(r)));
    const auto p = sample_spine_qprocess(m, s, static_cast<TypeIndex>(r % 2), 10.0, rng).shifted(-10.0);
    const double w = backward_weight(m, s, f, p, 1.0).weight;
    if (first < 0) first = w;
    EXPECT_NEAR(w, first, 1e-9 * first);
  }
}

TEST(BackwardWeight, TruncationDecaysExponentially) {
  const auto m = m2();
  const auto s = generalized_eigen(m);
  const auto f = fields(m, 41.0);
  RandomStream rng(61);
  const auto long_path = sample_spine_qprocess(m, s, 0, 40.0, rng);
  auto truncation = [&](double T) {
    TypedPath p = long_path;
    p.set_end(T);
    return backward_weight(m, s, f, p.shifted(-T), 1.0).truncation;
  };
  const double a = truncation(10.0), b = truncation(20.0), c = truncation(40.0);
  EXPECT_LT(b, a);
  EXPECT_LT(c, b);
  EXPECT_NEAR(std::log(b / c) / 20.0, s.lambda0, 1e-3);
}

TEST(BackwardWeight, SelfNormalisedEstimateMatchesLimitMarginal) {
  const auto m = m2();
  const auto s = generalized_eigen(m);
  const double T = 20.0 / s.lambda0, t = 1.0;
  const auto f = fields(m, T + 1.0);
  std::vector<double> w, wy;
  for (long r = 0; r < 20000; ++r) {
    RandomStream rng(make_key(62, "limit").with_replicate(static_cast<std::uint64_t>(r)));
    const TypeIndex x0 = rng.uniform() < s.pi(0) ? 0 : 1;
    const auto p = sample_spine_qprocess(m, s, x0, T, rng).shifted(-T);
    const double wt = backward_weight(m, s, f, p, t).weight;
    w.push_back(wt);
    wy.push_back(wt * (p.at(-t) == 0));
  }
  const auto sw = summarize(w), swy = summarize(wy);
  std::vector<double> normalised;
  for (double x : w) normalised.push_back(x / sw.mean);
  EXPECT_NEAR(summarize(normalised).mean, 1.0, 1e-12);
  const double est = swy.mean / sw.mean;
  std::vector<double> resid;
  for (std::size_t i = 0; i < w.size(); ++i) resid.push_back((wy[i] - est * w[i]) / sw.mean);
  const double se = summarize(resid).se();
  // Limit law of Y_{-t}: P^(H) marginal at H - t for large H.
  const auto G = fields(m, 2 * T + 1.0);
  const double target = spine_marginal(spine_rate_matrix(m, G.dv, 2 * T), 0, {2 * T - t}).front()(0);
  EXPECT_LT(std::abs(est - target) / se, 3.0) << est << " vs " << target;
}
