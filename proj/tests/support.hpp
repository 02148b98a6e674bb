#pragma once

#include "willow/model.hpp"
#include "willow/random.hpp"
#include "willow/stats.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace willow::test {

inline MultitypeModel m1() { return reference::homogeneous(); }
inline MultitypeModel m2() { return reference::two_type(); }
inline MultitypeModel m3() { return reference::critical(); }

inline MultitypeModel scalar(double beta, double alpha = 1.0) {
  return make_model(Matrix::Zero(1, 1), Vector::Constant(1, beta), Vector::Constant(1, alpha));
}

inline MultitypeModel symmetric(double b, double a1 = 1.0, double a2 = 1.0) {
  Matrix Q(2, 2);
  Q << -1, 1, 1, -1;
  return make_model(Q, Vector::Constant(2, b), (Vector(2) << a1, a2).finished());
}

/// Irreducible random model with all off-diagonal rates positive.
inline MultitypeModel random_dense(RandomStream& rng, int K, double beta_lo = -0.5) {
  Matrix Q = Matrix::Zero(K, K);
  for (int i = 0; i < K; ++i)
    for (int j = 0; j < K; ++j)
      if (i != j) Q(i, j) = 0.1 + 1.9 * rng.uniform();
  for (int i = 0; i < K; ++i) Q(i, i) = -Q.row(i).sum();
  Vector beta(K), alpha(K);
  for (int i = 0; i < K; ++i) {
    beta(i) = beta_lo + (1.5 - beta_lo) * rng.uniform();
    alpha(i) = 0.3 + 2.0 * rng.uniform();
  }
  return make_model(Q, beta, alpha);
}

/// z-score of a Monte-Carlo mean against a target.
inline double zscore(const Summary& s, double target) { return (s.mean - target) / s.se(); }

/// Empirical frequencies of types 0..K-1.
inline std::vector<long> counts(const std::vector<TypeIndex>& xs, int K) {
  std::vector<long> c(static_cast<std::size_t>(K), 0);
  for (auto x : xs) ++c[static_cast<std::size_t>(x)];
  return c;
}

}  // namespace willow::test
