#pragma once

#include "willow/core.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace willow {

/// Integration window [t0, T] with a cap on node spacing.
struct TimeGrid {
  double t0 = 1e-6;
  double T = 1.0;
  double max_step = 0.05;

  void check() const {
    if (!(t0 > 0.0) || !(T > t0) || !(max_step > 0.0))
      throw NumericError("time grid needs 0 < t0 < T and a positive max step");
  }
};

enum class Monotonicity { none, nonincreasing, nondecreasing };

/// K-vector valued function of time, stored at nodes together with its first
/// and second time derivatives and interpolated by quintic Hermite splines.
/// Node values are reproduced exactly.  Integrals of the interpolant are exact.
class ScalarField {
 public:
  ScalarField() = default;

  /// Rows of values/first/second are nodes, columns are types.
  ScalarField(std::vector<double> times, Matrix values, Matrix first, Matrix second,
              Monotonicity flag = Monotonicity::none)
      : times_(std::move(times)),
        values_(std::move(values)),
        first_(std::move(first)),
        second_(std::move(second)),
        flag_(flag) {
    if (times_.size() < 2) throw NumericError("a field needs at least two nodes");
    const auto n = as_index(times_.size());
    if (values_.rows() != n || first_.rows() != n || second_.rows() != n ||
        first_.cols() != values_.cols() || second_.cols() != values_.cols())
      throw NumericError("field arrays disagree in shape");
    for (std::size_t i = 1; i < times_.size(); ++i)
      if (!(times_[i] > times_[i - 1])) throw NumericError("field nodes must increase", times_[i]);
    build_prefix();
  }

  int K() const { return static_cast<int>(values_.cols()); }
  std::size_t size() const { return times_.size(); }
  double front() const { return times_.front(); }
  double back() const { return times_.back(); }
  const std::vector<double>& times() const { return times_; }
  const Matrix& node_values() const { return values_; }
  const Matrix& node_first() const { return first_; }
  const Matrix& node_second() const { return second_; }
  Monotonicity monotonicity() const { return flag_; }
  bool contains(double t) const { return t >= front() && t <= back(); }

  double value(double t, TypeIndex k) const {
    const auto [i, h, s] = locate(t);
    return hermite(i, k, h, s);
  }

  /// Value inside a known segment [times[seg], times[seg + 1]], skipping the search.
  double value_on(std::size_t seg, double t, TypeIndex k) const {
    const double h = times_[seg + 1] - times_[seg];
    return hermite(seg, k, h, std::clamp((t - times_[seg]) / h, 0.0, 1.0));
  }

  Vector value(double t) const {
    const auto [i, h, s] = locate(t);
    Vector out(K());
    for (int k = 0; k < K(); ++k) out(k) = hermite(i, k, h, s);
    return out;
  }

  double derivative(double t, TypeIndex k) const {
    const auto [i, h, s] = locate(t);
    const auto r = as_index(i);
    const double s2 = s * s, s3 = s2 * s, s4 = s3 * s;
    const double d0 = -30 * s2 + 60 * s3 - 30 * s4;
    const double d2 = 1 - 18 * s2 + 32 * s3 - 15 * s4;
    const double d3 = -12 * s2 + 28 * s3 - 15 * s4;
    const double d4 = s - 4.5 * s2 + 6 * s3 - 2.5 * s4;
    const double d5 = 1.5 * s2 - 4 * s3 + 2.5 * s4;
    return (values_(r, k) * d0 - values_(r + 1, k) * d0) / h + first_(r, k) * d2 +
           first_(r + 1, k) * d3 + h * (second_(r, k) * d4 + second_(r + 1, k) * d5);
  }

  /// Integral over [a, b] of component k.
  double integral(double a, double b, TypeIndex k) const {
    return antiderivative(b, k) - antiderivative(a, k);
  }

  /// Integral from front() to t of component k.
  double antiderivative(double t, TypeIndex k) const {
    const auto [i, h, s] = locate(t);
    const auto r = as_index(i);
    const double s2 = s * s, s3 = s2 * s, s4 = s3 * s, s5 = s4 * s, s6 = s5 * s;
    const double a0 = s - 2.5 * s4 + 3 * s5 - s6;
    const double a1 = 2.5 * s4 - 3 * s5 + s6;
    const double a2 = 0.5 * s2 - 1.5 * s4 + 1.6 * s5 - 0.5 * s6;
    const double a3 = -s4 + 1.4 * s5 - 0.5 * s6;
    const double a4 = s3 / 6 - 0.375 * s4 + 0.3 * s5 - s6 / 12;
    const double a5 = 0.125 * s4 - 0.2 * s5 + s6 / 12;
    const double partial = values_(r, k) * a0 + values_(r + 1, k) * a1 +
                           h * (first_(r, k) * a2 + first_(r + 1, k) * a3) +
                           h * h * (second_(r, k) * a4 + second_(r + 1, k) * a5);
    return prefix_(r, k) + h * partial;
  }

  /// For a nonincreasing component, the time at which it equals target.
  /// Returns back() if the target is below the final value and front() if above the first.
  double solve_decreasing(TypeIndex k, double target) const {
    if (target >= values_(0, k)) return front();
    const auto n = as_index(times_.size());
    if (target <= values_(n - 1, k)) return back();
    // Last node with value >= target.
    Eigen::Index lo = 0, hi = n - 1;
    while (hi - lo > 1) {
      const auto mid = (lo + hi) / 2;
      if (values_(mid, k) >= target) lo = mid; else hi = mid;
    }
    double a = times_[static_cast<std::size_t>(lo)], b = times_[static_cast<std::size_t>(hi)];
    for (int it = 0; it < 200 && b - a > 1e-15 * std::max(1.0, std::abs(b)); ++it) {
      const double mid = 0.5 * (a + b);
      if (value(mid, k) >= target) a = mid; else b = mid;
    }
    return 0.5 * (a + b);
  }

  /// Same nodes with every component multiplied by factor(k).
  ScalarField scaled(const Vector& factor) const {
    Matrix v = values_ * factor.asDiagonal();
    Matrix d1 = first_ * factor.asDiagonal();
    Matrix d2 = second_ * factor.asDiagonal();
    auto flag = flag_;
    if ((factor.array() < 0.0).any()) flag = Monotonicity::none;
    return ScalarField(times_, std::move(v), std::move(d1), std::move(d2), flag);
  }

  /// Max spacing between adjacent nodes.
  double max_spacing() const {
    double out = 0.0;
    for (std::size_t i = 1; i < times_.size(); ++i) out = std::max(out, times_[i] - times_[i - 1]);
    return out;
  }

 private:
  struct Location {
    std::size_t index;
    double h;
    double s;
  };

  Location locate(double t) const {
    const double span = back() - front();
    const double slack = 1e-12 * std::max(1.0, std::abs(back()));
    if (t < front() - slack || t > back() + slack || std::isnan(t) || span <= 0.0)
      throw NumericError("field queried outside [" + std::to_string(front()) + ", " +
                             std::to_string(back()) + "]",
                         t);
    t = std::clamp(t, front(), back());
    auto it = std::upper_bound(times_.begin(), times_.end(), t);
    std::size_t i = static_cast<std::size_t>(it - times_.begin());
    i = i == 0 ? 0 : i - 1;
    if (i >= times_.size() - 1) i = times_.size() - 2;
    const double h = times_[i + 1] - times_[i];
    return {i, h, (t - times_[i]) / h};
  }

  double hermite(std::size_t i, TypeIndex k, double h, double s) const {
    const auto r = as_index(i);
    const double s2 = s * s, s3 = s2 * s, s4 = s3 * s, s5 = s4 * s;
    const double h1 = 10 * s3 - 15 * s4 + 6 * s5;
    const double h0 = 1 - h1;
    const double h2 = s - 6 * s3 + 8 * s4 - 3 * s5;
    const double h3 = -4 * s3 + 7 * s4 - 3 * s5;
    const double h4 = 0.5 * (s2 - 3 * s3 + 3 * s4 - s5);
    const double h5 = 0.5 * (s3 - 2 * s4 + s5);
    return values_(r, k) * h0 + values_(r + 1, k) * h1 +
           h * (first_(r, k) * h2 + first_(r + 1, k) * h3) +
           h * h * (second_(r, k) * h4 + second_(r + 1, k) * h5);
  }

  void build_prefix() {
    const auto n = as_index(times_.size());
    prefix_ = Matrix::Zero(n, values_.cols());
    for (Eigen::Index r = 0; r + 1 < n; ++r) {
      const double h = times_[static_cast<std::size_t>(r + 1)] - times_[static_cast<std::size_t>(r)];
      for (Eigen::Index k = 0; k < values_.cols(); ++k) {
        const double seg = 0.5 * (values_(r, k) + values_(r + 1, k)) +
                           h * (first_(r, k) - first_(r + 1, k)) / 10.0 +
                           h * h * (second_(r, k) + second_(r + 1, k)) / 120.0;
        prefix_(r + 1, k) = prefix_(r, k) + h * seg;
      }
    }
  }

  std::vector<double> times_;
  Matrix values_;
  Matrix first_;
  Matrix second_;
  Matrix prefix_;
  Monotonicity flag_ = Monotonicity::none;
};

}  // namespace willow
