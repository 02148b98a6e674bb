#pragma once

// Pure-jump type paths and time-indexed measure paths.

#include "willow/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace willow {

struct Jump {
  double time;
  TypeIndex type;
  bool operator==(const Jump&) const = default;
};

/// Càdlàg pure-jump path of types on [start, end].
class TypedPath {
 public:
  TypedPath() = default;
  TypedPath(TypeIndex origin, double start, double end) : origin_(origin), start_(start), end_(end) {
    if (!(end >= start)) throw PreconditionError("path interval must satisfy start <= end");
  }

  TypeIndex origin() const { return origin_; }
  double start() const { return start_; }
  double end() const { return end_; }
  const std::vector<Jump>& jumps() const { return jumps_; }

  void push_jump(double t, TypeIndex to) {
    const double last = jumps_.empty() ? start_ : jumps_.back().time;
    if (!(t > last) || !(t < end_)) throw NumericError("jump time out of order", t);
    if (to == current()) throw NumericError("jump to the current type", t);
    jumps_.push_back({t, to});
  }

  /// Type of the last jump (or the origin) seen so far.
  TypeIndex current() const { return jumps_.empty() ? origin_ : jumps_.back().type; }
  TypeIndex final_type() const { return current(); }

  /// Truncates the interval; jumps after the new end are dropped.
  void set_end(double end) {
    while (!jumps_.empty() && jumps_.back().time >= end) jumps_.pop_back();
    end_ = end;
  }

  TypeIndex at(double t) const {
    if (t < start_ - 1e-12 || t > end_ + 1e-12) throw NumericError("path queried outside its interval", t);
    auto it = std::upper_bound(jumps_.begin(), jumps_.end(), t,
                               [](double s, const Jump& j) { return s < j.time; });
    return it == jumps_.begin() ? origin_ : std::prev(it)->type;
  }

  /// Calls fn(a, b, type) for each constant piece of the path restricted to [a, b].
  template <class Fn>
  void for_each_segment(double a, double b, Fn&& fn) const {
    a = std::max(a, start_);
    b = std::min(b, end_);
    if (!(b > a)) return;
    double left = start_;
    TypeIndex type = origin_;
    for (const auto& j : jumps_) {
      if (j.time > a) {
        const double lo = std::max(left, a), hi = std::min(j.time, b);
        if (hi > lo) fn(lo, hi, type);
        if (j.time >= b) return;
      }
      left = j.time;
      type = j.type;
    }
    const double lo = std::max(left, a);
    if (b > lo) fn(lo, b, type);
  }

  /// Integral of a type-only function over [a, b].
  double integrate(const Vector& g, double a, double b) const {
    double total = 0.0;
    for_each_segment(a, b, [&](double lo, double hi, TypeIndex y) { total += g(y) * (hi - lo); });
    return total;
  }

  /// Time spent in each type over [a, b].
  Vector occupation(int K, double a, double b) const {
    Vector out = Vector::Zero(K);
    for_each_segment(a, b, [&](double lo, double hi, TypeIndex y) { out(y) += hi - lo; });
    return out;
  }

  /// Same path with every time shifted by dt.
  TypedPath shifted(double dt) const {
    TypedPath out(origin_, start_ + dt, end_ + dt);
    out.jumps_.reserve(jumps_.size());
    for (const auto& j : jumps_) out.jumps_.push_back({j.time + dt, j.type});
    return out;
  }

  bool operator==(const TypedPath&) const = default;

 private:
  TypeIndex origin_ = 0;
  double start_ = 0.0;
  double end_ = 0.0;
  std::vector<Jump> jumps_;
};

/// Re-indexes a path on [0, h'] (h' <= h) as s -> p(h' + s) on [-h', 0].
inline TypedPath reverse_spine(const TypedPath& p, double h) {
  if (p.end() - p.start() > h + 1e-12) throw PreconditionError("path is longer than h");
  return p.shifted(-p.end());
}

/// Inverse of reverse_spine: a path ending at 0 re-indexed to start at 0.
inline TypedPath forward_spine(const TypedPath& p) { return p.shifted(-p.start()); }

inline nlohmann::json to_json(const TypedPath& p) {
  nlohmann::json doc;
  doc["origin"] = p.origin();
  doc["start"] = p.start();
  doc["end"] = p.end();
  nlohmann::json jumps = nlohmann::json::array();
  for (const auto& j : p.jumps()) jumps.push_back({j.time, j.type});
  doc["jumps"] = std::move(jumps);
  return doc;
}

/// Finite measures on the type space recorded on a time grid, together with
/// the exact running occupation integral int_0^t X_s ds.
struct MeasurePath {
  std::vector<double> times;
  Matrix masses;      // rows: grid nodes, columns: types
  Matrix occupation;  // rows: int_{times[0]}^{times[k]} X_s ds per type
  double extinction = std::numeric_limits<double>::infinity();  // +inf: alive at the horizon
  nlohmann::json metadata = nlohmann::json::object();

  MeasurePath() = default;
  MeasurePath(std::vector<double> grid, int K)
      : times(std::move(grid)),
        masses(Matrix::Zero(as_index(times.size()), K)),
        occupation(Matrix::Zero(as_index(times.size()), K)),
        extinction(0.0) {}

  int K() const { return static_cast<int>(masses.cols()); }
  std::size_t size() const { return times.size(); }

  /// Index of the node equal to t.
  std::size_t node(double t) const {
    auto it = std::lower_bound(times.begin(), times.end(), t - 1e-12 * std::max(1.0, std::abs(t)));
    if (it == times.end() || std::abs(*it - t) > 1e-9 * std::max(1.0, std::abs(t)))
      throw PreconditionError("measure path has no node at t = " + std::to_string(t));
    return static_cast<std::size_t>(it - times.begin());
  }
  Vector at(double t) const { return masses.row(as_index(node(t))).transpose(); }
  Vector occupied(double t) const { return occupation.row(as_index(node(t))).transpose(); }
  double total(double t) const { return at(t).sum(); }

  /// Adds another path (same grid), e.g. an independent subtree.
  void superpose(const MeasurePath& other) {
    if (other.times != times) throw PreconditionError("superposed paths must share a grid");
    masses += other.masses;
    occupation += other.occupation;
    extinction = std::max(extinction, other.extinction);
  }
};

}  // namespace willow
