#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rflab/error.hpp"

namespace rflab {

/// Uniform axis with `count` nodes covering [lo, hi] inclusive.
struct Axis {
  double lo = 0.0;
  double hi = 1.0;
  int count = 2;

  double spacing() const { return count > 1 ? (hi - lo) / (count - 1) : 0.0; }
  double node(int i) const { return i == count - 1 ? hi : lo + i * spacing(); }

  std::vector<double> nodes() const {
    std::vector<double> out(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = node(i);
    return out;
  }

  bool operator==(const Axis&) const = default;
};

inline Axis make_axis(double lo, double hi, int count) {
  require(count >= 1, ErrorCode::InvalidArgument, "axis needs at least one node");
  require(count == 1 || hi > lo, ErrorCode::InvalidArgument, "axis bounds must be increasing");
  return Axis{lo, hi, count};
}

/// Tensor grid over the reduced spatial chart times a grid of base-relative times t̄.
struct GridSpec {
  std::vector<Axis> space;
  Axis time;

  std::size_t space_size() const {
    std::size_t s = 1;
    for (const auto& a : space) s *= static_cast<std::size_t>(a.count);
    return s;
  }
  std::size_t size() const { return space_size() * static_cast<std::size_t>(time.count); }

  /// Flat index, time slowest.
  std::size_t index(std::span<const int> ijk, int it) const {
    std::size_t idx = 0;
    for (std::size_t d = 0; d < space.size(); ++d) idx = idx * static_cast<std::size_t>(space[d].count) + static_cast<std::size_t>(ijk[d]);
    return static_cast<std::size_t>(it) * space_size() + idx;
  }

  /// Inverse of index() for the spatial part.
  std::vector<int> unflatten_space(std::size_t s) const {
    std::vector<int> ijk(space.size());
    for (std::size_t d = space.size(); d-- > 0;) {
      const auto c = static_cast<std::size_t>(space[d].count);
      ijk[d] = static_cast<int>(s % c);
      s /= c;
    }
    return ijk;
  }

  std::size_t space_stride(std::size_t dim) const {
    std::size_t stride = 1;
    for (std::size_t d = dim + 1; d < space.size(); ++d) stride *= static_cast<std::size_t>(space[d].count);
    return stride;
  }

  bool operator==(const GridSpec&) const = default;
};

/// Composite trapezoid rule on a uniform axis together with an error estimate
/// from comparison against the rule with doubled spacing.
struct QuadratureResult {
  double value = 0.0;
  double error = 0.0;
};

inline QuadratureResult trapezoid_with_estimate(std::span<const double> f, double h) {
  const std::size_t n = f.size();
  if (n == 0) return {};
  if (n == 1) return {0.0, 0.0};
  double fine = 0.5 * (f.front() + f.back());
  for (std::size_t i = 1; i + 1 < n; ++i) fine += f[i];
  fine *= h;
  if (n < 5) return {fine, std::abs(fine)};
  // Coarse rule on even nodes; when the interval count is odd the final interval
  // is shared by both rules.
  const std::size_t last_even = ((n - 1) % 2 == 0) ? n - 1 : n - 2;
  double coarse = 0.5 * (f[0] + f[last_even]);
  for (std::size_t i = 2; i < last_even; i += 2) coarse += f[i];
  coarse *= 2.0 * h;
  if (last_even != n - 1) coarse += 0.5 * h * (f[n - 2] + f[n - 1]);
  // Richardson: the error of the fine rule is about a third of the difference.
  return {fine, std::abs(fine - coarse) / 3.0};
}

/// Neville evaluation at zero of the interpolating polynomial through (h_i, y_i).
/// Returns the estimate and the change contributed by the last tableau column.
struct Extrapolation {
  double value = 0.0;
  double error = 0.0;
};

inline Extrapolation extrapolate_to_zero(std::span<const double> h, std::span<const double> y) {
  const std::size_t m = y.size();
  require(m == h.size() && m > 0, ErrorCode::InvalidArgument, "extrapolation sizes");
  std::vector<double> p(y.begin(), y.end());
  // `tail` is the estimate from the m-1 points nearest zero.
  double tail = m > 1 ? p[1] : p[0];
  for (std::size_t level = 1; level < m; ++level) {
    for (std::size_t i = 0; i + level < m; ++i) {
      const double hi = h[i];
      const double hj = h[i + level];
      p[i] = (hi * p[i + 1] - hj * p[i]) / (hi - hj);
    }
    if (level + 2 == m) tail = p[1];
  }
  const double value = p[0];
  return {value, m > 1 ? std::abs(value - tail) : std::abs(value)};
}

/// Diagonal rational interpolation (Bulirsch-Stoer) evaluated at zero. The error
/// is the last correction applied. Non-finite values signal a pole.
inline Extrapolation extrapolate_rational_to_zero(std::span<const double> h, std::span<const double> y) {
  const std::size_t m = y.size();
  require(m == h.size() && m > 0, ErrorCode::InvalidArgument, "extrapolation sizes");
  constexpr double kTiny = 1e-300;
  std::vector<double> c(y.begin(), y.end()), d(m);
  std::size_t best = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (h[i] == 0.0) return {y[i], 0.0};
    if (std::abs(h[i]) < std::abs(h[best])) best = i;
    d[i] = y[i] + kTiny;
  }
  double value = y[best];
  double dy = 0.0;
  std::ptrdiff_t ns = static_cast<std::ptrdiff_t>(best) - 1;
  for (std::size_t level = 1; level < m; ++level) {
    for (std::size_t i = 0; i + level < m; ++i) {
      const double w = c[i + 1] - d[i];
      const double t = h[i] * d[i] / h[i + level];
      double dd = t - c[i + 1];
      if (dd == 0.0) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::infinity()};
      dd = w / dd;
      d[i] = c[i + 1] * dd;
      c[i] = t * dd;
    }
    if (2 * (ns + 1) < static_cast<std::ptrdiff_t>(m - level)) {
      dy = c[static_cast<std::size_t>(ns + 1)];
    } else {
      dy = d[static_cast<std::size_t>(ns)];
      --ns;
    }
    value += dy;
  }
  return {value, std::abs(dy)};
}

/// Centered first and second differences on a uniform axis; one-sided second
/// order at the ends.
inline double diff1(std::span<const double> f, std::size_t stride, std::size_t base, int i, int count, double h) {
  auto at = [&](int k) { return f[base + static_cast<std::size_t>(k) * stride]; };
  if (i > 0 && i < count - 1) return (at(i + 1) - at(i - 1)) / (2.0 * h);
  if (i == 0) return (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h);
  return (3.0 * at(i) - 4.0 * at(i - 1) + at(i - 2)) / (2.0 * h);
}

inline double diff2(std::span<const double> f, std::size_t stride, std::size_t base, int i, double h) {
  auto at = [&](int k) { return f[base + static_cast<std::size_t>(k) * stride]; };
  return (at(i + 1) - 2.0 * at(i) + at(i - 1)) / (h * h);
}

inline double mixed_diff(std::span<const double> f, std::size_t stride_a, std::size_t stride_b, std::size_t center, double ha,
                         double hb) {
  const auto c = static_cast<std::ptrdiff_t>(center);
  const auto sa = static_cast<std::ptrdiff_t>(stride_a);
  const auto sb = static_cast<std::ptrdiff_t>(stride_b);
  auto at = [&](std::ptrdiff_t k) { return f[static_cast<std::size_t>(k)]; };
  return (at(c + sa + sb) - at(c + sa - sb) - at(c - sa + sb) + at(c - sa - sb)) / (4.0 * ha * hb);
}

}  // namespace rflab
