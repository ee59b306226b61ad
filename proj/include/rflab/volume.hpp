#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "rflab/error.hpp"
#include "rflab/geometry.hpp"
#include "rflab/grid.hpp"
#include "rflab/reduced.hpp"

namespace rflab {

struct VolumeOptions {
  double max_error = 1e-3;      ///< error budget per sample
  double tail_fraction = 0.1;   ///< share of the budget the tail may take
  double growth_safety = 0.9;   ///< factor on the fitted quadratic growth rate of l
};

struct VolumeSample {
  double t_bar = 0.0;
  double value = 0.0;
  double error = 0.0;  ///< quadrature + tail + propagated field error
  double quadrature_error = 0.0;
  double tail = 0.0;
  double radius = 0.0;  ///< smallest half-extent of the integration domain
};

struct ReducedVolumeSeries {
  Eigen::VectorXd base;
  double t0 = 0.0;
  bool singular = false;
  int n = 0;
  Family family = Family::GaussianFlat;
  std::vector<VolumeSample> samples;

  std::size_t size() const { return samples.size(); }
  double max_error() const {
    double e = 0.0;
    for (const auto& s : samples) e = std::max(e, s.error);
    return e;
  }
  /// max_j V_j - min_j V_j
  double gap() const {
    if (samples.empty()) return 0.0;
    auto [lo, hi] = std::minmax_element(samples.begin(), samples.end(), [](const auto& a, const auto& b) { return a.value < b.value; });
    return hi->value - lo->value;
  }
};

namespace detail {

inline bool noncompact_axis(const ReducedChart& chart, std::size_t d) {
  switch (chart.model().family()) {
    case Family::GaussianFlat: return true;
    case Family::ShrinkingCylinder: return d == 0;
    default: return false;
  }
}

inline double compact_half_period(const ReducedChart& chart) {
  return chart.model().family() == Family::NumericWarped ? 1.0 : std::numbers::pi;
}

// Trapezoid weights on a uniform axis; `coarse` uses every other node, sharing
// the last interval when the interval count is odd.
inline std::vector<double> trapezoid_weights(const Axis& a, bool coarse) {
  const auto n = static_cast<std::size_t>(a.count);
  std::vector<double> w(n, 0.0);
  const double h = a.spacing();
  if (n < 2) return w;
  if (!coarse) {
    for (std::size_t i = 0; i < n; ++i) w[i] = h;
    w.front() = w.back() = 0.5 * h;
    return w;
  }
  const std::size_t last_even = ((n - 1) % 2 == 0) ? n - 1 : n - 2;
  for (std::size_t i = 0; i <= last_even; i += 2) w[i] = 2.0 * h;
  w[0] = h;
  w[last_even] = h;
  if (last_even != n - 1) {
    w[n - 2] += 0.5 * h;
    w[n - 1] += 0.5 * h;
  }
  return w;
}

inline double tensor_weight(const std::vector<std::vector<double>>& w, const std::vector<int>& ijk) {
  double out = 1.0;
  for (std::size_t d = 0; d < w.size(); ++d) out *= w[d][static_cast<std::size_t>(ijk[d])];
  return out;
}

}  // namespace detail

/// Reduced volume of one time slice of a field: trapezoid rule over the reduced
/// grid against the volume density, plus a tail bound outside the grid from a
/// quadratic lower bound on l fitted along the noncompact axes.
inline VolumeSample reduced_volume(const ReducedDistanceField& f, int it, const VolumeOptions& opt = {}) {
  const auto& g = f.grid;
  require(it >= 0 && it < g.time.count, ErrorCode::InvalidArgument, "time index outside the field");
  const auto& chart = f.chart;
  const double tb = f.t_bar(it);
  const double tau = f.tau(it);
  const int n = f.n();
  const std::size_t k = g.space.size();

  VolumeSample out;
  out.t_bar = tb;
  out.radius = std::numeric_limits<double>::infinity();
  bool has_noncompact = false;
  for (std::size_t d = 0; d < k; ++d) {
    const auto& a = g.space[d];
    if (detail::noncompact_axis(chart, d)) {
      has_noncompact = true;
      out.radius = std::min(out.radius, std::min(-a.lo, a.hi));
    } else {
      // A compact factor must be covered completely.
      if (a.lo != 0.0 || a.hi != detail::compact_half_period(chart))
        fail(ErrorCode::TailUncontrolled, "grid does not cover the compact factor; no tail bound available");
      out.radius = std::min(out.radius, a.hi);
    }
  }

  std::vector<std::vector<double>> fine, coarse;
  for (const auto& a : g.space) {
    fine.push_back(detail::trapezoid_weights(a, false));
    coarse.push_back(detail::trapezoid_weights(a, true));
  }
  const bool estimate = std::all_of(g.space.begin(), g.space.end(), [](const Axis& a) { return a.count >= 5; });

  double vf = 0.0, vc = 0.0, unresolved = 0.0, peak = 0.0;
  for (std::size_t s = 0; s < g.space_size(); ++s) {
    const auto ijk = g.unflatten_space(s);
    const std::size_t idx = f.index(s, it);
    const double wf = detail::tensor_weight(fine, ijk);
    if (!f.resolved(idx)) {
      unresolved += wf;
      continue;
    }
    const double val = f.v[idx] * chart.volume_density(f.point(s), tb);
    peak = std::max(peak, val);
    vf += wf * val;
    vc += detail::tensor_weight(coarse, ijk) * val;
  }
  out.value = vf;
  out.quadrature_error = estimate ? std::abs(vf - vc) / 3.0 : std::abs(vf);
  out.quadrature_error += unresolved * peak;

  if (has_noncompact) {
    // Fit l ~ slope * xi + const with xi the squared noncompact coordinates.
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0, cnt = 0.0;
    std::vector<std::pair<double, double>> pts;
    for (std::size_t s = 0; s < g.space_size(); ++s) {
      const std::size_t idx = f.index(s, it);
      if (!f.resolved(idx)) continue;
      const RVec x = f.point(s);
      double xi = 0.0;
      for (std::size_t d = 0; d < k; ++d)
        if (detail::noncompact_axis(chart, d)) xi += x(static_cast<Eigen::Index>(d)) * x(static_cast<Eigen::Index>(d));
      pts.emplace_back(xi, f.l[idx]);
      sx += xi;
      sy += f.l[idx];
      sxx += xi * xi;
      sxy += xi * f.l[idx];
      cnt += 1.0;
    }
    const double var = sxx - sx * sx / cnt;
    const double slope = var > 0.0 ? (sxy - sx * sy / cnt) / var : 0.0;
    if (!(slope > 0.0)) fail(ErrorCode::TailUncontrolled, "l shows no quadratic growth on the grid");
    const double c = opt.growth_safety * slope;
    double shift = -std::numeric_limits<double>::infinity();
    for (const auto& [xi, l] : pts) shift = std::max(shift, c * xi - l);
    // Integral of the density over the compact factor.
    double compact = 1.0;
    bool any_compact = false;
    for (std::size_t d = 0; d < k; ++d) any_compact = any_compact || !detail::noncompact_axis(chart, d);
    if (any_compact) {
      compact = 0.0;
      for (std::size_t s = 0; s < g.space_size(); ++s) {
        const auto ijk = g.unflatten_space(s);
        bool on_line = true;
        for (std::size_t d = 0; d < k; ++d)
          if (detail::noncompact_axis(chart, d) && ijk[d] != 0) on_line = false;
        if (!on_line) continue;
        double w = 1.0;
        for (std::size_t d = 0; d < k; ++d)
          if (!detail::noncompact_axis(chart, d)) w *= fine[d][static_cast<std::size_t>(ijk[d])];
        compact += w * chart.volume_density(f.point(s), tb);
      }
    }
    const double line = std::sqrt(std::numbers::pi / c);
    double outside = 0.0;
    int m = 0;
    for (std::size_t d = 0; d < k; ++d) {
      if (!detail::noncompact_axis(chart, d)) continue;
      ++m;
      const auto& a = g.space[d];
      outside += 0.5 * line * (std::erfc(std::sqrt(c) * a.hi) + std::erfc(-std::sqrt(c) * a.lo));
    }
    out.tail = std::pow(4.0 * std::numbers::pi * tau, -0.5 * n) * std::exp(shift) * compact * outside * std::pow(line, m - 1);
  }
  if (out.tail > opt.tail_fraction * opt.max_error)
    fail(ErrorCode::TailUncontrolled, "tail bound " + std::to_string(out.tail) + " exceeds its share of the error budget");
  // Round-off of the weighted sum and of the density evaluations.
  const double roundoff = 4.0 * static_cast<double>(g.space_size()) * std::numeric_limits<double>::epsilon() * std::abs(out.value);
  out.error = out.quadrature_error + out.tail + out.value * f.value_error + roundoff;
  return out;
}

inline ReducedVolumeSeries volume_series(const ReducedDistanceField& f, const VolumeOptions& opt = {}) {
  ReducedVolumeSeries s;
  s.base = f.chart.base();
  s.t0 = f.t0;
  s.singular = f.singular;
  s.n = f.n();
  s.family = f.chart.model().family();
  for (int it = 0; it < f.grid.time.count; ++it) s.samples.push_back(reduced_volume(f, it, opt));
  return s;
}

struct MonotonicityReport {
  bool pairwise = true;
  std::optional<std::size_t> violation;  ///< first j with V_{j+1} < V_j - (err_j + err_{j+1})
  bool fatou = true;                     ///< V_j <= 1 + err_j at every sample
  double terminal_value = 0.0;           ///< extrapolated limit (regular) or last sample (singular)
  double terminal_error = 0.0;
  bool terminal_ok = false;
  bool pass = false;
  std::string note;
};

/// Pairwise monotonicity within error bars and the terminal limit: for a regular
/// base the series is extrapolated to t_bar = t0 in tau and must reach 1; for a
/// singular base the last sample must not exceed 1.
inline MonotonicityReport monotonicity_check(const ReducedVolumeSeries& s, int terminal_points = 5) {
  MonotonicityReport r;
  if (s.size() < 5) {
    r.note = "fewer than 5 samples";
    return r;
  }
  for (std::size_t j = 0; j + 1 < s.size(); ++j) {
    const auto& a = s.samples[j];
    const auto& b = s.samples[j + 1];
    if (b.value < a.value - (a.error + b.error)) {
      r.pairwise = false;
      if (!r.violation) r.violation = j;
    }
  }
  for (const auto& x : s.samples) r.fatou = r.fatou && x.value <= 1.0 + x.error;
  const auto& last = s.samples.back();
  if (s.singular) {
    r.terminal_value = last.value;
    r.terminal_error = last.error;
    r.terminal_ok = last.value <= 1.0 + last.error;
  } else {
    const std::size_t q = std::min<std::size_t>(static_cast<std::size_t>(std::max(terminal_points, 2)), s.size());
    std::vector<double> h, y;
    for (std::size_t j = s.size() - q; j < s.size(); ++j) {
      h.push_back(s.t0 - s.samples[j].t_bar);
      y.push_back(s.samples[j].value);
    }
    const auto e = extrapolate_to_zero(h, y);
    r.terminal_value = e.value;
    r.terminal_error = last.error + e.error;
    r.terminal_ok = std::abs(e.value - 1.0) <= r.terminal_error;
  }
  r.pass = r.pairwise && r.fatou && r.terminal_ok;
  if (r.violation) r.note = "dip after sample " + std::to_string(*r.violation);
  return r;
}

enum class SolitonClass { Soliton, NotSoliton, NoClaim };

inline std::string to_string(SolitonClass c) {
  switch (c) {
    case SolitonClass::Soliton: return "soliton";
    case SolitonClass::NotSoliton: return "not soliton";
    case SolitonClass::NoClaim: return "not constant / no claim";
  }
  return "?";
}

struct EqualityOptions {
  double soliton_tol = 1e-3;
  double gradconst_tol = 1e-3;
  double w_tol = 1e-3;
  double potential_scale = 1.0;  ///< multiplies the sampled potential (perturbation tests)
};

struct SolitonVerdict {
  double gap = 0.0;
  double max_error = 0.0;
  bool constant = false;
  double slice_t = 0.0;  ///< t_bar of the slice the potential is taken from
  double soliton_residual = std::numeric_limits<double>::infinity();
  double C = 0.0;
  double gradconst_spread = std::numeric_limits<double>::infinity();
  double w_residual = std::numeric_limits<double>::infinity();  ///< sup |w| over checked nodes
  double identity_residual = std::numeric_limits<double>::infinity();  ///< sup |di3| on the limit
  double potential_range = 0.0;  ///< max f on the slice (before scaling)
  SolitonClass verdict = SolitonClass::NoClaim;
};

/// Equality case of the singular monotonicity. The potential is
/// f = l(., t_bar*) - min l on the grid slice nearest T - 1.
inline SolitonVerdict equality_case_detect(const ReducedVolumeSeries& s, const ReducedDistanceField* limit, const EqualityOptions& opt = {}) {
  require(limit != nullptr && limit->singular, ErrorCode::MissingLimitField, "equality detection needs a singular limit field");
  SolitonVerdict v;
  v.gap = s.gap();
  v.max_error = s.max_error();
  v.constant = v.gap <= 2.0 * v.max_error;

  const auto& g = limit->grid;
  const auto& model = limit->chart.model();
  const double T = model.singular_time();
  int best = 0;
  for (int it = 1; it < g.time.count; ++it)
    if (std::abs(g.time.node(it) - (T - 1.0)) < std::abs(g.time.node(best) - (T - 1.0))) best = it;
  v.slice_t = g.time.node(best);
  std::vector<double> vals(g.space_size());
  for (std::size_t sp = 0; sp < g.space_size(); ++sp) {
    vals[sp] = limit->l[limit->index(sp, best)];
    require(std::isfinite(vals[sp]), ErrorCode::MissingLimitField, "limit field has unresolved nodes on the potential slice");
  }
  const auto range = std::minmax_element(vals.begin(), vals.end());
  const double lo = *range.first;
  v.potential_range = *range.second - lo;
  for (double& x : vals) x = opt.potential_scale * (x - lo);
  const auto pot = sampled_potential(limit->chart, g.space, v.slice_t, std::move(vals));
  v.soliton_residual = soliton_residual(model, pot, v.slice_t);
  const auto gc = gradconst_check(model, pot, v.slice_t);
  v.C = gc.C;
  v.gradconst_spread = gc.spread;

  try {
    const auto ineq = check_inequalities(*limit);
    v.w_residual = 0.0;
    for (int it = 0; it < g.time.count; ++it) {
      for (std::size_t sp = 0; sp < g.space_size(); ++sp) {
        const std::size_t idx = limit->index(sp, it);
        if (!std::isfinite(ineq.di2[idx])) continue;
        v.w_residual = std::max(v.w_residual, std::abs(limit->tau(it) * ineq.di2[idx] * limit->v[idx]));
      }
    }
    v.identity_residual = ineq.max_abs_di3;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::GridTooCoarse) throw;
  }

  if (!v.constant) {
    v.verdict = SolitonClass::NoClaim;
  } else {
    const bool ok = v.soliton_residual <= opt.soliton_tol && v.gradconst_spread <= opt.gradconst_tol && v.w_residual <= opt.w_tol;
    v.verdict = ok ? SolitonClass::Soliton : SolitonClass::NotSoliton;
  }
  return v;
}

struct ConstancyReport {
  double gap = 0.0;
  double max_error = 0.0;
  double mean = 0.0;
  bool pass = false;
};

/// For the closed-form solitons the singular reduced volume is constant in t_bar.
inline ConstancyReport soliton_implies_constant_check(const ReducedVolumeSeries& s) {
  require(s.family != Family::NumericWarped, ErrorCode::InvalidArgument, "constancy is asserted only for closed-form solitons");
  ConstancyReport r;
  r.gap = s.gap();
  r.max_error = s.max_error();
  for (const auto& x : s.samples) r.mean += x.value;
  if (!s.samples.empty()) r.mean /= static_cast<double>(s.size());
  r.pass = r.gap <= 2.0 * r.max_error;
  return r;
}

}  // namespace rflab
