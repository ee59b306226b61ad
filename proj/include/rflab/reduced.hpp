#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "rflab/error.hpp"
#include "rflab/flow.hpp"
#include "rflab/geometry.hpp"
#include "rflab/grid.hpp"
#include "rflab/lgeodesic.hpp"
#include "rflab/parallel.hpp"

namespace rflab {

struct FieldOptions {
  ShootingOptions shooting;
  int workers = 1;
  double max_unresolved_fraction = 1e-3;
  /// Curve nodes later than this are left out of the per-node |V|^2 maximum.
  double velocity_cut = std::numeric_limits<double>::infinity();

  FieldOptions() { shooting.multistart_always = false; }
};

/// Sampled L, l, v over a reduced space grid times a t_bar grid for one base.
struct ReducedDistanceField {
  ReducedChart chart;
  double t0 = 0.0;
  bool singular = false;  ///< t0 is the singular time and values are a limit
  double value_error = 0.0;  ///< uniform bound on the error of l (extrapolation, for limits)
  GridSpec grid;
  std::vector<double> L, l, v, dt_L;
  std::vector<RVec> grad_L;
  std::vector<std::uint8_t> ambiguous;
  std::vector<double> velocity_max;  ///< max |V|^2 over the curve up to velocity_cut

  ReducedDistanceField(ReducedChart c, double t0_, GridSpec g) : chart(std::move(c)), t0(t0_), grid(std::move(g)) {
    const std::size_t m = grid.size();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    L.assign(m, nan);
    l.assign(m, nan);
    v.assign(m, nan);
    dt_L.assign(m, nan);
    grad_L.assign(m, RVec());
    ambiguous.assign(m, 0);
    velocity_max.assign(m, nan);
  }

  int n() const { return chart.n(); }
  double t_bar(int it) const { return grid.time.node(it); }
  double tau(int it) const { return t0 - t_bar(it); }
  RVec point(std::size_t s) const { return detail::node_point(grid.space, grid.unflatten_space(s)); }
  bool resolved(std::size_t idx) const { return std::isfinite(l[idx]); }
  std::size_t index(std::size_t s, int it) const { return static_cast<std::size_t>(it) * grid.space_size() + s; }
};

inline double reduced_v(int n, double tau, double l) { return std::pow(4.0 * std::numbers::pi * tau, -0.5 * n) * std::exp(-l); }

namespace detail {

inline double window_velocity(const ReducedChart& chart, const LGeodesicSolution& sol, double cut) {
  double best = 0.0;
  const auto& c = sol.curve;
  for (std::size_t k = 0; k < c.size(); ++k) {
    if (c.t[k] > cut) continue;
    const auto e = chart.eval(c.x[k], c.t[k]);
    double s = 0.0;
    for (int i = 0; i < c.V[k].size(); ++i) s += e.a(i) * c.V[k](i) * c.V[k](i);
    best = std::max(best, s);
  }
  return best;
}

}  // namespace detail

/// Minimal L over the grid. Nodes are processed along lines of the first space
/// axis so each solve can start from its neighbour's Z; failed solves are
/// retried with a fourfold multistart set.
inline ReducedDistanceField build_field(const ReducedChart& chart, double t0, const GridSpec& grid, const FieldOptions& opt = {}) {
  require(static_cast<int>(grid.space.size()) == chart.dim(), ErrorCode::GridMismatch, "grid dimension differs from the reduced chart");
  for (int it = 0; it < grid.time.count; ++it) require(grid.time.node(it) < t0, ErrorCode::InvalidArgument, "t_bar nodes must precede t0");
  detail::check_axes(chart, grid.space);
  ReducedDistanceField f(chart, t0, grid);
  const std::size_t line_len = static_cast<std::size_t>(grid.space[0].count);
  const std::size_t stride0 = grid.space_stride(0);
  const std::size_t per_time = grid.space_size() / line_len;
  const std::size_t lines = per_time * static_cast<std::size_t>(grid.time.count);
  const int n = chart.n();

  auto solve = [&](const RVec& q, double tb, const std::vector<RVec>& warm) -> std::optional<LGeodesicSolution> {
    try {
      return solve_min_l_geodesic(chart, q, tb, t0, opt.shooting, warm);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoConvergence) throw;
    }
    ShootingOptions wide = opt.shooting;
    wide.multistart = std::max(4 * wide.multistart, 16);
    wide.multistart_always = true;
    try {
      return solve_min_l_geodesic(chart, q, tb, t0, wide, warm);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::NoConvergence) throw;
    }
    return std::nullopt;
  };

  parallel_for(lines, opt.workers, [&](std::size_t line) {
    const int it = static_cast<int>(line / per_time);
    const std::size_t rest = line % per_time;
    const double tb = grid.time.node(it);
    const double tau = t0 - tb;
    std::vector<RVec> warm;
    for (std::size_t i0 = 0; i0 < line_len; ++i0) {
      const std::size_t s = i0 * stride0 + rest;
      const std::size_t idx = f.index(s, it);
      const RVec q = f.point(s);
      const auto sol = solve(q, tb, warm);
      if (!sol) {
        warm.clear();
        continue;
      }
      f.L[idx] = sol->L;
      f.l[idx] = sol->L / (2.0 * std::sqrt(tau));
      f.v[idx] = reduced_v(n, tau, f.l[idx]);
      f.dt_L[idx] = sol->dt_L;
      f.grad_L[idx] = sol->grad_L;
      f.ambiguous[idx] = sol->ambiguous ? 1 : 0;
      f.velocity_max[idx] = detail::window_velocity(chart, *sol, opt.velocity_cut);
      warm.assign(1, sol->Z);
    }
  });

  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < f.l.size(); ++i)
    if (!f.resolved(i)) bad.push_back(i);
  if (static_cast<double>(bad.size()) > opt.max_unresolved_fraction * static_cast<double>(f.l.size())) {
    std::string list;
    for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 20); ++i) list += (i ? "," : "") + std::to_string(bad[i]);
    fail(ErrorCode::UnresolvedNodes, std::to_string(bad.size()) + " of " + std::to_string(f.l.size()) + " nodes unresolved: " + list);
  }
  return f;
}

/// Fourth-order centered derivatives of nodal values at one node. Values past a
/// chart boundary where the reduced coordinate folds evenly are mirrored.
struct NodeDerivs {
  double value = 0.0;
  double dt = 0.0;
  RVec df;
  RMat d2f;
};

namespace detail {

inline constexpr std::array<double, 5> kD1{1.0 / 12, -8.0 / 12, 0.0, 8.0 / 12, -1.0 / 12};
inline constexpr std::array<double, 5> kD2{-1.0 / 12, 16.0 / 12, -30.0 / 12, 16.0 / 12, -1.0 / 12};

inline bool folds_at(const ReducedChart& chart, int d, double x) {
  switch (chart.model().family()) {
    case Family::EinsteinSphere: return x == 0.0 || x == std::numbers::pi;
    case Family::ShrinkingCylinder: return d == 1 && (x == 0.0 || x == std::numbers::pi);
    case Family::NumericWarped: return x == 0.0 || x == 1.0;
    default: return false;
  }
}

}  // namespace detail

inline std::optional<NodeDerivs> node_derivatives(const ReducedDistanceField& f, const std::vector<double>& values, std::size_t s, int it) {
  const auto& g = f.grid;
  const int k = static_cast<int>(g.space.size());
  const auto ijk = g.unflatten_space(s);
  // Moves `at` by `off` along axis d; false when the stencil leaves the grid.
  auto shifted = [&](std::vector<int>& at, int d, int off) {
    const auto& ax = g.space[static_cast<std::size_t>(d)];
    int i = at[static_cast<std::size_t>(d)] + off;
    if (i < 0) {
      if (!detail::folds_at(f.chart, d, ax.lo)) return false;
      i = -i;
    } else if (i >= ax.count) {
      if (!detail::folds_at(f.chart, d, ax.hi)) return false;
      i = 2 * (ax.count - 1) - i;
    }
    if (i < 0 || i >= ax.count) return false;
    at[static_cast<std::size_t>(d)] = i;
    return true;
  };
  auto value_at = [&](const std::vector<int>& at, int t) -> std::optional<double> {
    if (t < 0 || t >= g.time.count) return std::nullopt;
    const std::size_t idx = g.index(at, t);
    if (!std::isfinite(values[idx]) || f.ambiguous[idx]) return std::nullopt;
    return values[idx];
  };
  NodeDerivs out;
  out.df = RVec::Zero(k);
  out.d2f = RMat::Zero(k, k);
  const auto centre = value_at(ijk, it);
  if (!centre) return std::nullopt;
  out.value = *centre;
  const double ht = g.time.spacing();
  for (int o = -2; o <= 2; ++o) {
    const auto val = value_at(ijk, it + o);
    if (!val) return std::nullopt;
    out.dt += detail::kD1[static_cast<std::size_t>(o + 2)] * *val / ht;
  }
  for (int a = 0; a < k; ++a) {
    const double ha = g.space[static_cast<std::size_t>(a)].spacing();
    for (int o = -2; o <= 2; ++o) {
      auto at = ijk;
      if (!shifted(at, a, o)) return std::nullopt;
      const auto val = value_at(at, it);
      if (!val) return std::nullopt;
      out.df(a) += detail::kD1[static_cast<std::size_t>(o + 2)] * *val / ha;
      out.d2f(a, a) += detail::kD2[static_cast<std::size_t>(o + 2)] * *val / (ha * ha);
    }
    for (int b = a + 1; b < k; ++b) {
      const double hb = g.space[static_cast<std::size_t>(b)].spacing();
      double m = 0.0;
      for (int oa = -2; oa <= 2; ++oa) {
        for (int ob = -2; ob <= 2; ++ob) {
          const double w = detail::kD1[static_cast<std::size_t>(oa + 2)] * detail::kD1[static_cast<std::size_t>(ob + 2)];
          if (w == 0.0) continue;
          auto at = ijk;
          if (!shifted(at, a, oa) || !shifted(at, b, ob)) return std::nullopt;
          const auto val = value_at(at, it);
          if (!val) return std::nullopt;
          m += w * *val;
        }
      }
      out.d2f(a, b) = out.d2f(b, a) = m / (ha * hb);
    }
  }
  return out;
}

struct InequalityTolerances {
  double eq = 1e-4;
  double ineq = 1e-3;
};

/// Residuals of the three differential (in)equalities for l at every node with
/// a complete stencil; NaN elsewhere. di1 >= 0, di2 <= 0, di3 = 0 up to tolerance.
struct InequalityReport {
  std::vector<double> di1, di2, di3;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  double max_abs_di3 = 0.0;
  double max_abs_di1 = 0.0;
  double min_di1 = std::numeric_limits<double>::infinity();
  double max_di2 = -std::numeric_limits<double>::infinity();
  InequalityTolerances tol;
  bool pass = false;

  double di1_violation() const { return std::max(0.0, -min_di1); }
  double di2_violation() const { return std::max(0.0, max_di2); }
};

namespace detail {

// Fills the residuals at every node where `derivs` yields a value.
template <class Derivs>
InequalityReport inequality_residuals(const ReducedDistanceField& f, const InequalityTolerances& tol, Derivs&& derivs) {
  InequalityReport r;
  r.tol = tol;
  const std::size_t m = f.grid.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.di1.assign(m, nan);
  r.di2.assign(m, nan);
  r.di3.assign(m, nan);
  const int n = f.n();
  for (int it = 0; it < f.grid.time.count; ++it) {
    const double tb = f.t_bar(it);
    const double tau = f.tau(it);
    for (std::size_t s = 0; s < f.grid.space_size(); ++s) {
      const std::optional<NodeDerivs> d = derivs(s, it);
      if (!d) {
        ++r.excluded;
        continue;
      }
      const RVec x = f.point(s);
      const double R = f.chart.eval(x, tb).R;
      const double lap = f.chart.frame_hessian(x, tb, d->df, d->d2f).trace();
      const double g2 = f.chart.grad_norm2(x, tb, d->df);
      const double l = d->value;
      const std::size_t idx = f.index(s, it);
      r.di1[idx] = -d->dt - lap + g2 - R + n / (2.0 * tau);
      r.di2[idx] = -g2 + R + (l - n) / tau + 2.0 * lap;
      r.di3[idx] = -2.0 * d->dt + g2 - R + l / tau;
      ++r.checked;
      r.max_abs_di3 = std::max(r.max_abs_di3, std::abs(r.di3[idx]));
      r.max_abs_di1 = std::max(r.max_abs_di1, std::abs(r.di1[idx]));
      r.min_di1 = std::min(r.min_di1, r.di1[idx]);
      r.max_di2 = std::max(r.max_di2, r.di2[idx]);
    }
  }
  require(r.checked > 0, ErrorCode::GridTooCoarse, "no node has a complete difference stencil");
  r.pass = r.max_abs_di3 <= tol.eq && r.di1_violation() <= tol.ineq && r.di2_violation() <= tol.ineq;
  return r;
}

}  // namespace detail

inline InequalityReport check_inequalities(const ReducedDistanceField& f, const InequalityTolerances& tol = {}) {
  return detail::inequality_residuals(f, tol, [&](std::size_t s, int it) { return node_derivatives(f, f.l, s, it); });
}

/// Same checks on a grid and its refinement. Residuals count as shrinking when
/// the coarse value is at or below `floor` or drops at least threefold.
struct RefinementReport {
  InequalityReport coarse, fine;
  double ratio_di3 = 0.0, ratio_di1 = 0.0, ratio_di2 = 0.0;
  bool shrinks = false;
  bool pass = false;
};

inline RefinementReport refine_inequalities(const ReducedDistanceField& coarse, const ReducedDistanceField& fine, const InequalityTolerances& tol = {},
                                            double floor = 1e-9) {
  RefinementReport out;
  out.coarse = check_inequalities(coarse, tol);
  out.fine = check_inequalities(fine, tol);
  auto ratio = [](double c, double f) { return f > 0.0 ? c / f : std::numeric_limits<double>::infinity(); };
  out.ratio_di3 = ratio(out.coarse.max_abs_di3, out.fine.max_abs_di3);
  out.ratio_di1 = ratio(out.coarse.di1_violation(), out.fine.di1_violation());
  out.ratio_di2 = ratio(out.coarse.di2_violation(), out.fine.di2_violation());
  auto ok = [&](double c, double r) { return c <= floor || r >= 3.0; };
  out.shrinks = ok(out.coarse.max_abs_di3, out.ratio_di3) && ok(out.coarse.di1_violation(), out.ratio_di1) &&
                ok(out.coarse.di2_violation(), out.ratio_di2);
  if (!out.fine.pass && !out.shrinks) fail(ErrorCode::GridTooCoarse, "tolerances missed and residuals do not shrink under refinement");
  out.pass = out.fine.pass && out.shrinks;
  return out;
}

/// Constants of |R| <= C / (T - t)^r.
struct TypeAConstants {
  double C = 0.0;
  double r = 1.0;
};

inline TypeAConstants type_a_constants(const MetricModel& m) {
  const int n = m.dimension();
  switch (m.family()) {
    case Family::GaussianFlat: return {0.0, 1.0};
    case Family::EinsteinSphere: return {0.5 * n, 1.0};
    case Family::ShrinkingCylinder: return {0.5 * (n - 1), 1.0};
    case Family::NumericWarped: break;
  }
  const auto& h = *m.history();
  const double T = m.singular_time();
  double r = 1.0;
  try {
    r = std::max(1.0, fit_type_a(h, T).r);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InsufficientTail) throw;
  }
  double C = 0.0;
  for (const auto& s : h.states()) {
    const auto c = warped_curvature(s);
    for (double R : c.scalar) C = std::max(C, std::abs(R) * std::pow(T - s.t, r));
  }
  return {C, r};
}

/// Quantitative bounds from the limit argument, instantiated on one window.
struct TheoremBounds {
  double a = 0.0, b = 0.0, k = 0.0;
  TypeAConstants type_a;
  double D = 0.0;  ///< sup |eta'|^2_{g(t)} over comparison segments, t in [0, k]
  double E = 0.0;  ///< bound on |L_i|
  double F = 0.0;
  std::vector<double> max_L;       ///< per t_i, max |L| on the window
  std::vector<double> G_observed;  ///< per t_i, max |V|^2 on [t_bar, k]
  double G = 0.0;                  ///< stabilized velocity bound
  double G_growth = 0.0;           ///< largest relative increase over the last three steps
  double grad_bound = 0.0;         ///< 2 sqrt(G)
  double time_bound = 0.0;
  std::vector<double> max_grad_L, max_dt_L;
  bool L_below_E = false;
  bool G_stable = false;
  bool grad_ok = false;
  bool time_ok = false;
};

struct SingularLimitDiagnostics {
  double T = 0.0;
  std::vector<double> t_seq;
  std::vector<ReducedDistanceField> fields;
  std::vector<double> deltas;        ///< sup |F_{i+1} - F_i|
  std::vector<double> lip_space;     ///< per field, max |dl| / g(t_bar)-length of the grid step
  std::vector<double> lip_time;
  std::optional<ReducedDistanceField> limit;
  double extrapolation_error = 0.0;  ///< sup over nodes of the Neville tail change
  bool cauchy = false;
  TheoremBounds bounds;
  std::optional<InequalityReport> limit_inequalities;
};

enum class LimitExtrapolation { Rational, Polynomial };

struct LimitOptions {
  FieldOptions field;
  int extrapolation_points = 7;
  LimitExtrapolation method = LimitExtrapolation::Polynomial;
  bool require_cauchy = true;
  double stability = 0.02;  ///< allowed relative growth of max |V|^2
  InequalityTolerances tol;
};

/// t_i = T (1 - 2^-i) for i = first..last.
inline std::vector<double> geometric_sequence(double T, int first, int last) {
  std::vector<double> t;
  for (int i = first; i <= last; ++i) t.push_back(T * (1.0 - std::ldexp(1.0, -i)));
  return t;
}

namespace detail {

inline double comparison_speed_bound(const ReducedChart& chart, const GridSpec& grid, double k) {
  const double t_lo = std::max(0.0, chart.model().t_min());
  double D = 0.0;
  constexpr int kSamples = 33;
  for (std::size_t s = 0; s < grid.space_size(); ++s) {
    const RVec q = detail::node_point(grid.space, grid.unflatten_space(s));
    for (int i = 0; i < kSamples; ++i) {
      const RVec x = q * (static_cast<double>(i) / (kSamples - 1));
      for (int j = 0; j < kSamples; ++j) {
        const double t = t_lo + (k - t_lo) * j / (kSamples - 1);
        const auto e = chart.eval(chart.canonical(x), t);
        double sp = 0.0;
        for (int d = 0; d < q.size(); ++d) sp += e.a(d) * q(d) * q(d);
        D = std::max(D, sp);
      }
    }
  }
  return D;
}

inline void lipschitz(const ReducedDistanceField& f, double& space, double& time) {
  space = 0.0;
  time = 0.0;
  const auto& g = f.grid;
  for (int it = 0; it < g.time.count; ++it) {
    for (std::size_t s = 0; s < g.space_size(); ++s) {
      const std::size_t idx = f.index(s, it);
      if (!f.resolved(idx)) continue;
      if (it + 1 < g.time.count) {
        const std::size_t j = f.index(s, it + 1);
        if (f.resolved(j)) time = std::max(time, std::abs(f.l[j] - f.l[idx]) / g.time.spacing());
      }
      const auto ijk = g.unflatten_space(s);
      const RVec x = f.point(s);
      const auto e = f.chart.eval(x, f.t_bar(it));
      for (std::size_t d = 0; d < g.space.size(); ++d) {
        if (ijk[d] + 1 >= g.space[d].count) continue;
        const std::size_t j = idx + g.space_stride(d);
        if (!f.resolved(j)) continue;
        const double len = std::sqrt(e.a(static_cast<int>(d))) * g.space[d].spacing();
        space = std::max(space, std::abs(f.l[j] - f.l[idx]) / len);
      }
    }
  }
}

}  // namespace detail

/// Fields l_{p,t_i} on a common grid, their sup-norm deltas, Lipschitz data, an
/// extrapolation in h_i = sqrt(T - t_i) to the singular limit, and the
/// bounds E, F, G with the gradient and time-derivative bounds they imply.
inline SingularLimitDiagnostics singular_limit(const ReducedChart& chart, const std::vector<double>& t_seq, const GridSpec& grid,
                                               const LimitOptions& opt = {}) {
  require(t_seq.size() >= 5, ErrorCode::InvalidArgument, "the limit needs at least 5 base times");
  const double T = chart.model().singular_time();
  for (std::size_t i = 0; i < t_seq.size(); ++i) {
    require(t_seq[i] < T, ErrorCode::InvalidArgument, "base times must precede T");
    require(i == 0 || t_seq[i] > t_seq[i - 1], ErrorCode::InvalidArgument, "base times must increase");
  }
  SingularLimitDiagnostics d;
  d.T = T;
  d.t_seq = t_seq;
  auto& B = d.bounds;
  B.a = grid.time.lo;
  B.b = grid.time.hi;
  require(B.b < t_seq.front(), ErrorCode::InvalidArgument, "window must end before the first base time");
  B.k = 0.5 * (B.b + t_seq.front());
  FieldOptions fo = opt.field;
  fo.velocity_cut = B.k;
  for (double ti : t_seq) d.fields.push_back(build_field(chart, ti, grid, fo));

  const std::size_t m = grid.size();
  for (std::size_t i = 0; i + 1 < d.fields.size(); ++i) {
    double sup = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double a = d.fields[i].l[j], b = d.fields[i + 1].l[j];
      if (std::isfinite(a) && std::isfinite(b)) sup = std::max(sup, std::abs(b - a));
    }
    d.deltas.push_back(sup);
  }
  d.cauchy = true;
  for (std::size_t i = d.deltas.size() >= 3 ? d.deltas.size() - 3 : 0; i + 1 < d.deltas.size(); ++i)
    if (d.deltas[i + 1] > d.deltas[i]) d.cauchy = false;
  if (opt.require_cauchy && !d.cauchy) fail(ErrorCode::NotCauchy, "sup-norm deltas grow in the tail of the sequence");

  for (const auto& f : d.fields) {
    double ls = 0.0, lt = 0.0;
    detail::lipschitz(f, ls, lt);
    d.lip_space.push_back(ls);
    d.lip_time.push_back(lt);
  }

  // Limit by extrapolation over the last base times.
  const std::size_t q = std::min<std::size_t>(static_cast<std::size_t>(std::max(opt.extrapolation_points, 1)), d.fields.size());
  ReducedDistanceField lim(chart, T, grid);
  lim.singular = true;
  const std::size_t first = d.fields.size() - q;
  std::vector<double> h, y;
  for (std::size_t i = first; i < d.fields.size(); ++i) h.push_back(std::sqrt(T - t_seq[i]));
  auto extrapolate = [&](const std::vector<double>& ys) {
    auto e = opt.method == LimitExtrapolation::Rational ? extrapolate_rational_to_zero(h, ys) : extrapolate_to_zero(h, ys);
    if (!std::isfinite(e.value)) e = extrapolate_to_zero(h, ys);
    return e;
  };
  for (std::size_t j = 0; j < m; ++j) {
    y.clear();
    bool amb = false;
    for (std::size_t i = first; i < d.fields.size(); ++i) {
      y.push_back(d.fields[i].l[j]);
      amb = amb || d.fields[i].ambiguous[j];
    }
    if (!std::all_of(y.begin(), y.end(), [](double v) { return std::isfinite(v); })) continue;
    const auto e = extrapolate(y);
    const int it = static_cast<int>(j / grid.space_size());
    const double tau = T - grid.time.node(it);
    lim.l[j] = e.value;
    lim.L[j] = 2.0 * std::sqrt(tau) * e.value;
    lim.v[j] = reduced_v(chart.n(), tau, e.value);
    lim.ambiguous[j] = amb ? 1 : 0;
    d.extrapolation_error = std::max(d.extrapolation_error, e.error);
  }
  lim.value_error = d.extrapolation_error;
  d.limit = std::move(lim);
  try {
    d.limit_inequalities = check_inequalities(*d.limit, opt.tol);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::GridTooCoarse) throw;
  }

  // Bounds.
  B.type_a = type_a_constants(chart.model());
  const double C = B.type_a.C, r = B.type_a.r;
  const double curv = C > 0.0 ? 2.0 * C / (3.0 - 2.0 * r) * std::pow(T, 1.5 - r) : 0.0;
  B.D = detail::comparison_speed_bound(chart, grid, B.k);
  B.E = B.D * std::sqrt(T) / (B.k - B.b) + curv;
  B.F = std::sqrt(T) / (B.k - B.b) * (B.E + curv);
  B.L_below_E = true;
  for (const auto& f : d.fields) {
    double mL = 0.0, mG = 0.0, mg = 0.0, mt = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (!f.resolved(j)) continue;
      mL = std::max(mL, std::abs(f.L[j]));
      mG = std::max(mG, f.velocity_max[j]);
      mt = std::max(mt, std::abs(f.dt_L[j]));
      const int it = static_cast<int>(j / grid.space_size());
      const RVec x = f.point(j % grid.space_size());
      mg = std::max(mg, std::sqrt(f.chart.grad_norm2(x, f.t_bar(it), f.grad_L[j])));
    }
    B.max_L.push_back(mL);
    B.G_observed.push_back(mG);
    B.max_grad_L.push_back(mg);
    B.max_dt_L.push_back(mt);
    if (mL > B.E) B.L_below_E = false;
  }
  const auto& Go = B.G_observed;
  B.G_growth = 0.0;
  for (std::size_t i = Go.size() >= 4 ? Go.size() - 4 : 0; i + 1 < Go.size(); ++i)
    if (Go[i] > 0.0) B.G_growth = std::max(B.G_growth, Go[i + 1] / Go[i] - 1.0);
  B.G_stable = B.G_growth <= opt.stability;
  B.G = (1.0 + opt.stability) * *std::max_element(Go.begin(), Go.end());
  B.grad_bound = 2.0 * std::sqrt(B.G);
  B.time_bound = B.G / std::sqrt(B.k - B.b) + (C > 0.0 ? C / std::pow(T - B.b, r - 0.5) : 0.0);
  B.grad_ok = *std::max_element(B.max_grad_L.begin(), B.max_grad_L.end()) <= B.grad_bound;
  B.time_ok = *std::max_element(B.max_dt_L.begin(), B.max_dt_L.end()) <= B.time_bound;
  return d;
}

/// Sup-norm distance between two limit fields on the same grid.
inline double limit_independence_check(const SingularLimitDiagnostics& A, const SingularLimitDiagnostics& B) {
  require(A.limit && B.limit, ErrorCode::MissingLimitField, "diagnostics carry no limit field");
  const auto& a = *A.limit;
  const auto& b = *B.limit;
  require(a.grid == b.grid && a.chart.model().family() == b.chart.model().family() && a.t0 == b.t0, ErrorCode::GridMismatch,
          "limits live on different grids or models");
  double sup = 0.0;
  for (std::size_t j = 0; j < a.l.size(); ++j)
    if (std::isfinite(a.l[j]) && std::isfinite(b.l[j])) sup = std::max(sup, std::abs(a.l[j] - b.l[j]));
  return sup;
}

}  // namespace rflab
