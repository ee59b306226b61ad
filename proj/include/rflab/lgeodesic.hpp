#pragma once

// L-length, L-geodesics and the two-point minimization problem.
//
// All computations use s = sqrt(t0 - t). With x' = dx/ds the L-length becomes
//   L = int_0^s_bar ( 1/2 sum_i a_i x_i'^2 + 2 s^2 R ) ds
// and the rescaled velocity is V = sqrt(t0 - t) dgamma/dt = -x'/2. The geodesic
// equations are integrated for (x, P = a x', L) from s = 0 where x = p and
// P = -2 a Z.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <boost/numeric/odeint.hpp>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "rflab/error.hpp"
#include "rflab/geometry.hpp"

namespace rflab {

/// Curve on [t_bar, t0] in a reduced chart. Velocities are stored rescaled,
/// V_k = sqrt(t0 - t_k) dgamma/dt, which stays finite at t0.
struct TimeCurve {
  double t0 = 0.0;
  std::vector<double> t;  ///< increasing, t.back() == t0
  std::vector<RVec> x;
  std::vector<RVec> V;

  std::size_t size() const { return t.size(); }
  double t_bar() const { return t.front(); }
  /// dgamma/dt at node k (infinite at t0 unless V vanishes there).
  RVec velocity(std::size_t k) const { return V[k] / std::sqrt(t0 - t[k]); }
};

struct LGeodesicSolution {
  TimeCurve curve;
  double t_bar = 0.0;
  double t0 = 0.0;
  double L = 0.0;
  double l = 0.0;              ///< L / (2 sqrt(t0 - t_bar))
  RVec Z;                      ///< lim V at t0
  RVec endpoint;               ///< x(t_bar) in the extended chart
  RVec grad_L;                 ///< covector d L / d q at t_bar
  double dt_L = 0.0;           ///< d L / d t_bar
  double geodesic_residual = 0.0;
  double velocity_bound = 0.0; ///< max_k |V_k|^2_{g(t_k)}
  bool ambiguous = false;
  std::vector<double> alternative_L;  ///< other critical values found, ascending
  int image = 0;
};

struct ShootingOptions {
  double abs_tol = 1e-12;
  double rel_tol = 1e-12;
  double hit_tol = 1e-10;
  int nodes = 257;
  int multistart = 16;
  int max_newton = 40;
  double ambiguity_tol = 1e-6;
  double curvature_guard = 1e8;
  /// When false, the predictor and warm starts are tried first and the
  /// multistart set is used only if they fail to converge.
  bool multistart_always = true;
  std::uint64_t seed = 0;
};

namespace detail {

namespace odeint = boost::numeric::odeint;
using OdeState = std::vector<double>;

class GeodesicRhs {
 public:
  GeodesicRhs(const ReducedChart& chart, double t0, double guard) : chart_(chart), t0_(t0), guard_(guard), k_(chart.dim()) {}

  void operator()(const OdeState& s, OdeState& ds, double sigma) const {
    const double t = t0_ - sigma * sigma;
    RVec x(k_), P(k_);
    for (int i = 0; i < k_; ++i) {
      x(i) = s[static_cast<std::size_t>(i)];
      P(i) = s[static_cast<std::size_t>(k_ + i)];
    }
    for (int i = 0; i < k_; ++i) {
      if (!std::isfinite(x(i)) || std::abs(x(i)) > 1e8) fail(ErrorCode::LeftChart, "trajectory left the chart");
    }
    const auto c = chart_.eval(x, t);
    if (!(std::abs(c.R) <= guard_)) fail(ErrorCode::BlowupOnPath, "curvature guard hit on path");
    double kinetic = 0.0;
    for (int j = 0; j < k_; ++j) {
      if (!(c.a(j) > 0.0)) fail(ErrorCode::BlowupOnPath, "degenerate metric on path");
      const double xd = P(j) / c.a(j);
      ds[static_cast<std::size_t>(j)] = xd;
      kinetic += P(j) * xd;
    }
    for (int i = 0; i < k_; ++i) {
      double f = 2.0 * sigma * sigma * c.dR(i);
      for (int j = 0; j < k_; ++j) {
        const double xd = P(j) / c.a(j);
        f += 0.5 * c.da(i, j) * xd * xd;
      }
      ds[static_cast<std::size_t>(k_ + i)] = f;
    }
    ds[static_cast<std::size_t>(2 * k_)] = 0.5 * kinetic + 2.0 * sigma * sigma * c.R;
  }

  int dim() const { return k_; }

 private:
  const ReducedChart& chart_;
  double t0_;
  double guard_;
  int k_;
};

inline OdeState initial_state(const ReducedChart& chart, double t0, const RVec& Z) {
  const int k = chart.dim();
  const RVec origin = RVec::Zero(k);
  const auto c = chart.eval(origin, t0);
  OdeState s(static_cast<std::size_t>(2 * k + 1), 0.0);
  for (int i = 0; i < k; ++i) s[static_cast<std::size_t>(k + i)] = -2.0 * c.a(i) * Z(i);
  return s;
}

inline OdeState shoot_endpoint(const ReducedChart& chart, double t0, const RVec& Z, double sigma_bar, const ShootingOptions& o) {
  GeodesicRhs rhs(chart, t0, o.curvature_guard);
  OdeState s = initial_state(chart, t0, Z);
  auto stepper = odeint::make_controlled(o.abs_tol, o.rel_tol, odeint::runge_kutta_dopri5<OdeState>());
  odeint::integrate_adaptive(stepper, rhs, s, 0.0, sigma_bar, sigma_bar / 64.0);
  return s;
}

struct Trajectory {
  std::vector<double> sigma;
  std::vector<OdeState> states;
};

inline Trajectory shoot_nodes(const ReducedChart& chart, double t0, const RVec& Z, double sigma_bar, const ShootingOptions& o) {
  GeodesicRhs rhs(chart, t0, o.curvature_guard);
  OdeState s = initial_state(chart, t0, Z);
  Trajectory tr;
  const int m = std::max(o.nodes, 5);
  std::vector<double> grid(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) grid[static_cast<std::size_t>(i)] = sigma_bar * i / (m - 1);
  grid.back() = sigma_bar;
  auto stepper = odeint::make_dense_output(o.abs_tol, o.rel_tol, odeint::runge_kutta_dopri5<OdeState>());
  odeint::integrate_times(stepper, rhs, s, grid.begin(), grid.end(), sigma_bar / (4.0 * m), [&](const OdeState& st, double sg) {
    tr.sigma.push_back(sg);
    tr.states.push_back(st);
  });
  return tr;
}

/// 5-point residual of the momentum equation on the uniform node set,
/// relative to the size of the forcing.
inline double momentum_residual(const ReducedChart& chart, double t0, const Trajectory& tr, double guard) {
  const int k = chart.dim();
  const std::size_t m = tr.sigma.size();
  if (m < 5) return 0.0;
  GeodesicRhs rhs(chart, t0, guard);
  const double h = tr.sigma[1] - tr.sigma[0];
  double worst = 0.0, scale = 0.0;
  std::vector<OdeState> f(m, OdeState(tr.states[0].size()));
  for (std::size_t j = 0; j < m; ++j) rhs(tr.states[j], f[j], tr.sigma[j]);
  for (std::size_t j = 0; j < m; ++j)
    for (int i = 0; i < k; ++i) scale = std::max(scale, std::abs(f[j][static_cast<std::size_t>(k + i)]));
  for (std::size_t j = 2; j + 2 < m; ++j) {
    for (int i = 0; i < k; ++i) {
      const auto c = static_cast<std::size_t>(k + i);
      const double d = (-tr.states[j + 2][c] + 8.0 * tr.states[j + 1][c] - 8.0 * tr.states[j - 1][c] + tr.states[j - 2][c]) / (12.0 * h);
      worst = std::max(worst, std::abs(d - f[j][c]));
    }
  }
  return worst / std::max(1.0, scale);
}

inline LGeodesicSolution assemble(const ReducedChart& chart, double t0, double t_bar, const RVec& Z, const Trajectory& tr, double guard) {
  const int k = chart.dim();
  LGeodesicSolution sol;
  sol.t0 = t0;
  sol.t_bar = t_bar;
  sol.Z = Z;
  sol.curve.t0 = t0;
  const std::size_t m = tr.sigma.size();
  for (std::size_t jj = m; jj-- > 0;) {
    const double sg = tr.sigma[jj];
    const auto& st = tr.states[jj];
    RVec x(k), P(k);
    for (int i = 0; i < k; ++i) {
      x(i) = st[static_cast<std::size_t>(i)];
      P(i) = st[static_cast<std::size_t>(k + i)];
    }
    const double t = jj + 1 == m ? t_bar : t0 - sg * sg;
    const auto c = chart.eval(x, jj == 0 ? t0 : t);
    RVec V(k);
    double v2 = 0.0;
    for (int i = 0; i < k; ++i) {
      V(i) = -0.5 * P(i) / c.a(i);
      v2 += c.a(i) * V(i) * V(i);
    }
    sol.velocity_bound = std::max(sol.velocity_bound, v2);
    sol.curve.t.push_back(jj == 0 ? t0 : t);
    sol.curve.x.push_back(x);
    sol.curve.V.push_back(V);
  }
  const auto& last = tr.states.back();
  const double sb = tr.sigma.back();
  sol.L = last[static_cast<std::size_t>(2 * k)];
  sol.l = sol.L / (2.0 * sb);
  sol.endpoint = sol.curve.x.front();
  RVec P(k);
  for (int i = 0; i < k; ++i) P(i) = last[static_cast<std::size_t>(k + i)];
  sol.grad_L = P;
  const auto c = chart.eval(sol.endpoint, t_bar);
  double v2 = 0.0;
  for (int i = 0; i < k; ++i) v2 += 0.25 * P(i) * P(i) / c.a(i);
  sol.dt_L = v2 / sb - sb * c.R;
  sol.geodesic_residual = momentum_residual(chart, t0, tr, guard);
  return sol;
}

inline void check_interval(const ReducedChart& chart, double t_bar, double t0) {
  const auto& m = chart.model();
  require(t_bar < t0, ErrorCode::InvalidArgument, "need t_bar < t0");
  if (m.family() != Family::GaussianFlat && t0 >= m.singular_time()) fail(ErrorCode::PastSingularTime, "base time at or past T");
  m.check_time(t_bar);
  m.check_time(t0);
}

}  // namespace detail

/// L-geodesic from (p, t0) with terminal rescaled velocity Z, down to t_bar.
inline LGeodesicSolution integrate_l_geodesic(const ReducedChart& chart, double t0, const RVec& Z, double t_bar,
                                              const ShootingOptions& o = {}) {
  require(Z.size() == chart.dim() && Z.allFinite(), ErrorCode::InvalidArgument, "Z must be finite with the chart dimension");
  detail::check_interval(chart, t_bar, t0);
  const double sb = std::sqrt(t0 - t_bar);
  const auto tr = detail::shoot_nodes(chart, t0, Z, sb, o);
  return detail::assemble(chart, t0, t_bar, Z, tr, o.curvature_guard);
}

namespace detail {

struct ShotResult {
  bool ok = false;
  RVec Z;
  double L = 0.0;
};

inline ShotResult newton_shoot(const ReducedChart& chart, double t0, double sb, const RVec& target, RVec Z, const ShootingOptions& o) {
  const int k = chart.dim();
  auto endpoint = [&](const RVec& z, double* L) {
    const auto s = shoot_endpoint(chart, t0, z, sb, o);
    RVec x(k);
    for (int i = 0; i < k; ++i) x(i) = s[static_cast<std::size_t>(i)];
    if (L) *L = s[static_cast<std::size_t>(2 * k)];
    return x;
  };
  ShotResult out;
  try {
    double L = 0.0;
    RVec F = endpoint(Z, &L) - target;
    for (int it = 0; it < o.max_newton; ++it) {
      if (F.cwiseAbs().maxCoeff() <= o.hit_tol) {
        out.ok = true;
        out.Z = Z;
        out.L = L;
        return out;
      }
      RMat J(k, k);
      for (int j = 0; j < k; ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(Z(j)));
        RVec zp = Z, zm = Z;
        zp(j) += h;
        zm(j) -= h;
        J.col(j) = (endpoint(zp, nullptr) - endpoint(zm, nullptr)) / (2.0 * h);
      }
      const RVec step = J.colPivHouseholderQr().solve(-F);
      if (!step.allFinite()) return out;
      double lambda = 1.0;
      bool improved = false;
      for (int ls = 0; ls < 30; ++ls) {
        const RVec trial = Z + lambda * step;
        double Lt = 0.0;
        RVec Ft;
        try {
          Ft = endpoint(trial, &Lt) - target;
        } catch (const Error& e) {
          if (e.code() != ErrorCode::LeftChart && e.code() != ErrorCode::BlowupOnPath) throw;
          lambda *= 0.5;
          continue;
        }
        if (Ft.norm() < F.norm() || Ft.cwiseAbs().maxCoeff() <= o.hit_tol) {
          Z = trial;
          F = Ft;
          L = Lt;
          improved = true;
          break;
        }
        lambda *= 0.5;
      }
      if (!improved) return out;
    }
    if (F.cwiseAbs().maxCoeff() <= o.hit_tol) {
      out.ok = true;
      out.Z = Z;
      out.L = L;
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::LeftChart && e.code() != ErrorCode::BlowupOnPath) throw;
  }
  return out;
}

/// Starting values: flat predictor for each image plus log-spaced magnitudes
/// along the predictor direction (and its reverse for k = 1).
inline std::vector<RVec> multistart_set(const RVec& predictor, double g_est, int count, std::mt19937_64& rng) {
  std::vector<RVec> out;
  const int k = static_cast<int>(predictor.size());
  const double norm = predictor.norm();
  RVec dir = norm > 0.0 ? RVec(predictor / norm) : RVec(RVec::Unit(k, 0));
  const double hi = std::max(2.0 * std::sqrt(std::max(g_est, 1e-12)), 2e-3);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  for (int i = 0; i < count; ++i) {
    const double frac = count > 1 ? static_cast<double>(i) / (count - 1) : 0.0;
    const double mag = std::exp(std::log(1e-3) + frac * (std::log(hi) - std::log(1e-3)) + jitter(rng));
    out.push_back(dir * mag);
    if (k == 1) out.push_back(-dir * mag);
  }
  return out;
}

}  // namespace detail

/// Minimal L-geodesic from (p, t0) to the canonical reduced point q at t_bar.
/// `warm` supplies extra starting values for Z (e.g. from a neighbouring node).
inline LGeodesicSolution solve_min_l_geodesic(const ReducedChart& chart, const RVec& q, double t_bar, double t0, const ShootingOptions& o = {},
                                              const std::vector<RVec>& warm = {}) {
  require(q.size() == chart.dim(), ErrorCode::InvalidArgument, "target has wrong dimension");
  require(chart.in_domain(q), ErrorCode::OutOfChart, "target outside reduced chart");
  detail::check_interval(chart, t_bar, t0);
  const double sb = std::sqrt(t0 - t_bar);
  const int k = chart.dim();
  std::mt19937_64 rng(o.seed);

  struct Candidate {
    RVec Z;
    double L;
    int image;
  };
  std::vector<Candidate> found;
  auto add = [&](const detail::ShotResult& r, int image) {
    for (const auto& c : found) {
      if (c.image == image && (c.Z - r.Z).norm() <= 1e-6 * (1.0 + r.Z.norm())) return;
    }
    found.push_back({r.Z, r.L, image});
  };

  const auto images = chart.images(q);
  const RVec origin = RVec::Zero(k);
  const auto a0 = chart.eval(origin, t0).a;
  auto predictor_for = [&](const RVec& target) {
    // Flat-space solution x = -2 s Z with the metric frozen at (p, t0).
    return RVec(-target / (2.0 * sb));
  };

  auto run_starts = [&](const std::vector<RVec>& starts, int image, const RVec& target) {
    for (const auto& z0 : starts) {
      const auto r = detail::newton_shoot(chart, t0, sb, target, z0, o);
      if (r.ok) add(r, image);
    }
  };

  for (int im = 0; im < static_cast<int>(images.size()); ++im) {
    const RVec& target = images[static_cast<std::size_t>(im)];
    std::vector<RVec> primary{predictor_for(target)};
    for (const auto& w : warm) {
      if (w.size() == k) primary.push_back(w);
    }
    const std::size_t before = found.size();
    run_starts(primary, im, target);
    const bool resolved = found.size() > before;
    if (o.multistart_always || !resolved) {
      const RVec pred = predictor_for(target);
      double g_est = 0.0;
      for (int i = 0; i < k; ++i) g_est += a0(i) * pred(i) * pred(i);
      run_starts(detail::multistart_set(pred, 4.0 * g_est, o.multistart, rng), im, target);
    }
  }
  if (found.empty()) fail(ErrorCode::NoConvergence, "no shot reached the target");

  std::sort(found.begin(), found.end(), [](const Candidate& a, const Candidate& b) { return a.L < b.L; });
  const Candidate& best = found.front();
  const auto tr = detail::shoot_nodes(chart, t0, best.Z, sb, o);
  LGeodesicSolution sol = detail::assemble(chart, t0, t_bar, best.Z, tr, o.curvature_guard);
  sol.image = best.image;
  for (std::size_t i = 1; i < found.size(); ++i) {
    sol.alternative_L.push_back(found[i].L);
    const bool distinct = found[i].image != best.image || (found[i].Z - best.Z).norm() > 1e-6 * (1.0 + best.Z.norm());
    if (distinct && found[i].L - best.L <= o.ambiguity_tol * std::max(1.0, std::abs(best.L))) sol.ambiguous = true;
  }
  return sol;
}

inline RVec grad_L(const LGeodesicSolution& s) { return s.grad_L; }
inline double dt_L(const LGeodesicSolution& s) { return s.dt_L; }

namespace detail {

// Gauss-Legendre nodes and weights on [-1, 1].
inline constexpr std::array<double, 4> kGaussX{-0.8611363115940526, -0.3399810435848563, 0.3399810435848563, 0.8611363115940526};
inline constexpr std::array<double, 4> kGaussW{0.3478548451374538, 0.6521451548625461, 0.6521451548625461, 0.3478548451374538};

inline void check_curve(const ReducedChart& chart, const TimeCurve& c, double t0) {
  require(c.size() >= 2 && c.x.size() == c.size() && c.V.size() == c.size(), ErrorCode::ShapeMismatch, "curve arrays differ in length");
  require(std::abs(c.t.back() - t0) <= 1e-12 * std::max(1.0, std::abs(t0)), ErrorCode::InvalidArgument, "curve must end at t0");
  const auto& m = chart.model();
  if (m.family() != Family::GaussianFlat && t0 > m.singular_time()) fail(ErrorCode::PastSingularTime, "t0 past T");
  for (std::size_t i = 0; i + 1 < c.size(); ++i) require(c.t[i] < c.t[i + 1], ErrorCode::InvalidArgument, "curve times must increase");
  for (const auto& x : c.x) require(x.size() == chart.dim() && x.allFinite(), ErrorCode::OutOfChart, "curve node outside chart");
}

/// Cubic Hermite in s on one interval [s_b, s_a] with slopes dx/ds = -2V.
struct HermiteSegment {
  double sa, sb;
  RVec xa, xb, da, db;

  void eval(double s, RVec& x, RVec& dx) const {
    const double h = sa - sb;
    const double r = (s - sb) / h;
    const double h00 = 2 * r * r * r - 3 * r * r + 1, h10 = r * r * r - 2 * r * r + r, h01 = -2 * r * r * r + 3 * r * r, h11 = r * r * r - r * r;
    const double g00 = (6 * r * r - 6 * r) / h, g10 = 3 * r * r - 4 * r + 1, g01 = (-6 * r * r + 6 * r) / h, g11 = 3 * r * r - 2 * r;
    x = h00 * xb + h10 * h * db + h01 * xa + h11 * h * da;
    dx = g00 * xb + g10 * db + g01 * xa + g11 * da;
  }
};

inline HermiteSegment segment(const TimeCurve& c, std::size_t i, double t0) {
  // Node i is earlier (larger s) than node i + 1.
  return {std::sqrt(t0 - c.t[i]), std::sqrt(t0 - c.t[i + 1]), c.x[i], c.x[i + 1], -2.0 * c.V[i], -2.0 * c.V[i + 1]};
}

}  // namespace detail

/// L(gamma) by Gauss-Legendre quadrature in s over the Hermite interpolant.
inline double l_length(const ReducedChart& chart, const TimeCurve& curve, double t0) {
  detail::check_curve(chart, curve, t0);
  double total = 0.0;
  const int k = chart.dim();
  RVec x(k), dx(k);
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const auto seg = detail::segment(curve, i, t0);
    const double mid = 0.5 * (seg.sa + seg.sb), half = 0.5 * (seg.sa - seg.sb);
    for (std::size_t g = 0; g < detail::kGaussX.size(); ++g) {
      const double s = mid + half * detail::kGaussX[g];
      seg.eval(s, x, dx);
      const auto c = chart.eval(x, t0 - s * s);
      double kin = 0.0;
      for (int j = 0; j < k; ++j) kin += c.a(j) * dx(j) * dx(j);
      total += half * detail::kGaussW[g] * (0.5 * kin + 2.0 * s * s * c.R);
    }
  }
  return total;
}

/// First variation of L along Y (given at the curve nodes, linear in s between
/// them), including the boundary terms.
inline double first_variation(const ReducedChart& chart, const TimeCurve& curve, const std::vector<RVec>& Y, double t0) {
  detail::check_curve(chart, curve, t0);
  require(Y.size() == curve.size(), ErrorCode::ShapeMismatch, "variation field has " + std::to_string(Y.size()) + " nodes, curve has " + std::to_string(curve.size()));
  const int k = chart.dim();
  for (const auto& y : Y) require(y.size() == k, ErrorCode::ShapeMismatch, "variation field has wrong dimension");
  double total = 0.0;
  RVec x(k), dx(k);
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const auto seg = detail::segment(curve, i, t0);
    const double h = seg.sa - seg.sb;
    const RVec dY = (Y[i] - Y[i + 1]) / h;
    const double mid = 0.5 * (seg.sa + seg.sb), half = 0.5 * h;
    for (std::size_t g = 0; g < detail::kGaussX.size(); ++g) {
      const double s = mid + half * detail::kGaussX[g];
      seg.eval(s, x, dx);
      const double r = (s - seg.sb) / h;
      const RVec y = (1 - r) * Y[i + 1] + r * Y[i];
      const auto c = chart.eval(x, t0 - s * s);
      double v = 0.0;
      for (int j = 0; j < k; ++j) {
        double dl = 2.0 * s * s * c.dR(j);
        for (int m = 0; m < k; ++m) dl += 0.5 * c.da(j, m) * dx(m) * dx(m);
        v += dl * y(j) + c.a(j) * dx(j) * dY(j);
      }
      total += half * detail::kGaussW[g] * v;
    }
  }
  return total;
}

/// Sup over nodes of the g(t_k)-norm of Y.
inline double field_norm(const ReducedChart& chart, const TimeCurve& curve, const std::vector<RVec>& Y) {
  double m = 0.0;
  for (std::size_t i = 0; i < Y.size(); ++i) {
    const double t = std::min(curve.t[i], std::nextafter(curve.t0, -std::numeric_limits<double>::infinity()));
    const auto c = chart.eval(curve.x[i], t);
    double s = 0.0;
    for (int j = 0; j < Y[i].size(); ++j) s += c.a(j) * Y[i](j) * Y[i](j);
    m = std::max(m, std::sqrt(s));
  }
  return m;
}

/// Checks that random perturbations leaving the symmetry-reduced space do not
/// lower L. For polar charts the radial curve is embedded in a 2-plane through
/// the pole with metric a dx^2 + b(x) dtheta^2 and perturbed in (x, theta).
struct SecondVariationReport {
  bool nonnegative = true;
  double min_increase = std::numeric_limits<double>::infinity();
  int samples = 0;
};

inline SecondVariationReport second_variation_check(const ReducedChart& chart, const LGeodesicSolution& sol, int samples = 10,
                                                    std::uint64_t seed = 7, double eps = 1e-3) {
  SecondVariationReport rep;
  const auto fam = chart.model().family();
  if (chart.dim() != 1 || (fam != Family::EinsteinSphere && fam != Family::NumericWarped)) return rep;
  const int n = chart.n();
  const auto& c = sol.curve;
  const double t0 = sol.t0;
  // Angular factor b(x, t) = squared radius of the orbit sphere.
  auto orbit2 = [&](double x, double t) {
    RVec xv(1);
    xv(0) = x;
    const double dens = chart.volume_density(chart.canonical(xv), t);
    return std::pow(dens / (sphere_area(n - 1) * std::sqrt(chart.eval(xv, t).a(0))), 2.0 / (n - 1));
  };
  auto length = [&](const std::vector<double>& px, const std::vector<double>& th, const std::vector<double>& dpx, const std::vector<double>& dth) {
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < c.size(); ++i) {
      const double sa = std::sqrt(t0 - c.t[i]), sb = std::sqrt(t0 - c.t[i + 1]);
      const double h = sa - sb;
      for (std::size_t g = 0; g < detail::kGaussX.size(); ++g) {
        const double s = 0.5 * (sa + sb) + 0.5 * h * detail::kGaussX[g];
        const double r = (s - sb) / h;
        const double h00 = 2 * r * r * r - 3 * r * r + 1, h10 = r * r * r - 2 * r * r + r, h01 = -2 * r * r * r + 3 * r * r, h11 = r * r * r - r * r;
        const double g00 = (6 * r * r - 6 * r) / h, g10 = 3 * r * r - 4 * r + 1, g01 = (-6 * r * r + 6 * r) / h, g11 = 3 * r * r - 2 * r;
        const double x = h00 * px[i + 1] + h10 * h * dpx[i + 1] + h01 * px[i] + h11 * h * dpx[i];
        const double dx = g00 * px[i + 1] + g10 * dpx[i + 1] + g01 * px[i] + g11 * dpx[i];
        const double y = h00 * th[i + 1] + h10 * h * dth[i + 1] + h01 * th[i] + h11 * h * dth[i];
        const double dy = g00 * th[i + 1] + g10 * dth[i + 1] + g01 * th[i] + g11 * dth[i];
        // Polar (x, theta) to Cartesian-like (X, Y) then back keeps the pole regular.
        const double rad = std::hypot(x, y);
        const double drad = rad > 0 ? (x * dx + y * dy) / rad : std::hypot(dx, dy);
        const double ang2 = rad > 0 ? std::pow((x * dy - y * dx) / (rad * rad), 2.0) : 0.0;
        const double t = t0 - s * s;
        RVec xv(1);
        xv(0) = rad;
        const auto cs = chart.eval(xv, t);
        const double b = rad > 0 ? orbit2(rad, t) : 0.0;
        total += 0.5 * h * detail::kGaussW[g] * (0.5 * (cs.a(0) * drad * drad + b * ang2) + 2.0 * s * s * cs.R);
      }
    }
    return total;
  };
  std::vector<double> px(c.size()), dpx(c.size()), zero(c.size(), 0.0);
  for (std::size_t i = 0; i < c.size(); ++i) {
    px[i] = c.x[i](0);
    dpx[i] = -2.0 * c.V[i](0);
  }
  const double base = length(px, zero, dpx, zero);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const double sbar = std::sqrt(t0 - c.t.front());
  for (int k = 0; k < samples; ++k) {
    const double ax = nd(rng), ay = nd(rng);
    const int mode = 1 + k % 3;
    std::vector<double> qx(c.size()), qy(c.size()), dqx(c.size()), dqy(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double s = std::sqrt(t0 - c.t[i]);
      const double bump = std::sin(mode * std::numbers::pi * s / sbar);
      const double dbump = mode * std::numbers::pi / sbar * std::cos(mode * std::numbers::pi * s / sbar);
      qx[i] = px[i] + eps * ax * bump;
      dqx[i] = dpx[i] + eps * ax * dbump;
      // Angular displacement as a Cartesian offset in the (X, Y) plane.
      qy[i] = eps * ay * bump;
      dqy[i] = eps * ay * dbump;
    }
    const double inc = length(qx, qy, dqx, dqy) - base;
    rep.min_increase = std::min(rep.min_increase, inc);
    ++rep.samples;
  }
  rep.nonnegative = rep.min_increase >= -1e-9 * std::max(1.0, std::abs(base));
  return rep;
}

}  // namespace rflab
