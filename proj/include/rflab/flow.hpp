#pragma once

// Ricci flow of rotationally symmetric metrics g = psi(x)^2 dx^2 + phi(x)^2 g_{S^{n-1}}
// on x in [0, 1], by the method of lines.
//
// The evolved variables are u = log psi and w = log(phi / S(x)), where S is the
// closure profile (sin(pi x)/pi for sphere topology, 1 for a periodic cylinder).
// Both are even about the poles, so pole nodes are updated by their smooth limits
// and the closure phi_s = +-1 is carried by w = u at the poles.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rflab/error.hpp"
#include "rflab/format.hpp"

namespace rflab {

enum class Topology { Sphere, Cylinder };

inline std::string to_string(Topology t) { return t == Topology::Sphere ? "sphere" : "cylinder"; }

inline Topology topology_from_string(const std::string& s) {
  if (s == "sphere") return Topology::Sphere;
  if (s == "cylinder") return Topology::Cylinder;
  fail(ErrorCode::InvalidArgument, "unknown topology '" + s + "'");
}

struct WarpedFlowState {
  double t = 0.0;
  int n = 3;
  Topology topology = Topology::Sphere;
  std::vector<double> x;    ///< sphere: N+1 nodes incl. poles; cylinder: N periodic nodes
  std::vector<double> psi;  ///< radial metric factor
  std::vector<double> phi;  ///< sphere-radius factor
  std::vector<double> w;    ///< log(phi / S), authoritative at the poles
  /// Gauge positions of the nodes of the underlying Ricci-flow coordinate:
  /// anchor[j] is where the point with Ricci-flow coordinate x[j] currently sits.
  std::vector<double> anchor;

  std::size_t size() const { return x.size(); }
  double dx() const {
    if (x.size() < 2) return 0.0;
    return topology == Topology::Sphere ? 1.0 / static_cast<double>(x.size() - 1) : 1.0 / static_cast<double>(x.size());
  }
};

/// Sectional curvatures and derived quantities at every node.
struct WarpedCurvature {
  std::vector<double> k_rad;  ///< curvature of planes containing d/ds
  std::vector<double> k_sph;  ///< curvature of planes tangent to the sphere factor
  std::vector<double> scalar;
  double max_rm = 0.0;        ///< max over nodes of the largest |sectional curvature|
};

namespace detail {

struct Profile {
  double s, ds, cot;  // S, S', S'/S
};

inline Profile closure_profile(Topology topo, double x) {
  if (topo == Topology::Cylinder) return {1.0, 0.0, 0.0};
  const double pi = std::numbers::pi;
  const double m = std::min(x, 1.0 - x);
  const double s = std::sin(pi * m) / pi;
  const double ds = std::cos(pi * x);
  return {s, ds, s > 0.0 ? ds / s : 0.0};
}

inline double closure_ss_over_s(Topology topo) { return topo == Topology::Sphere ? -std::numbers::pi * std::numbers::pi : 0.0; }

/// Value at index j with even reflection at sphere poles or periodic wrap.
inline double ghost(const std::vector<double>& f, int j, Topology topo) {
  const int n = static_cast<int>(f.size());
  if (topo == Topology::Cylinder) return f[static_cast<std::size_t>(((j % n) + n) % n)];
  if (j < 0) j = -j;
  if (j > n - 1) j = 2 * (n - 1) - j;
  return f[static_cast<std::size_t>(j)];
}

/// Odd counterpart of ghost(): reflection changes sign (sphere poles only).
inline double ghost_odd(const std::vector<double>& f, int j, Topology topo) {
  const int n = static_cast<int>(f.size());
  if (topo == Topology::Cylinder) return f[static_cast<std::size_t>(((j % n) + n) % n)];
  if (j < 0) return -f[static_cast<std::size_t>(-j)];
  if (j > n - 1) return -f[static_cast<std::size_t>(2 * (n - 1) - j)];
  return f[static_cast<std::size_t>(j)];
}

/// Cubic Lagrange interpolation of nodal data at x in [0, 1].
inline double sample(const std::vector<double>& f, Topology topo, double h, double x, bool odd = false) {
  const int n = static_cast<int>(f.size());
  const int last = topo == Topology::Sphere ? n - 2 : n - 1;
  const int i = std::clamp(static_cast<int>(std::floor(x / h)), 0, std::max(last, 0));
  const double r = x / h - i;
  auto at = [&](int k) { return odd ? ghost_odd(f, k, topo) : ghost(f, k, topo); };
  const double fm = at(i - 1), f0 = at(i), f1 = at(i + 1), f2 = at(i + 2);
  return -r * (r - 1.0) * (r - 2.0) / 6.0 * fm + (r + 1.0) * (r - 1.0) * (r - 2.0) / 2.0 * f0 -
         (r + 1.0) * r * (r - 2.0) / 2.0 * f1 + (r + 1.0) * r * (r - 1.0) / 6.0 * f2;
}

struct Derivs {
  std::vector<double> d1, d2;
};

inline Derivs central_derivs(const std::vector<double>& f, Topology topo, double h) {
  const int n = static_cast<int>(f.size());
  Derivs d{std::vector<double>(f.size()), std::vector<double>(f.size())};
  for (int j = 0; j < n; ++j) {
    const double fm = ghost(f, j - 1, topo), f0 = f[static_cast<std::size_t>(j)], fp = ghost(f, j + 1, topo);
    d.d1[static_cast<std::size_t>(j)] = (fp - fm) / (2.0 * h);
    d.d2[static_cast<std::size_t>(j)] = (fp - 2.0 * f0 + fm) / (h * h);
  }
  return d;
}

}  // namespace detail

/// Fourth-order centered derivative with even/periodic ghosts.
inline std::vector<double> derivative4(const std::vector<double>& f, Topology topo, double h) {
  std::vector<double> out(f.size());
  const int n = static_cast<int>(f.size());
  for (int j = 0; j < n; ++j) {
    using detail::ghost;
    out[static_cast<std::size_t>(j)] =
        (-ghost(f, j + 2, topo) + 8.0 * ghost(f, j + 1, topo) - 8.0 * ghost(f, j - 1, topo) + ghost(f, j - 2, topo)) / (12.0 * h);
  }
  // Even functions have zero derivative at the poles; the stencil above gives it
  // exactly, and odd reflections do not arise here.
  return out;
}

/// With `upwind`, the advective derivative of log psi in K_rad is taken
/// second-order upwind along the direction of transport in the psi equation;
/// log psi carries no diffusion of its own, so centered differences there are
/// unstable under explicit stepping.
inline WarpedCurvature warped_curvature(const WarpedFlowState& s, bool upwind = false) {
  const std::size_t m = s.size();
  WarpedCurvature c;
  c.k_rad.resize(m);
  c.k_sph.resize(m);
  c.scalar.resize(m);
  const double h = s.dx();
  std::vector<double> u(m);
  for (std::size_t j = 0; j < m; ++j) u[j] = std::log(s.psi[j]);
  const auto dw = detail::central_derivs(s.w, s.topology, h);
  const auto du = detail::central_derivs(u, s.topology, h);
  const double sss = detail::closure_ss_over_s(s.topology);
  const int n = s.n;
  for (std::size_t j = 0; j < m; ++j) {
    const double psi2 = s.psi[j] * s.psi[j];
    const bool pole = s.topology == Topology::Sphere && (j == 0 || j + 1 == m);
    if (pole) {
      const double kr = -(sss + 3.0 * dw.d2[j] - du.d2[j]) / psi2;
      c.k_rad[j] = kr;
      c.k_sph[j] = kr;
    } else {
      const auto p = detail::closure_profile(s.topology, s.x[j]);
      const double wx = dw.d1[j];
      double ux = du.d1[j];
      if (upwind) {
        const int jj = static_cast<int>(j);
        const double speed = p.cot + wx;
        using detail::ghost;
        ux = speed > 0.0 ? (3.0 * u[j] - 4.0 * ghost(u, jj - 1, s.topology) + ghost(u, jj - 2, s.topology)) / (2.0 * h)
                         : (-3.0 * u[j] + 4.0 * ghost(u, jj + 1, s.topology) - ghost(u, jj + 2, s.topology)) / (2.0 * h);
      }
      const double phi_ss_over_phi = (sss + 2.0 * p.cot * wx + dw.d2[j] + wx * wx - (p.cot + wx) * ux) / psi2;
      c.k_rad[j] = -phi_ss_over_phi;
      const double ratio = std::exp(s.w[j] - u[j]);
      const double phi_s = ratio * (p.ds + p.s * wx);
      const double phi = p.s * std::exp(s.w[j]);
      c.k_sph[j] = (1.0 - phi_s * phi_s) / (phi * phi);
    }
    c.scalar[j] = 2.0 * (n - 1) * c.k_rad[j] + (n - 1) * (n - 2) * c.k_sph[j];
    c.max_rm = std::max({c.max_rm, std::abs(c.k_rad[j]), std::abs(c.k_sph[j])});
  }
  return c;
}

/// Builds a state from tabulated psi and phi; w is recovered from phi / S and,
/// at the poles, from the closure condition phi_s = 1.
inline WarpedFlowState make_state(int n, Topology topo, std::vector<double> psi, std::vector<double> phi, double t = 0.0) {
  require(n >= 2, ErrorCode::InvalidArgument, "dimension must be at least 2");
  require(psi.size() == phi.size() && psi.size() >= 5, ErrorCode::InvalidArgument, "profile needs at least 5 matching nodes");
  WarpedFlowState s;
  s.t = t;
  s.n = n;
  s.topology = topo;
  const std::size_t m = psi.size();
  s.x.resize(m);
  s.w.resize(m);
  const double h = topo == Topology::Sphere ? 1.0 / static_cast<double>(m - 1) : 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < m; ++j) s.x[j] = (topo == Topology::Sphere && j + 1 == m) ? 1.0 : static_cast<double>(j) * h;
  for (std::size_t j = 0; j < m; ++j) {
    require(psi[j] > 0.0, ErrorCode::InvalidArgument, "psi must be positive");
    const bool pole = topo == Topology::Sphere && (j == 0 || j + 1 == m);
    if (pole) {
      s.w[j] = std::log(psi[j]);
    } else {
      require(phi[j] > 0.0, ErrorCode::InvalidArgument, "phi must be positive away from poles");
      s.w[j] = std::log(phi[j] / detail::closure_profile(topo, s.x[j]).s);
    }
  }
  s.psi = std::move(psi);
  s.phi = std::move(phi);
  s.anchor = s.x;
  if (topo == Topology::Sphere) {
    s.phi.front() = 0.0;
    s.phi.back() = 0.0;
  }
  return s;
}

/// Round sphere of radius 1/pi scaled by `radius_scale`.
inline WarpedFlowState round_sphere_profile(int n, int intervals, double radius_scale = 1.0) {
  std::vector<double> psi(static_cast<std::size_t>(intervals + 1), radius_scale), phi(psi.size());
  for (std::size_t j = 0; j < phi.size(); ++j) {
    const double x = static_cast<double>(j) / intervals;
    phi[j] = radius_scale * detail::closure_profile(Topology::Sphere, x).s;
  }
  return make_state(n, Topology::Sphere, std::move(psi), std::move(phi));
}

/// Dumbbell: phi = S(x) (1 - a sin^2(pi x)) with psi = 1; the neck at x = 1/2 has
/// radius (1 - a)/pi.
inline WarpedFlowState dumbbell_profile(int n, int intervals, double pinch) {
  require(pinch > 0.0 && pinch < 1.0, ErrorCode::InvalidArgument, "pinch must lie in (0,1)");
  std::vector<double> psi(static_cast<std::size_t>(intervals + 1), 1.0), phi(psi.size());
  for (std::size_t j = 0; j < phi.size(); ++j) {
    const double x = static_cast<double>(j) / intervals;
    const double sn = std::sin(std::numbers::pi * std::min(x, 1.0 - x));
    phi[j] = detail::closure_profile(Topology::Sphere, x).s * (1.0 - pinch * sn * sn);
  }
  auto s = make_state(n, Topology::Sphere, std::move(psi), std::move(phi));
  return s;
}

inline WarpedFlowState cylinder_profile(int n, int nodes, double radius, double length = 1.0) {
  std::vector<double> psi(static_cast<std::size_t>(nodes), length), phi(static_cast<std::size_t>(nodes), radius);
  return make_state(n, Topology::Cylinder, std::move(psi), std::move(phi));
}

struct FlowLimits {
  double cfl = 0.1;             ///< dt <= cfl * min(dx^2 min psi^2, 1/max|Rm|)
  double max_curvature = 1e8;   ///< overflow guard; reaching it ends the run
  double pole_tolerance = 1e-3;
  double gauge = 1.0;           ///< strength of the diffusive reparametrization field
};

inline double cfl_bound(const WarpedFlowState& s, const WarpedCurvature& c, const FlowLimits& lim) {
  const double min_psi = *std::min_element(s.psi.begin(), s.psi.end());
  const double h = s.dx();
  double bound = h * h * min_psi * min_psi;
  if (c.max_rm > 0.0) bound = std::min(bound, 1.0 / c.max_rm);
  return lim.cfl * bound;
}

namespace detail {

struct Rates {
  std::vector<double> dw, du;
};

inline Rates flow_rates(const WarpedFlowState& s, double gauge) {
  const auto c = warped_curvature(s, true);
  Rates r{std::vector<double>(s.size()), std::vector<double>(s.size())};
  std::vector<double> u(s.size());
  for (std::size_t j = 0; j < s.size(); ++j) u[j] = std::log(s.psi[j]);
  const double h = s.dx();
  const auto du = central_derivs(u, s.topology, h);
  const auto dw = central_derivs(s.w, s.topology, h);
  for (std::size_t j = 0; j < s.size(); ++j) {
    r.dw[j] = -c.k_rad[j] - (s.n - 2) * c.k_sph[j];
    r.du[j] = -(s.n - 1) * c.k_rad[j];
    if (gauge > 0.0) {
      // Lie derivative along xi = gauge * u_x / psi^2 d/dx (zero at the poles).
      const double psi2 = s.psi[j] * s.psi[j];
      const bool pole = s.topology == Topology::Sphere && (j == 0 || j + 1 == s.size());
      r.du[j] += gauge * (du.d2[j] - du.d1[j] * du.d1[j]) / psi2;
      if (pole) {
        r.dw[j] += gauge * du.d2[j] / psi2;
      } else {
        const auto p = closure_profile(s.topology, s.x[j]);
        r.dw[j] += gauge * du.d1[j] * (p.cot + dw.d1[j]) / psi2;
      }
    }
  }
  return r;
}

/// Nodal values of the reparametrization field xi = gauge * u_x / psi^2.
inline std::vector<double> gauge_field(const WarpedFlowState& s, double gauge) {
  std::vector<double> u(s.size()), xi(s.size());
  for (std::size_t j = 0; j < s.size(); ++j) u[j] = std::log(s.psi[j]);
  const auto du = central_derivs(u, s.topology, s.dx());
  for (std::size_t j = 0; j < s.size(); ++j) xi[j] = gauge * du.d1[j] / (s.psi[j] * s.psi[j]);
  return xi;
}

/// Points fixed in the Ricci-flow coordinate drift by -xi in the gauge coordinate.
inline std::vector<double> anchor_rates(const WarpedFlowState& s, const std::vector<double>& anchors, double gauge) {
  std::vector<double> out(anchors.size(), 0.0);
  if (gauge <= 0.0) return out;
  const auto xi = gauge_field(s, gauge);
  for (std::size_t j = 0; j < anchors.size(); ++j) {
    double a = anchors[j];
    if (s.topology == Topology::Cylinder) a -= std::floor(a);
    out[j] = -sample(xi, s.topology, s.dx(), a, true);
  }
  return out;
}

inline void refresh_profiles(WarpedFlowState& s) {
  for (std::size_t j = 0; j < s.size(); ++j) {
    const bool pole = s.topology == Topology::Sphere && (j == 0 || j + 1 == s.size());
    s.phi[j] = pole ? 0.0 : closure_profile(s.topology, s.x[j]).s * std::exp(s.w[j]);
  }
}

}  // namespace detail

/// One Heun (explicit trapezoid) step of the warped-product Ricci flow.
inline WarpedFlowState step_flow(const WarpedFlowState& state, double dt, const FlowLimits& lim = {}) {
  require(dt >= 0.0, ErrorCode::InvalidArgument, "dt must be nonnegative");
  if (dt == 0.0) return state;
  const auto c0 = warped_curvature(state);
  const double bound = cfl_bound(state, c0, lim);
  if (dt > bound * (1.0 + 1e-12)) {
    fail(ErrorCode::CflViolation, "dt=" + std::to_string(dt) + " exceeds bound " + std::to_string(bound));
  }
  const auto r0 = detail::flow_rates(state, lim.gauge);
  const auto a0 = detail::anchor_rates(state, state.anchor, lim.gauge);
  WarpedFlowState mid = state;
  for (std::size_t j = 0; j < state.size(); ++j) {
    mid.w[j] += dt * r0.dw[j];
    mid.psi[j] = state.psi[j] * std::exp(dt * r0.du[j]);
  }
  std::vector<double> mid_anchor = state.anchor;
  for (std::size_t j = 0; j < mid_anchor.size(); ++j) mid_anchor[j] += dt * a0[j];
  const auto r1 = detail::flow_rates(mid, lim.gauge);
  const auto a1 = detail::anchor_rates(mid, mid_anchor, lim.gauge);
  WarpedFlowState next = state;
  next.t = state.t + dt;
  for (std::size_t j = 0; j < next.anchor.size(); ++j) next.anchor[j] += 0.5 * dt * (a0[j] + a1[j]);
  for (std::size_t j = 0; j < state.size(); ++j) {
    next.w[j] += 0.5 * dt * (r0.dw[j] + r1.dw[j]);
    next.psi[j] = std::exp(std::log(state.psi[j]) + 0.5 * dt * (r0.du[j] + r1.du[j]));
    if (!std::isfinite(next.w[j]) || !std::isfinite(next.psi[j]) || next.psi[j] <= 0.0) {
      fail(ErrorCode::Blowup, "non-finite profile at node " + std::to_string(j));
    }
  }
  detail::refresh_profiles(next);
  if (next.topology == Topology::Sphere) {
    for (std::size_t j : {std::size_t{0}, next.size() - 1}) {
      const double slope = std::exp(next.w[j]) / next.psi[j];
      if (std::abs(slope - 1.0) > lim.pole_tolerance) {
        fail(ErrorCode::PoleDegeneracy, "|phi_s| at pole = " + std::to_string(slope));
      }
    }
  }
  const auto c2 = warped_curvature(next);
  if (!(c2.max_rm <= lim.max_curvature)) {
    fail(ErrorCode::Blowup, "max|Rm| = " + std::to_string(c2.max_rm) + " at t = " + std::to_string(next.t));
  }
  return next;
}

/// Profile of a state in the Ricci-flow coordinate X (uniform nodes), recovered
/// from the anchors. In that coordinate psi_t = -(n-1) K_rad psi and
/// w_t = -(K_rad + (n-2) K_sph) hold pointwise.
struct RicciChartProfile {
  std::vector<double> x, psi, w, k_rad, k_sph, scalar;
};

inline RicciChartProfile ricci_chart(const WarpedFlowState& s) {
  require(s.topology == Topology::Sphere, ErrorCode::InvalidArgument, "Ricci-flow chart needs sphere topology");
  require(s.anchor.size() == s.size(), ErrorCode::NoFlowData, "state carries no anchors");
  const std::size_t m = s.size();
  const double h = s.dx();
  const auto c = warped_curvature(s);
  std::vector<double> u(m), drift(m);
  for (std::size_t j = 0; j < m; ++j) {
    u[j] = std::log(s.psi[j]);
    drift[j] = s.anchor[j] - s.x[j];
  }
  RicciChartProfile out;
  out.x = s.x;
  out.psi.resize(m);
  out.w.resize(m);
  out.k_rad.resize(m);
  out.k_sph.resize(m);
  out.scalar.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    const int jj = static_cast<int>(j);
    using detail::ghost_odd;
    const double ddrift = (-ghost_odd(drift, jj + 2, s.topology) + 8.0 * ghost_odd(drift, jj + 1, s.topology) -
                           8.0 * ghost_odd(drift, jj - 1, s.topology) + ghost_odd(drift, jj - 2, s.topology)) /
                          (12.0 * h);
    const double stretch = 1.0 + ddrift;
    require(stretch > 0.0, ErrorCode::PoleDegeneracy, "anchor map lost monotonicity");
    const double a = s.anchor[j];
    out.psi[j] = std::exp(detail::sample(u, s.topology, h, a)) * stretch;
    const bool pole = j == 0 || j + 1 == m;
    const double w_hat = detail::sample(s.w, s.topology, h, a);
    if (pole) {
      out.w[j] = w_hat + std::log(stretch);
    } else {
      const double ratio = detail::closure_profile(s.topology, a).s / detail::closure_profile(s.topology, s.x[j]).s;
      out.w[j] = w_hat + std::log(ratio);
    }
    out.k_rad[j] = detail::sample(c.k_rad, s.topology, h, a);
    out.k_sph[j] = detail::sample(c.k_sph, s.topology, h, a);
    out.scalar[j] = 2.0 * (s.n - 1) * out.k_rad[j] + (s.n - 1) * (s.n - 2) * out.k_sph[j];
  }
  return out;
}

/// Discrete maximal solution: an append-only, time-ordered sequence of states.
/// Synthetic histories carry times and curvature maxima only.
class FlowHistory {
 public:
  void append(WarpedFlowState state, double max_rm) {
    require(times_.empty() || state.t > times_.back(), ErrorCode::InvalidArgument, "history times must increase");
    require(std::isfinite(max_rm), ErrorCode::InvalidArgument, "max|Rm| must be finite");
    times_.push_back(state.t);
    max_rm_.push_back(max_rm);
    states_.push_back(std::move(state));
  }

  void append_synthetic(double t, double max_rm) {
    WarpedFlowState s;
    s.t = t;
    append(std::move(s), max_rm);
  }

  std::size_t size() const { return times_.size(); }
  bool empty() const { return times_.empty(); }
  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& max_rm() const { return max_rm_; }
  const std::vector<WarpedFlowState>& states() const { return states_; }
  const WarpedFlowState& state(std::size_t i) const { return states_[i]; }
  bool has_profiles() const { return !states_.empty() && !states_.front().x.empty(); }

  std::optional<double> singular_time;
  double singular_time_uncertainty = 0.0;

 private:
  std::vector<double> times_;
  std::vector<double> max_rm_;
  std::vector<WarpedFlowState> states_;
};

struct FlowRunConfig {
  FlowLimits limits;
  double t_end = std::numeric_limits<double>::infinity();
  long max_steps = 2'000'000;
  int store_every = 1;
};

struct FlowRunResult {
  FlowHistory history;
  long steps = 0;
  bool hit_guard = false;
};

/// Advances `initial` with the largest CFL-admissible step until the curvature
/// guard, t_end, or the step budget is reached.
inline FlowRunResult run_flow(const WarpedFlowState& initial, const FlowRunConfig& cfg) {
  FlowRunResult out;
  WarpedFlowState s = initial;
  out.history.append(s, warped_curvature(s).max_rm);
  for (long k = 0; k < cfg.max_steps && s.t < cfg.t_end; ++k) {
    const auto c = warped_curvature(s);
    double dt = cfl_bound(s, c, cfg.limits);
    if (s.t + dt > cfg.t_end) dt = cfg.t_end - s.t;
    try {
      s = step_flow(s, dt, cfg.limits);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Blowup) throw;
      out.hit_guard = true;
      break;
    }
    ++out.steps;
    if (out.steps % cfg.store_every == 0 || s.t >= cfg.t_end) out.history.append(s, warped_curvature(s).max_rm);
  }
  if (out.history.times().back() < s.t) out.history.append(s, warped_curvature(s).max_rm);
  return out;
}

struct SingularTimeEstimate {
  double T = 0.0;
  double uncertainty = 0.0;
};

namespace detail {

struct LineFit {
  double slope = 0.0, intercept = 0.0, var_slope = 0.0, var_intercept = 0.0, cov = 0.0, rms = 0.0;
};

inline LineFit least_squares_line(const std::vector<double>& xs, const std::vector<double>& ys) {
  const double m = static_cast<double>(xs.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
  }
  const double mx = sx / m, my = sy / m;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  LineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ssr = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (f.intercept + f.slope * xs[i]);
    ssr += r * r;
  }
  const double s2 = xs.size() > 2 ? ssr / (m - 2.0) : 0.0;
  f.rms = std::sqrt(ssr / m);
  f.var_slope = s2 / sxx;
  f.var_intercept = s2 * (1.0 / m + mx * mx / sxx);
  f.cov = -mx * s2 / sxx;
  return f;
}

}  // namespace detail

/// Extrapolates 1/max|Rm| linearly to zero over the last states of the history.
inline SingularTimeEstimate estimate_singular_time(const FlowHistory& history, std::size_t tail = 10) {
  require(history.size() >= tail && tail >= 4, ErrorCode::NoBlowupTrend, "history shorter than the fit tail");
  const auto& t = history.times();
  const auto& k = history.max_rm();
  const std::size_t first = history.size() - tail;
  for (std::size_t i = first + 1; i < history.size(); ++i) {
    if (!(k[i] > k[i - 1])) fail(ErrorCode::NoBlowupTrend, "max|Rm| is not increasing in the tail");
  }
  auto fit_from = [&](std::size_t start) {
    std::vector<double> xs, ys;
    for (std::size_t i = start; i < history.size(); ++i) {
      xs.push_back(t[i]);
      ys.push_back(1.0 / k[i]);
    }
    return detail::least_squares_line(xs, ys);
  };
  const auto full = fit_from(first);
  if (!(full.slope < 0.0)) fail(ErrorCode::NoBlowupTrend, "1/max|Rm| does not decrease");
  const double T = -full.intercept / full.slope;
  if (!(T > t.back())) fail(ErrorCode::NoBlowupTrend, "extrapolated singular time precedes the last state");
  const double dTda = full.intercept / (full.slope * full.slope);
  const double dTdb = -1.0 / full.slope;
  const double var = dTda * dTda * full.var_slope + dTdb * dTdb * full.var_intercept + 2.0 * dTda * dTdb * full.cov;
  const auto half = fit_from(history.size() - tail / 2);
  const double T_half = half.slope < 0.0 ? -half.intercept / half.slope : T;
  return {T, std::sqrt(std::max(var, 0.0)) + std::abs(T - T_half)};
}

enum class BlowupClass { TypeI, TypeA, NotTypeA };

inline std::string to_string(BlowupClass c) {
  switch (c) {
    case BlowupClass::TypeI: return "type I";
    case BlowupClass::TypeA: return "type A";
    case BlowupClass::NotTypeA: return "not type A";
  }
  return "?";
}

struct TypeAEstimate {
  double C = 0.0;
  double r = 0.0;
  double fit_residual = 0.0;
  double r_stderr = 0.0;
  double window_begin = 0.0;
  double window_end = 0.0;
  std::size_t samples = 0;
  BlowupClass verdict = BlowupClass::NotTypeA;
};

/// Fits log max|Rm| = log C - r log(T - t) over the tail window.
inline TypeAEstimate fit_type_a(const FlowHistory& history, double T, double band = 0.05) {
  require(!history.empty(), ErrorCode::InsufficientTail, "empty history");
  const auto& t = history.times();
  const auto& k = history.max_rm();
  double t_signal = t.back();
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (k[i] >= 2.0 * k.front()) {
      t_signal = t[i];
      break;
    }
  }
  const double last_dt = history.size() > 1 ? t.back() - t[t.size() - 2] : 0.0;
  const double begin = std::max(0.5 * T, T - 0.4 * (T - t_signal));
  const double end = std::max(T - last_dt, t.back());
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (t[i] >= begin && t[i] <= end && t[i] < T) {
      xs.push_back(std::log(T - t[i]));
      ys.push_back(std::log(k[i]));
    }
  }
  require(xs.size() >= 5, ErrorCode::InsufficientTail, "fewer than 5 states in the fit window");
  const auto f = detail::least_squares_line(xs, ys);
  TypeAEstimate est;
  est.r = -f.slope;
  est.C = std::exp(f.intercept);
  est.fit_residual = f.rms;
  est.r_stderr = std::sqrt(std::max(f.var_slope, 0.0));
  est.window_begin = begin;
  est.window_end = end;
  est.samples = xs.size();
  if (std::abs(est.r - 1.0) <= band) {
    est.verdict = BlowupClass::TypeI;
  } else if (est.r >= 1.0 - band && est.r < 1.5) {
    est.verdict = BlowupClass::TypeA;
  } else {
    est.verdict = BlowupClass::NotTypeA;
  }
  return est;
}

struct LowerBoundCheck {
  bool holds = true;
  double min_ratio = std::numeric_limits<double>::infinity();  ///< min over states of 8 (T - t) max|Rm|
  std::size_t worst_index = 0;
};

inline LowerBoundCheck blowup_lower_bound_check(const FlowHistory& history, double T) {
  LowerBoundCheck out;
  for (std::size_t i = 0; i < history.size(); ++i) {
    const double tau = T - history.times()[i];
    if (tau <= 0.0) continue;
    const double ratio = 8.0 * tau * history.max_rm()[i];
    if (ratio < out.min_ratio) {
      out.min_ratio = ratio;
      out.worst_index = i;
    }
  }
  out.holds = out.min_ratio >= 1.0;
  return out;
}

// Columnar text serialization: one row per (state, node).

inline void write_flow_history(std::ostream& os, const FlowHistory& h, const std::string& config_hash) {
  os << "# rflab-flow-history v1\n";
  os << "# config " << config_hash << "\n";
  if (h.singular_time) os << "# singular_time " << fmt_exact(*h.singular_time) << " " << fmt_exact(h.singular_time_uncertainty) << "\n";
  os << "t,j,x,phi,psi,w,anchor,max_rm,n,topology\n";
  for (std::size_t i = 0; i < h.size(); ++i) {
    const auto& s = h.state(i);
    if (s.x.empty()) {
      os << fmt_exact(s.t) << ",-1,,,,,," << fmt_exact(h.max_rm()[i]) << ",,\n";
      continue;
    }
    for (std::size_t j = 0; j < s.size(); ++j) {
      os << fmt_exact(s.t) << ',' << j << ',' << fmt_exact(s.x[j]) << ',' << fmt_exact(s.phi[j]) << ',' << fmt_exact(s.psi[j]) << ','
         << fmt_exact(s.w[j]) << ',' << (j < s.anchor.size() ? fmt_exact(s.anchor[j]) : std::string()) << ','
         << fmt_exact(h.max_rm()[i]) << ',' << s.n << ',' << to_string(s.topology) << '\n';
    }
  }
}

inline FlowHistory read_flow_history(std::istream& is) {
  FlowHistory h;
  std::string line;
  require(static_cast<bool>(std::getline(is, line)) && line == "# rflab-flow-history v1", ErrorCode::Io, "not a v1 flow history");
  WarpedFlowState cur;
  double cur_rm = 0.0;
  bool open = false;
  auto flush = [&] {
    if (open) h.append(std::move(cur), cur_rm);
    cur = WarpedFlowState{};
    open = false;
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ls(line.substr(1));
      std::string key;
      ls >> key;
      if (key == "singular_time") {
        double T = 0, u = 0;
        ls >> T >> u;
        h.singular_time = T;
        h.singular_time_uncertainty = u;
      }
      continue;
    }
    if (line.rfind("t,", 0) == 0) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    while (cols.size() < 10) cols.emplace_back();
    const double t = std::stod(cols[0]);
    const int j = std::stoi(cols[1]);
    if (open && t != cur.t) flush();
    if (j < 0) {
      h.append_synthetic(t, std::stod(cols[7]));
      continue;
    }
    if (!open) {
      cur.t = t;
      cur.n = std::stoi(cols[8]);
      cur.topology = topology_from_string(cols[9]);
      cur_rm = std::stod(cols[7]);
      open = true;
    }
    cur.x.push_back(std::stod(cols[2]));
    cur.phi.push_back(std::stod(cols[3]));
    cur.psi.push_back(std::stod(cols[4]));
    cur.w.push_back(std::stod(cols[5]));
    if (!cols[6].empty()) cur.anchor.push_back(std::stod(cols[6]));
  }
  flush();
  return h;
}

}  // namespace rflab
