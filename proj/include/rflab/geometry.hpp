#pragma once

// Space-time metric models and their reduced charts.
//
// Every model is rotationally symmetric about a base point, so minimizing
// L-geodesics from the base are sought in a reduced chart of dimension k <= 3
// with a diagonal metric diag(a_1, ..., a_k). The reduced chart also carries the
// volume density of the full n-manifold and the orthonormal-frame Hessian
// formulas used by the soliton and inequality checks.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "rflab/error.hpp"
#include "rflab/flow.hpp"
#include "rflab/grid.hpp"

namespace rflab {

enum class Family { EinsteinSphere, GaussianFlat, ShrinkingCylinder, NumericWarped };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::EinsteinSphere: return "einstein-sphere";
    case Family::GaussianFlat: return "gaussian-flat";
    case Family::ShrinkingCylinder: return "shrinking-cylinder";
    case Family::NumericWarped: return "numeric-warped";
  }
  return "unknown";
}

inline Family family_from_string(const std::string& s) {
  for (Family f : {Family::EinsteinSphere, Family::GaussianFlat, Family::ShrinkingCylinder, Family::NumericWarped}) {
    if (to_string(f) == s) return f;
  }
  fail(ErrorCode::ConfigInvalid, "unknown model family '" + s + "'");
}

inline constexpr int kMaxReduced = 3;
using RVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxReduced, 1>;
using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxReduced, kMaxReduced>;

/// Area of the unit k-sphere.
inline double sphere_area(int k) {
  const double h = 0.5 * (k + 1);
  return 2.0 * std::pow(std::numbers::pi, h) / std::tgamma(h);
}

struct CurvaturePacket {
  Eigen::MatrixXd ric;     ///< coordinate components
  double scalar = 0.0;
  double rm_norm = 0.0;    ///< largest |sectional curvature|
  Eigen::VectorXd grad_R;  ///< covector components
};

/// Reduced metric diag(a) at one point; da(i, j) = d a_j / d x_i.
struct ChartSample {
  RVec a;
  RMat da;
  double R = 0.0;
  RVec dR;
};

/// Tabulated Ricci-flow-coordinate profiles of a sphere-topology history.
/// Space: cubic Hermite with 4th-order nodal slopes. Time: cubic Hermite for psi
/// and w using the exact pointwise flow rates, linear for curvatures.
class WarpedTable {
 public:
  struct Eval {
    double psi, dpsi, w, dw, k_rad, k_sph, R, dR, dpsi_dt, dw_dt;
  };

  explicit WarpedTable(const FlowHistory& h) {
    require(h.has_profiles() && h.size() >= 2, ErrorCode::NoFlowData, "numeric model needs at least two stored profiles");
    n_ = h.state(0).n;
    for (const auto& s : h.states()) {
      require(s.topology == Topology::Sphere, ErrorCode::InvalidArgument, "numeric model needs sphere topology");
      require(s.size() == h.state(0).size(), ErrorCode::ShapeMismatch, "history profiles differ in size");
      const auto c = ricci_chart(s);
      Slice sl;
      sl.psi = c.psi;
      sl.w = c.w;
      sl.k_rad = c.k_rad;
      sl.k_sph = c.k_sph;
      sl.R = c.scalar;
      const double dx = s.dx();
      sl.dpsi = derivative4(sl.psi, Topology::Sphere, dx);
      sl.dw = derivative4(sl.w, Topology::Sphere, dx);
      sl.dk_rad = derivative4(sl.k_rad, Topology::Sphere, dx);
      sl.dk_sph = derivative4(sl.k_sph, Topology::Sphere, dx);
      sl.dR = derivative4(sl.R, Topology::Sphere, dx);
      slices_.push_back(std::move(sl));
    }
    times_ = h.times();
    nodes_ = static_cast<int>(h.state(0).size());
    h_ = 1.0 / (nodes_ - 1);
  }

  int dimension() const { return n_; }
  double t_first() const { return times_.front(); }
  double t_last() const { return times_.back(); }
  const std::vector<double>& times() const { return times_; }
  int nodes() const { return nodes_; }

  /// Rounding slack at the ends of the tabulated range.
  double slack() const { return 1e-12 * std::max(1.0, std::abs(times_.back())); }

  Eval at(double x, double t) const {
    require(x >= 0.0 && x <= 1.0, ErrorCode::OutOfChart, "x outside [0,1]");
    require(t >= times_.front() - slack() && t <= times_.back() + slack(), ErrorCode::NoFlowData,
            "time " + std::to_string(t) + " outside tabulated range");
    t = std::clamp(t, times_.front(), times_.back());
    auto it = std::upper_bound(times_.begin(), times_.end(), t);
    std::size_t k = it == times_.begin() ? 0 : static_cast<std::size_t>(it - times_.begin()) - 1;
    if (k + 1 >= times_.size()) k = times_.size() - 2;
    const double span = times_[k + 1] - times_[k];
    const double s = (t - times_[k]) / span;
    const Local a = local(slices_[k], x), b = local(slices_[k + 1], x);
    const double h00 = 2 * s * s * s - 3 * s * s + 1, h10 = s * s * s - 2 * s * s + s, h01 = -2 * s * s * s + 3 * s * s, h11 = s * s * s - s * s;
    const double g00 = (6 * s * s - 6 * s) / span, g10 = 3 * s * s - 4 * s + 1, g01 = (-6 * s * s + 6 * s) / span, g11 = 3 * s * s - 2 * s;
    Eval e{};
    e.psi = h00 * a.psi + h10 * span * a.psi_t + h01 * b.psi + h11 * span * b.psi_t;
    e.dpsi = h00 * a.dpsi + h10 * span * a.psi_tx + h01 * b.dpsi + h11 * span * b.psi_tx;
    e.w = h00 * a.w + h10 * span * a.w_t + h01 * b.w + h11 * span * b.w_t;
    e.dw = h00 * a.dw + h10 * span * a.w_tx + h01 * b.dw + h11 * span * b.w_tx;
    e.dpsi_dt = g00 * a.psi + g10 * a.psi_t + g01 * b.psi + g11 * b.psi_t;
    e.dw_dt = g00 * a.w + g10 * a.w_t + g01 * b.w + g11 * b.w_t;
    e.k_rad = (1 - s) * a.k_rad + s * b.k_rad;
    e.k_sph = (1 - s) * a.k_sph + s * b.k_sph;
    e.R = (1 - s) * a.R + s * b.R;
    e.dR = (1 - s) * a.dR + s * b.dR;
    return e;
  }

 private:
  struct Slice {
    std::vector<double> psi, dpsi, w, dw, k_rad, dk_rad, k_sph, dk_sph, R, dR;
  };
  struct Local {
    double psi, dpsi, w, dw, k_rad, dk_rad, k_sph, dk_sph, R, dR, psi_t, psi_tx, w_t, w_tx;
  };

  Local local(const Slice& sl, double x) const {
    const int i = std::clamp(static_cast<int>(std::floor(x / h_)), 0, nodes_ - 2);
    const double r = x / h_ - i;
    const double h00 = 2 * r * r * r - 3 * r * r + 1, h10 = r * r * r - 2 * r * r + r, h01 = -2 * r * r * r + 3 * r * r, h11 = r * r * r - r * r;
    const double g00 = 6 * r * r - 6 * r, g10 = 3 * r * r - 4 * r + 1, g01 = -6 * r * r + 6 * r, g11 = 3 * r * r - 2 * r;
    const auto ui = static_cast<std::size_t>(i);
    auto val = [&](const std::vector<double>& f, const std::vector<double>& df) {
      return h00 * f[ui] + h10 * h_ * df[ui] + h01 * f[ui + 1] + h11 * h_ * df[ui + 1];
    };
    auto der = [&](const std::vector<double>& f, const std::vector<double>& df) {
      return (g00 * f[ui] + g01 * f[ui + 1]) / h_ + g10 * df[ui] + g11 * df[ui + 1];
    };
    Local l{};
    l.psi = val(sl.psi, sl.dpsi);
    l.dpsi = der(sl.psi, sl.dpsi);
    l.w = val(sl.w, sl.dw);
    l.dw = der(sl.w, sl.dw);
    l.k_rad = val(sl.k_rad, sl.dk_rad);
    l.dk_rad = der(sl.k_rad, sl.dk_rad);
    l.k_sph = val(sl.k_sph, sl.dk_sph);
    l.dk_sph = der(sl.k_sph, sl.dk_sph);
    l.R = val(sl.R, sl.dR);
    l.dR = der(sl.R, sl.dR);
    l.psi_t = -(n_ - 1) * l.k_rad * l.psi;
    l.psi_tx = -(n_ - 1) * (l.dk_rad * l.psi + l.k_rad * l.dpsi);
    l.w_t = -(l.k_rad + (n_ - 2) * l.k_sph);
    l.w_tx = -(l.dk_rad + (n_ - 2) * l.dk_sph);
    return l;
  }

  int n_ = 3;
  int nodes_ = 0;
  double h_ = 0.0;
  std::vector<double> times_;
  std::vector<Slice> slices_;
};

namespace detail {

/// Round metric of S^m in hyperspherical angles: diagonal factors.
inline Eigen::VectorXd sphere_factors(const Eigen::VectorXd& angles) {
  Eigen::VectorXd f(angles.size());
  double acc = 1.0;
  for (Eigen::Index i = 0; i < angles.size(); ++i) {
    f(i) = acc;
    acc *= std::sin(angles(i)) * std::sin(angles(i));
  }
  return f;
}

inline bool angles_in_range(const Eigen::VectorXd& angles) {
  const double pi = std::numbers::pi;
  for (Eigen::Index i = 0; i < angles.size(); ++i) {
    const double hi = i + 1 == angles.size() ? 2.0 * pi : pi;
    if (!(angles(i) >= 0.0 && angles(i) <= hi)) return false;
  }
  return true;
}

/// Unit vector in R^{m+1} for hyperspherical angles of S^m.
inline Eigen::VectorXd sphere_embed(const Eigen::VectorXd& angles) {
  const Eigen::Index m = angles.size();
  Eigen::VectorXd e(m + 1);
  double acc = 1.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    e(i) = acc * std::cos(angles(i));
    acc *= std::sin(angles(i));
  }
  e(m) = acc;
  return e;
}

inline double sphere_angle(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() == 0) return 0.0;
  const double chord = (sphere_embed(a) - sphere_embed(b)).norm();
  return 2.0 * std::asin(std::min(1.0, 0.5 * chord));
}

/// Even fold of x with the given period onto [0, period/2]; sign is dx~/dx.
struct Fold {
  double x;
  double sign;
};

inline Fold fold(double x, double period) {
  double m = std::fmod(x, period);
  if (m < 0.0) m += period;
  if (m <= 0.5 * period) return {m, 1.0};
  return {period - m, -1.0};
}

}  // namespace detail

/// Immutable space-time metric. Full-chart points:
///   EinsteinSphere     (r, theta_1..theta_{n-1}), r in [0, pi]
///   GaussianFlat       Cartesian R^n
///   ShrinkingCylinder  (y, theta_1..theta_{n-1})
///   NumericWarped      (x, theta_1..theta_{n-1}), x in [0, 1], Ricci-flow coordinate
/// Angles follow hyperspherical ranges [0, pi] except the last in [0, 2 pi].
class MetricModel {
 public:
  static MetricModel einstein_sphere(int n, double R0) {
    require(n >= 2, ErrorCode::InvalidArgument, "dimension must be at least 2");
    require(R0 > 0.0, ErrorCode::InvalidArgument, "R0 must be positive");
    MetricModel m;
    m.family_ = Family::EinsteinSphere;
    m.n_ = n;
    m.R0_ = R0;
    m.T_ = n / (2.0 * R0);
    return m;
  }

  static MetricModel gaussian_flat(int n, double T = 1.0) {
    require(n >= 1 && n <= kMaxReduced, ErrorCode::InvalidArgument, "Gaussian model supports n <= 3");
    require(T > 0.0, ErrorCode::InvalidArgument, "T must be positive");
    MetricModel m;
    m.family_ = Family::GaussianFlat;
    m.n_ = n;
    m.T_ = T;
    return m;
  }

  /// S^{n-1}(sqrt(2(n-2)(T-t))) x R.
  static MetricModel shrinking_cylinder(int n, double T = 1.0) {
    require(n >= 3, ErrorCode::InvalidArgument, "cylinder needs n >= 3");
    require(T > 0.0, ErrorCode::InvalidArgument, "T must be positive");
    MetricModel m;
    m.family_ = Family::ShrinkingCylinder;
    m.n_ = n;
    m.T_ = T;
    return m;
  }

  /// `T` is the (estimated) singular time of the history.
  static MetricModel numeric_warped(const FlowHistory& history, double T) {
    MetricModel m;
    m.family_ = Family::NumericWarped;
    m.table_ = std::make_shared<const WarpedTable>(history);
    m.history_ = std::make_shared<const FlowHistory>(history);
    m.n_ = m.table_->dimension();
    require(T > m.table_->t_last(), ErrorCode::InvalidArgument, "T must exceed the last tabulated time");
    m.T_ = T;
    return m;
  }

  Family family() const { return family_; }
  int dimension() const { return n_; }
  double singular_time() const { return T_; }
  double initial_scalar_curvature() const { return R0_; }
  const WarpedTable* table() const { return table_.get(); }
  const FlowHistory* history() const { return history_.get(); }

  /// Earliest and latest admissible query times.
  double t_min() const { return table_ ? table_->t_first() : -std::numeric_limits<double>::infinity(); }
  double t_max() const { return table_ ? table_->t_last() : T_; }

  void check_time(double t) const {
    if (family_ != Family::GaussianFlat && t >= T_) fail(ErrorCode::PastSingularTime, "t = " + std::to_string(t) + " >= T");
    if (table_ && (t < table_->t_first() - table_->slack() || t > table_->t_last() + table_->slack())) fail(ErrorCode::NoFlowData, "t = " + std::to_string(t) + " not tabulated");
  }

  void check_point(const Eigen::VectorXd& q) const {
    require(q.size() == n_, ErrorCode::OutOfChart, "point has wrong dimension");
    for (Eigen::Index i = 0; i < q.size(); ++i) require(std::isfinite(q(i)), ErrorCode::OutOfChart, "non-finite coordinate");
    const Eigen::VectorXd angles = q.tail(n_ - 1);
    switch (family_) {
      case Family::GaussianFlat: return;
      case Family::EinsteinSphere:
        require(q(0) >= 0.0 && q(0) <= std::numbers::pi && detail::angles_in_range(angles), ErrorCode::OutOfChart, "outside polar chart");
        return;
      case Family::ShrinkingCylinder:
        require(detail::angles_in_range(angles), ErrorCode::OutOfChart, "outside product chart");
        return;
      case Family::NumericWarped:
        require(q(0) >= 0.0 && q(0) <= 1.0 && detail::angles_in_range(angles), ErrorCode::OutOfChart, "outside warped chart");
        return;
    }
  }

  /// Einstein scale factor 1 - t/T and sphere radius^2 of the cylinder.
  double einstein_scale(double t) const { return (n_ * (n_ - 1) / R0_) * (1.0 - t / T_); }
  double cylinder_radius2(double t) const { return 2.0 * (n_ - 2) * (T_ - t); }

  Eigen::MatrixXd metric_at(const Eigen::VectorXd& q, double t) const {
    check_point(q);
    check_time(t);
    Eigen::VectorXd d(n_);
    switch (family_) {
      case Family::GaussianFlat: d.setOnes(); break;
      case Family::EinsteinSphere: {
        const double A = einstein_scale(t);
        const double s = std::sin(q(0));
        d(0) = A;
        d.tail(n_ - 1) = A * s * s * detail::sphere_factors(q.tail(n_ - 1));
        break;
      }
      case Family::ShrinkingCylinder: {
        const double rho2 = cylinder_radius2(t);
        d(0) = 1.0;
        d.tail(n_ - 1) = rho2 * detail::sphere_factors(q.tail(n_ - 1));
        break;
      }
      case Family::NumericWarped: {
        const auto e = table_->at(q(0), t);
        const double phi = detail::closure_profile(Topology::Sphere, q(0)).s * std::exp(e.w);
        d(0) = e.psi * e.psi;
        d.tail(n_ - 1) = phi * phi * detail::sphere_factors(q.tail(n_ - 1));
        break;
      }
    }
    return d.asDiagonal();
  }

  CurvaturePacket curvature_at(const Eigen::VectorXd& q, double t) const {
    const Eigen::MatrixXd g = metric_at(q, t);
    CurvaturePacket c;
    c.grad_R = Eigen::VectorXd::Zero(n_);
    switch (family_) {
      case Family::GaussianFlat:
        c.ric = Eigen::MatrixXd::Zero(n_, n_);
        break;
      case Family::EinsteinSphere:
        c.ric = g / (2.0 * (T_ - t));
        c.scalar = n_ / (2.0 * (T_ - t));
        c.rm_norm = 1.0 / einstein_scale(t);
        break;
      case Family::ShrinkingCylinder: {
        c.ric = g / (2.0 * (T_ - t));
        c.ric(0, 0) = 0.0;
        c.scalar = (n_ - 1) / (2.0 * (T_ - t));
        c.rm_norm = 1.0 / cylinder_radius2(t);
        break;
      }
      case Family::NumericWarped: {
        const auto e = table_->at(q(0), t);
        c.ric = Eigen::MatrixXd::Zero(n_, n_);
        c.ric(0, 0) = (n_ - 1) * e.k_rad * g(0, 0);
        for (int i = 1; i < n_; ++i) c.ric(i, i) = (e.k_rad + (n_ - 2) * e.k_sph) * g(i, i);
        c.scalar = 2.0 * (n_ - 1) * e.k_rad + (n_ - 1) * (n_ - 2) * e.k_sph;
        c.rm_norm = std::max(std::abs(e.k_rad), std::abs(e.k_sph));
        c.grad_R(0) = e.dR;
        break;
      }
    }
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["schema"] = "rflab-model";
    j["version"] = 1;
    j["family"] = to_string(family_);
    j["n"] = n_;
    j["T"] = T_;
    if (family_ == Family::EinsteinSphere) j["R0"] = R0_;
    if (history_) {
      nlohmann::json states = nlohmann::json::array();
      for (std::size_t i = 0; i < history_->size(); ++i) {
        const auto& s = history_->state(i);
        states.push_back({{"t", s.t}, {"max_rm", history_->max_rm()[i]}, {"psi", s.psi}, {"phi", s.phi}, {"w", s.w}, {"anchor", s.anchor}});
      }
      j["history"] = states;
    }
    return j;
  }

  static MetricModel from_json(const nlohmann::json& j) {
    require(j.value("schema", "") == "rflab-model" && j.value("version", 0) == 1, ErrorCode::ConfigInvalid, "not a v1 model snapshot");
    const Family f = family_from_string(j.at("family").get<std::string>());
    const int n = j.at("n").get<int>();
    switch (f) {
      case Family::EinsteinSphere: return einstein_sphere(n, j.at("R0").get<double>());
      case Family::GaussianFlat: return gaussian_flat(n, j.value("T", 1.0));
      case Family::ShrinkingCylinder: return shrinking_cylinder(n, j.value("T", 1.0));
      case Family::NumericWarped: {
        FlowHistory h;
        for (const auto& js : j.at("history")) {
          auto psi = js.at("psi").get<std::vector<double>>();
          auto phi = js.at("phi").get<std::vector<double>>();
          WarpedFlowState s = make_state(n, Topology::Sphere, psi, phi, js.at("t").get<double>());
          s.w = js.at("w").get<std::vector<double>>();
          s.anchor = js.at("anchor").get<std::vector<double>>();
          h.append(std::move(s), js.at("max_rm").get<double>());
        }
        return numeric_warped(h, j.at("T").get<double>());
      }
    }
    fail(ErrorCode::ConfigInvalid, "unreachable family");
  }

 private:
  Family family_ = Family::GaussianFlat;
  int n_ = 2;
  double T_ = 1.0;
  double R0_ = 0.0;
  std::shared_ptr<const WarpedTable> table_;
  std::shared_ptr<const FlowHistory> history_;
};

/// Reduced chart based at a point p: coordinates of the symmetry-reduced space
/// of minimizing candidates, relative to p.
///   GaussianFlat       q - p                              (k = n)
///   EinsteinSphere     polar angle r from p              (k = 1, fold period 2 pi)
///   ShrinkingCylinder  (y - y_p, sphere angle from p)    (k = 2, angle fold period 2 pi)
///   NumericWarped      x measured from the base pole     (k = 1, fold period 2)
class ReducedChart {
 public:
  ReducedChart(MetricModel model, Eigen::VectorXd p) : model_(std::move(model)), p_(std::move(p)) {
    model_.check_point(p_);
    if (model_.family() == Family::NumericWarped) {
      require(p_(0) == 0.0 || p_(0) == 1.0, ErrorCode::OutOfChart, "numeric model supports base points at the poles only");
      mirrored_ = p_(0) == 1.0;
    }
  }

  const MetricModel& model() const { return model_; }
  const Eigen::VectorXd& base() const { return p_; }
  int n() const { return model_.dimension(); }

  int dim() const {
    switch (model_.family()) {
      case Family::GaussianFlat: return model_.dimension();
      case Family::ShrinkingCylinder: return 2;
      default: return 1;
    }
  }

  /// Reduced coordinates of a full-chart point.
  RVec locate(const Eigen::VectorXd& q) const {
    model_.check_point(q);
    const int n = model_.dimension();
    RVec x(dim());
    switch (model_.family()) {
      case Family::GaussianFlat: x = q - p_; break;
      case Family::EinsteinSphere: {
        Eigen::VectorXd a(n), b(n);
        a = p_;
        b = q;
        x(0) = detail::sphere_angle(a, b);
        break;
      }
      case Family::ShrinkingCylinder:
        x(0) = q(0) - p_(0);
        x(1) = detail::sphere_angle(p_.tail(n - 1), q.tail(n - 1));
        break;
      case Family::NumericWarped: x(0) = mirrored_ ? 1.0 - q(0) : q(0); break;
    }
    return x;
  }

  /// Closed range of the canonical reduced domain.
  bool in_domain(const RVec& x) const {
    switch (model_.family()) {
      case Family::GaussianFlat: return true;
      case Family::EinsteinSphere: return x(0) >= 0.0 && x(0) <= std::numbers::pi;
      case Family::ShrinkingCylinder: return x(1) >= 0.0 && x(1) <= std::numbers::pi;
      case Family::NumericWarped: return x(0) >= 0.0 && x(0) <= 1.0;
    }
    return false;
  }

  /// Folded coordinates: the symmetric charts are extended evenly through the poles.
  RVec canonical(const RVec& x) const {
    RVec c = x;
    switch (model_.family()) {
      case Family::EinsteinSphere: c(0) = detail::fold(x(0), 2.0 * std::numbers::pi).x; break;
      case Family::ShrinkingCylinder: c(1) = detail::fold(x(1), 2.0 * std::numbers::pi).x; break;
      case Family::NumericWarped: c(0) = detail::fold(x(0), 2.0).x; break;
      default: break;
    }
    return c;
  }

  /// Lifts of a canonical target that a minimizer may end at.
  std::vector<RVec> images(const RVec& target) const {
    std::vector<RVec> out{target};
    RVec alt = target;
    switch (model_.family()) {
      case Family::EinsteinSphere: alt(0) = 2.0 * std::numbers::pi - target(0); break;
      case Family::ShrinkingCylinder: alt(1) = 2.0 * std::numbers::pi - target(1); break;
      case Family::NumericWarped: alt(0) = 2.0 - target(0); break;
      default: return out;
    }
    out.push_back(alt);
    return out;
  }

  /// Metric, curvature and derivatives at a point of the extended chart.
  ChartSample eval(const RVec& x, double t) const {
    model_.check_time(t);
    const int k = dim();
    ChartSample c;
    c.a = RVec::Ones(k);
    c.da = RMat::Zero(k, k);
    c.dR = RVec::Zero(k);
    const int n = model_.dimension();
    const double T = model_.singular_time();
    switch (model_.family()) {
      case Family::GaussianFlat: break;
      case Family::EinsteinSphere:
        c.a(0) = model_.einstein_scale(t);
        c.R = n / (2.0 * (T - t));
        break;
      case Family::ShrinkingCylinder:
        c.a(1) = model_.cylinder_radius2(t);
        c.R = (n - 1) / (2.0 * (T - t));
        break;
      case Family::NumericWarped: {
        const auto f = detail::fold(x(0), 2.0);
        const double sign = mirrored_ ? -f.sign : f.sign;
        const auto e = model_.table()->at(mirrored_ ? 1.0 - f.x : f.x, t);
        c.a(0) = e.psi * e.psi;
        c.da(0, 0) = sign * 2.0 * e.psi * e.dpsi;
        c.R = e.R;
        c.dR(0) = sign * e.dR;
        break;
      }
    }
    return c;
  }

  /// Density of the n-dimensional volume form per unit reduced volume, at canonical x.
  double volume_density(const RVec& x, double t) const {
    model_.check_time(t);
    const int n = model_.dimension();
    switch (model_.family()) {
      case Family::GaussianFlat: return 1.0;
      case Family::EinsteinSphere: {
        const double A = model_.einstein_scale(t);
        return sphere_area(n - 1) * std::pow(A, 0.5 * n) * std::pow(std::sin(x(0)), n - 1);
      }
      case Family::ShrinkingCylinder: {
        const double rho = std::sqrt(model_.cylinder_radius2(t));
        return sphere_area(n - 2) * std::pow(rho, n - 1) * std::pow(std::sin(x(1)), n - 2);
      }
      case Family::NumericWarped: {
        const double xx = mirrored_ ? 1.0 - x(0) : x(0);
        const auto e = model_.table()->at(xx, t);
        const double phi = detail::closure_profile(Topology::Sphere, xx).s * std::exp(e.w);
        return sphere_area(n - 1) * e.psi * std::pow(phi, n - 1);
      }
    }
    return 0.0;
  }

  /// Eigenvalues of Ric in the orthonormal frame adapted to the chart.
  Eigen::VectorXd frame_ricci(const RVec& x, double t) const {
    model_.check_time(t);
    const int n = model_.dimension();
    const double T = model_.singular_time();
    Eigen::VectorXd r = Eigen::VectorXd::Zero(n);
    switch (model_.family()) {
      case Family::GaussianFlat: break;
      case Family::EinsteinSphere: r.setConstant(1.0 / (2.0 * (T - t))); break;
      case Family::ShrinkingCylinder:
        r.setConstant(1.0 / (2.0 * (T - t)));
        r(0) = 0.0;
        break;
      case Family::NumericWarped: {
        const auto e = model_.table()->at(mirrored_ ? 1.0 - x(0) : x(0), t);
        r.setConstant(e.k_rad + (n - 2) * e.k_sph);
        r(0) = (n - 1) * e.k_rad;
        break;
      }
    }
    return r;
  }

  /// Covariant Hessian in the orthonormal frame from reduced partials df, d2f of a
  /// function invariant under the symmetry. Pole limits assume df vanishes there.
  Eigen::MatrixXd frame_hessian(const RVec& x, double t, const RVec& df, const RMat& d2f) const {
    const auto c = eval(x, t);
    const int n = model_.dimension();
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n, n);
    constexpr double kPole = 1e-12;
    switch (model_.family()) {
      case Family::GaussianFlat: H = d2f; break;
      case Family::EinsteinSphere: {
        const double A = c.a(0);
        const double s = std::sin(x(0));
        H(0, 0) = d2f(0, 0) / A;
        const double ang = std::abs(s) < kPole ? d2f(0, 0) / A : std::cos(x(0)) / s * df(0) / A;
        for (int i = 1; i < n; ++i) H(i, i) = ang;
        break;
      }
      case Family::ShrinkingCylinder: {
        const double rho2 = c.a(1);
        const double rho = std::sqrt(rho2);
        const double s = std::sin(x(1));
        H(0, 0) = d2f(0, 0);
        H(0, 1) = H(1, 0) = d2f(0, 1) / rho;
        H(1, 1) = d2f(1, 1) / rho2;
        const double ang = std::abs(s) < kPole ? d2f(1, 1) / rho2 : std::cos(x(1)) / s * df(1) / rho2;
        for (int i = 2; i < n; ++i) H(i, i) = ang;
        break;
      }
      case Family::NumericWarped: {
        const double xx = mirrored_ ? 1.0 - x(0) : x(0);
        const double sign = mirrored_ ? -1.0 : 1.0;
        const auto e = model_.table()->at(xx, t);
        const double psi2 = e.psi * e.psi;
        const double dpsi = sign * e.dpsi;
        H(0, 0) = (d2f(0, 0) - dpsi / e.psi * df(0)) / psi2;
        const auto p = detail::closure_profile(Topology::Sphere, xx);
        double ang;
        if (p.s < kPole) {
          ang = d2f(0, 0) / psi2;
        } else {
          const double log_phi_x = sign * (p.cot + e.dw);
          ang = log_phi_x * df(0) / psi2;
        }
        for (int i = 1; i < n; ++i) H(i, i) = ang;
        break;
      }
    }
    return H;
  }

  /// |df|^2 in the reduced metric.
  double grad_norm2(const RVec& x, double t, const RVec& df) const {
    const auto c = eval(x, t);
    double s = 0.0;
    for (int i = 0; i < df.size(); ++i) s += df(i) * df(i) / c.a(i);
    return s;
  }

 private:
  MetricModel model_;
  Eigen::VectorXd p_;
  bool mirrored_ = false;
};

/// Samples of a symmetric potential f on a reduced grid at one time.
struct PotentialField {
  double t = 0.0;
  Eigen::VectorXd base;
  std::vector<Axis> axes;
  std::vector<double> f;
  std::vector<RVec> grad;               ///< reduced partials
  std::vector<Eigen::MatrixXd> hess;    ///< covariant Hessian, orthonormal frame

  std::size_t size() const { return f.size(); }
};

namespace detail {

inline GridSpec space_grid(const std::vector<Axis>& axes) {
  GridSpec g;
  g.space = axes;
  g.time = Axis{0.0, 0.0, 1};
  return g;
}

inline RVec node_point(const std::vector<Axis>& axes, const std::vector<int>& ijk) {
  RVec x(static_cast<Eigen::Index>(axes.size()));
  for (std::size_t d = 0; d < axes.size(); ++d) x(static_cast<Eigen::Index>(d)) = axes[d].node(ijk[d]);
  return x;
}

inline void check_axes(const ReducedChart& chart, const std::vector<Axis>& axes) {
  require(static_cast<int>(axes.size()) == chart.dim(), ErrorCode::GridMismatch,
          "grid has " + std::to_string(axes.size()) + " axes, chart needs " + std::to_string(chart.dim()));
  const auto g = space_grid(axes);
  for (std::size_t s = 0; s < g.space_size(); ++s) {
    require(chart.in_domain(node_point(axes, g.unflatten_space(s))), ErrorCode::GridMismatch, "grid node outside reduced chart");
  }
}

}  // namespace detail

/// Exact values and reduced partials of a potential at one point.
struct PotentialJet {
  double f = 0.0;
  RVec df;
  RMat d2f;
};

/// Potential with symbolic derivatives.
template <typename Fn>
PotentialField analytic_potential(const ReducedChart& chart, const std::vector<Axis>& axes, double t, Fn&& jet) {
  detail::check_axes(chart, axes);
  chart.model().check_time(t);
  PotentialField out;
  out.t = t;
  out.base = chart.base();
  out.axes = axes;
  const auto g = detail::space_grid(axes);
  for (std::size_t s = 0; s < g.space_size(); ++s) {
    const RVec x = detail::node_point(axes, g.unflatten_space(s));
    const PotentialJet j = jet(x);
    out.f.push_back(j.f);
    out.grad.push_back(j.df);
    out.hess.push_back(chart.frame_hessian(x, t, j.df, j.d2f));
  }
  return out;
}

/// Potential from nodal values; partials by centered differences (one-sided at
/// boundary nodes, where the Hessian is left to the nearest interior value).
inline PotentialField sampled_potential(const ReducedChart& chart, const std::vector<Axis>& axes, double t, std::vector<double> values) {
  detail::check_axes(chart, axes);
  chart.model().check_time(t);
  const auto g = detail::space_grid(axes);
  require(values.size() == g.space_size(), ErrorCode::GridMismatch, "value count does not match grid");
  for (const auto& a : axes) require(a.count >= 3, ErrorCode::GridMismatch, "need at least 3 nodes per axis");
  PotentialField out;
  out.t = t;
  out.base = chart.base();
  out.axes = axes;
  const int k = chart.dim();
  for (std::size_t s = 0; s < g.space_size(); ++s) {
    const auto ijk = g.unflatten_space(s);
    // Differentiate at the nearest node whose full stencil is inside the grid.
    std::vector<int> c = ijk;
    for (int d = 0; d < k; ++d) c[static_cast<std::size_t>(d)] = std::clamp(c[static_cast<std::size_t>(d)], 1, axes[static_cast<std::size_t>(d)].count - 2);
    const std::size_t center = g.index(c, 0);
    RVec df(k);
    RMat d2(k, k);
    for (int d = 0; d < k; ++d) {
      const auto ud = static_cast<std::size_t>(d);
      const std::size_t stride = g.space_stride(ud);
      const double h = axes[ud].spacing();
      const std::size_t base = s - static_cast<std::size_t>(ijk[ud]) * stride;
      df(d) = diff1(values, stride, base, ijk[ud], axes[ud].count, h);
      const std::size_t cbase = center - static_cast<std::size_t>(c[ud]) * stride;
      d2(d, d) = diff2(values, stride, cbase, c[ud], h);
      for (int e = 0; e < d; ++e) {
        const auto ue = static_cast<std::size_t>(e);
        d2(d, e) = d2(e, d) = mixed_diff(values, stride, g.space_stride(ue), center, h, axes[ue].spacing());
      }
    }
    const RVec x = detail::node_point(axes, ijk);
    out.grad.push_back(df);
    out.hess.push_back(chart.frame_hessian(x, t, df, d2));
  }
  out.f = std::move(values);
  return out;
}

namespace detail {

inline void check_potential(const ReducedChart& chart, const PotentialField& f, double t) {
  require(f.t == t, ErrorCode::GridMismatch, "potential sampled at a different time");
  require(f.base.size() == chart.base().size() && f.base == chart.base(), ErrorCode::GridMismatch, "potential based elsewhere");
  check_axes(chart, f.axes);
  require(f.f.size() == space_grid(f.axes).space_size() && f.hess.size() == f.f.size() && f.grad.size() == f.f.size(),
          ErrorCode::GridMismatch, "potential sample count does not match grid");
}

}  // namespace detail

/// sup over nodes of |Ric + Hess f - g / (2 (T - t))|_g.
inline double soliton_residual(const MetricModel& model, const PotentialField& f, double t) {
  const ReducedChart chart(model, f.base);
  detail::check_potential(chart, f, t);
  const auto g = detail::space_grid(f.axes);
  const double shrink = 1.0 / (2.0 * (model.singular_time() - t));
  double worst = 0.0;
  for (std::size_t s = 0; s < f.size(); ++s) {
    const RVec x = detail::node_point(f.axes, g.unflatten_space(s));
    Eigen::MatrixXd E = f.hess[s];
    E.diagonal() += chart.frame_ricci(x, t);
    E.diagonal().array() -= shrink;
    worst = std::max(worst, E.norm());
  }
  return worst;
}

struct GradConst {
  double C = 0.0;
  double spread = 0.0;
};

/// Pointwise tau (R + |grad f|^2) - f with tau = T - t; at tau = 1 this is the
/// soliton identity R + |grad f|^2 - f = C. Returns mean and max deviation.
inline GradConst gradconst_check(const MetricModel& model, const PotentialField& f, double t) {
  const ReducedChart chart(model, f.base);
  detail::check_potential(chart, f, t);
  const auto g = detail::space_grid(f.axes);
  const double tau = model.singular_time() - t;
  std::vector<double> vals(f.size());
  for (std::size_t s = 0; s < f.size(); ++s) {
    const RVec x = detail::node_point(f.axes, g.unflatten_space(s));
    vals[s] = tau * (chart.eval(x, t).R + chart.grad_norm2(x, t, f.grad[s])) - f.f[s];
  }
  GradConst out;
  for (double v : vals) out.C += v;
  out.C /= static_cast<double>(vals.size());
  for (double v : vals) out.spread = std::max(out.spread, std::abs(v - out.C));
  return out;
}

/// Canonical potentials of the closed-form solitons in the reduced chart at p:
/// Gaussian |x|^2 / (4 tau), Einstein 0, cylinder y^2 / (4 tau).
inline PotentialField canonical_potential(const ReducedChart& chart, const std::vector<Axis>& axes, double t) {
  const double tau = chart.model().singular_time() - t;
  const int k = chart.dim();
  switch (chart.model().family()) {
    case Family::GaussianFlat:
      return analytic_potential(chart, axes, t, [&](const RVec& x) {
        return PotentialJet{x.squaredNorm() / (4.0 * tau), x / (2.0 * tau), RMat::Identity(k, k) / (2.0 * tau)};
      });
    case Family::EinsteinSphere:
      return analytic_potential(chart, axes, t, [&](const RVec&) { return PotentialJet{0.0, RVec::Zero(k), RMat::Zero(k, k)}; });
    case Family::ShrinkingCylinder:
      return analytic_potential(chart, axes, t, [&](const RVec& x) {
        RVec df = RVec::Zero(k);
        df(0) = x(0) / (2.0 * tau);
        RMat d2 = RMat::Zero(k, k);
        d2(0, 0) = 1.0 / (2.0 * tau);
        return PotentialJet{x(0) * x(0) / (4.0 * tau), df, d2};
      });
    case Family::NumericWarped: break;
  }
  fail(ErrorCode::InvalidArgument, "no canonical potential for numeric models");
}

}  // namespace rflab
