#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>

#include "oracles.hpp"
#include "rflab/reduced.hpp"

using namespace rflab;
using Eigen::VectorXd;

namespace {

constexpr double kPi = std::numbers::pi;

ReducedChart gaussian2() { return ReducedChart(MetricModel::gaussian_flat(2, 1.0), VectorXd::Zero(2)); }
ReducedChart einstein3(double pole = 0.0) {
  VectorXd p = VectorXd::Zero(3);
  p(0) = pole;
  return ReducedChart(MetricModel::einstein_sphere(3, 6.0), p);
}

GridSpec einstein_grid(int N) { return GridSpec{{make_axis(0.0, 3.0, N)}, make_axis(0.0, 0.1, N / 2)}; }

const ReducedDistanceField& einstein_field(int N) {
  static std::map<int, ReducedDistanceField> cache;
  auto it = cache.find(N);
  if (it == cache.end()) it = cache.emplace(N, build_field(einstein3(), 0.2, einstein_grid(N))).first;
  return it->second;
}

// Window of the singular-limit tests: T = 0.25, t_bar up to T/4.
GridSpec einstein_limit_grid(int N) { return GridSpec{{make_axis(0.0, 1.5, N)}, make_axis(0.0, 0.0625, N / 2)}; }

const SingularLimitDiagnostics& einstein_limit() {
  static const auto d = singular_limit(einstein3(), geometric_sequence(0.25, 2, 12), einstein_limit_grid(32));
  return d;
}

GridSpec cylinder_grid() { return GridSpec{{make_axis(-1.0, 1.0, 9), make_axis(0.0, kPi, 9)}, make_axis(0.0, 0.25, 9)}; }

const SingularLimitDiagnostics& cylinder_limit(int which) {
  auto make = [](double angle) {
    VectorXd p = VectorXd::Zero(3);
    p(1) = angle;
    return singular_limit(ReducedChart(MetricModel::shrinking_cylinder(3, 1.0), p), geometric_sequence(1.0, 2, 12), cylinder_grid());
  };
  static const auto a = make(0.0);
  static const auto b = make(kPi / 2);
  return which == 0 ? a : b;
}

}  // namespace

TEST(BuildField, GaussianClosedForm) {
  const GridSpec g{{make_axis(-1.0, 1.0, 9), make_axis(-1.0, 1.0, 9)}, make_axis(0.0, 0.5, 5)};
  const auto f = build_field(gaussian2(), 1.0, g);
  for (int it = 0; it < g.time.count; ++it) {
    for (std::size_t s = 0; s < g.space_size(); ++s) {
      const auto idx = f.index(s, it);
      const RVec q = f.point(s);
      EXPECT_NEAR(f.l[idx], oracle::gaussian_l(q.squaredNorm(), f.t_bar(it), 1.0), 1e-6);
      EXPECT_DOUBLE_EQ(f.L[idx], 2.0 * std::sqrt(f.tau(it)) * f.l[idx]);
      EXPECT_GT(f.v[idx], 0.0);
      EXPECT_GE(f.l[idx], 0.0);
      if (q.squaredNorm() == 0.0) {
        EXPECT_NEAR(f.l[idx], 0.0, 1e-14);
      }
    }
  }
}

TEST(BuildField, EinsteinMatchesDirectMinimization) {
  const auto& f = einstein_field(32);
  const auto ch = einstein3();
  int checked = 0;
  for (int i : {3, 9, 15, 21, 27}) {
    for (int it : {0, 3, 6, 9, 12}) {
      const auto idx = f.index(static_cast<std::size_t>(i), it);
      const double r = f.point(static_cast<std::size_t>(i))(0);
      const double dp = oracle::dp_radial_L(ch, r, f.t_bar(it), f.t0);
      EXPECT_NEAR(f.L[idx] / dp, 1.0, 5e-3) << r << " " << f.t_bar(it);
      EXPECT_GE(dp, f.L[idx] - 1e-9);
      ++checked;
    }
  }
  EXPECT_EQ(checked, 25);
}

TEST(BuildField, SolverDerivativesMatchDifferences) {
  const auto& f = einstein_field(64);
  int checked = 0;
  for (int it = 0; it < f.grid.time.count; ++it) {
    for (std::size_t s = 0; s < f.grid.space_size(); ++s) {
      const auto d = node_derivatives(f, f.L, s, it);
      if (!d) continue;
      const auto idx = f.index(s, it);
      EXPECT_NEAR(f.dt_L[idx], d->dt, 1e-3 * std::max(std::abs(d->dt), 1e-2));
      EXPECT_NEAR(f.grad_L[idx](0), d->df(0), 1e-3 * std::max(std::abs(d->df(0)), 1e-2));
      ++checked;
    }
  }
  EXPECT_GT(checked, 1000);
}

TEST(BuildField, UnresolvedNodesAreReported) {
  FieldOptions o;
  o.shooting.max_newton = 0;
  o.shooting.multistart = 0;
  o.shooting.hit_tol = 0.0;
  try {
    build_field(einstein3(), 0.2, einstein_grid(8), o);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnresolvedNodes);
  }
}

TEST(BuildField, GridMustMatchChart) {
  const GridSpec g{{make_axis(0.0, 1.0, 5), make_axis(0.0, 1.0, 5)}, make_axis(0.0, 0.1, 3)};
  try {
    build_field(einstein3(), 0.2, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GridMismatch);
  }
}

TEST(Inequalities, GaussianIsEqualityCase) {
  const GridSpec g{{make_axis(-1.0, 1.0, 17), make_axis(-1.0, 1.0, 17)}, make_axis(0.0, 0.5, 33)};
  const auto r = check_inequalities(build_field(gaussian2(), 1.0, g));
  EXPECT_TRUE(r.pass);
  EXPECT_LE(r.max_abs_di3, 1e-5);
  EXPECT_LE(r.max_abs_di1, 1e-5);
  EXPECT_GT(r.checked, 0u);
}

TEST(Inequalities, EinsteinBaseGridAndRefinement) {
  const auto fine = check_inequalities(einstein_field(128));
  EXPECT_TRUE(fine.pass) << fine.max_abs_di3 << " " << fine.min_di1 << " " << fine.max_di2;
  const auto ref = refine_inequalities(einstein_field(32), einstein_field(64));
  EXPECT_GE(ref.ratio_di3, 3.0);
  EXPECT_TRUE(ref.shrinks);
}

TEST(Inequalities, TooFewNodes) {
  const GridSpec g{{make_axis(0.5, 1.0, 3)}, make_axis(0.0, 0.1, 3)};
  try {
    check_inequalities(build_field(einstein3(), 0.2, g));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GridTooCoarse);
  }
}

TEST(SingularLimit, EinsteinConvergesToHalfDimension) {
  const auto& d = einstein_limit();
  ASSERT_TRUE(d.limit.has_value());
  EXPECT_TRUE(d.cauchy);
  // Raw fields approach 1.5 monotonically along i = 2..8.
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 7; ++i) {
    double sup = 0.0;
    for (double v : d.fields[i].l) sup = std::max(sup, std::abs(v - 1.5));
    EXPECT_LT(sup, prev);
    prev = sup;
  }
  for (double v : d.limit->l) EXPECT_NEAR(v, 1.5, 1e-3);
  ASSERT_TRUE(d.limit_inequalities.has_value());
  EXPECT_LE(d.limit_inequalities->max_abs_di1, 1e-4);
  EXPECT_LE(d.limit_inequalities->max_abs_di3, 1e-4);
  EXPECT_TRUE(d.limit->singular);
  EXPECT_EQ(d.limit->t0, 0.25);
}

TEST(SingularLimit, EinsteinBounds) {
  const auto& B = einstein_limit().bounds;
  EXPECT_TRUE(B.L_below_E);
  EXPECT_TRUE(B.G_stable);
  EXPECT_LE(B.G_growth, 0.02);
  EXPECT_TRUE(B.grad_ok);
  EXPECT_TRUE(B.time_ok);
  EXPECT_DOUBLE_EQ(B.grad_bound, 2.0 * std::sqrt(B.G));
  for (double L : B.max_L) EXPECT_LE(L, B.E);
}

TEST(SingularLimit, GaussianIsExact) {
  const GridSpec g{{make_axis(-1.0, 1.0, 9), make_axis(-1.0, 1.0, 9)}, make_axis(0.0, 0.25, 9)};
  const auto d = singular_limit(gaussian2(), geometric_sequence(1.0, 2, 12), g);
  for (std::size_t j = 0; j < g.size(); ++j) {
    const RVec q = d.limit->point(j % g.space_size());
    const double tb = g.time.node(static_cast<int>(j / g.space_size()));
    EXPECT_NEAR(d.limit->l[j], oracle::gaussian_l(q.squaredNorm(), tb, 1.0), 1e-6);
  }
  EXPECT_TRUE(d.limit_inequalities->pass);
}

TEST(SingularLimit, CylinderSoliton) {
  const auto& d = cylinder_limit(0);
  const auto& g = d.limit->grid;
  for (std::size_t j = 0; j < g.size(); ++j) {
    if (!std::isfinite(d.limit->l[j])) continue;
    const RVec q = d.limit->point(j % g.space_size());
    const double tau = 1.0 - g.time.node(static_cast<int>(j / g.space_size()));
    EXPECT_NEAR(d.limit->l[j], q(0) * q(0) / (4.0 * tau) + 1.0, 1e-4);
    if (q(0) == 0.0) {
      EXPECT_NEAR(d.limit->l[j], 1.0, 0.02);
    }
  }
}

TEST(SingularLimit, RejectsShortSequenceAndLateWindow) {
  EXPECT_THROW(singular_limit(einstein3(), geometric_sequence(0.25, 2, 5), einstein_limit_grid(8)), Error);
  const GridSpec late{{make_axis(0.0, 1.0, 8)}, make_axis(0.0, 0.2, 4)};
  EXPECT_THROW(singular_limit(einstein3(), geometric_sequence(0.25, 2, 8), late), Error);
}

TEST(LimitIndependence, EinsteinAntipodalBases) {
  const auto other = singular_limit(einstein3(kPi), geometric_sequence(0.25, 2, 12), einstein_limit_grid(32));
  EXPECT_LE(limit_independence_check(einstein_limit(), other), 2e-3);
  EXPECT_EQ(limit_independence_check(einstein_limit(), einstein_limit()), 0.0);
}

TEST(LimitIndependence, CylinderSameSlice) {
  EXPECT_LE(limit_independence_check(cylinder_limit(0), cylinder_limit(1)), 0.02);
}

TEST(LimitIndependence, Errors) {
  SingularLimitDiagnostics empty;
  try {
    limit_independence_check(empty, einstein_limit());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingLimitField);
  }
  try {
    limit_independence_check(einstein_limit(), cylinder_limit(0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GridMismatch);
  }
}
