#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "rflab/geometry.hpp"

using namespace rflab;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kPi = std::numbers::pi;

VectorXd pt(std::initializer_list<double> v) {
  VectorXd q(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) q(i++) = x;
  return q;
}

// Ricci tensor assembled from finite-difference Christoffel symbols of metric_at.
MatrixXd ricci_by_differences(const std::function<MatrixXd(const VectorXd&)>& g, const VectorXd& q, double h = 1e-4) {
  const Eigen::Index n = q.size();
  auto dg = [&](const VectorXd& x, Eigen::Index l) {
    VectorXd a = x, b = x;
    a(l) += h;
    b(l) -= h;
    return MatrixXd((g(a) - g(b)) / (2 * h));
  };
  // gamma[k](i,j) = Gamma^k_ij
  auto christoffel = [&](const VectorXd& x) {
    const MatrixXd gi = g(x).inverse();
    std::vector<MatrixXd> d(static_cast<std::size_t>(n));
    for (Eigen::Index l = 0; l < n; ++l) d[static_cast<std::size_t>(l)] = dg(x, l);
    std::vector<MatrixXd> gam(static_cast<std::size_t>(n), MatrixXd::Zero(n, n));
    for (Eigen::Index k = 0; k < n; ++k)
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
          double s = 0;
          for (Eigen::Index l = 0; l < n; ++l) {
            s += 0.5 * gi(k, l) * (d[static_cast<std::size_t>(i)](j, l) + d[static_cast<std::size_t>(j)](i, l) - d[static_cast<std::size_t>(l)](i, j));
          }
          gam[static_cast<std::size_t>(k)](i, j) = s;
        }
    return gam;
  };
  const double H = 1e-3;
  const auto G = christoffel(q);
  std::vector<std::vector<MatrixXd>> dG(static_cast<std::size_t>(n));
  for (Eigen::Index m = 0; m < n; ++m) {
    VectorXd a = q, b = q;
    a(m) += H;
    b(m) -= H;
    const auto Ga = christoffel(a), Gb = christoffel(b);
    for (Eigen::Index k = 0; k < n; ++k) dG[static_cast<std::size_t>(m)].push_back((Ga[static_cast<std::size_t>(k)] - Gb[static_cast<std::size_t>(k)]) / (2 * H));
  }
  MatrixXd ric = MatrixXd::Zero(n, n);
  auto u = [](Eigen::Index i) { return static_cast<std::size_t>(i); };
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      double s = 0;
      for (Eigen::Index k = 0; k < n; ++k) {
        s += dG[u(k)][u(k)](i, j) - dG[u(j)][u(k)](i, k);
        for (Eigen::Index l = 0; l < n; ++l) s += G[u(k)](k, l) * G[u(l)](i, j) - G[u(k)](j, l) * G[u(l)](i, k);
      }
      ric(i, j) = s;
    }
  return ric;
}

FlowHistory round_sphere_history(int intervals, double t_end) {
  FlowRunConfig cfg;
  cfg.t_end = t_end;
  return run_flow(round_sphere_profile(3, intervals), cfg).history;
}

}  // namespace

TEST(MetricAt, EinsteinInitialIsUnitRoundSphere) {
  const auto m = MetricModel::einstein_sphere(3, 6.0);
  EXPECT_DOUBLE_EQ(m.singular_time(), 0.25);
  const VectorXd q = pt({0.7, 1.1, 2.0});
  const MatrixXd g = m.metric_at(q, 0.0);
  const double s = std::sin(0.7), s1 = std::sin(1.1);
  EXPECT_NEAR(g(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(g(1, 1), s * s, 1e-15);
  EXPECT_NEAR(g(2, 2), s * s * s1 * s1, 1e-15);
  EXPECT_NEAR((m.metric_at(q, 0.125) - 0.5 * g).norm(), 0.0, 1e-15);
}

TEST(MetricAt, GaussianIsIdentity) {
  const auto m = MetricModel::gaussian_flat(2);
  EXPECT_EQ(m.metric_at(pt({3.0, -1.0}), 0.3), MatrixXd::Identity(2, 2));
  EXPECT_EQ(m.metric_at(pt({3.0, -1.0}), 7.0), MatrixXd::Identity(2, 2));
}

TEST(MetricAt, Errors) {
  const auto e = MetricModel::einstein_sphere(3, 6.0);
  try {
    e.metric_at(pt({4.0, 1.0, 1.0}), 0.0);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::OutOfChart);
  }
  try {
    e.metric_at(pt({1.0, 1.0, 1.0}), 0.25);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::PastSingularTime);
  }
  const auto h = round_sphere_history(16, 0.002);
  const auto w = MetricModel::numeric_warped(h, 1.0 / (4.0 * kPi * kPi));
  try {
    w.metric_at(pt({0.5, 1.0, 1.0}), 0.003);
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::NoFlowData);
  }
}

TEST(CurvatureAt, ClosedFormValues) {
  const auto e = MetricModel::einstein_sphere(3, 6.0);
  EXPECT_NEAR(e.curvature_at(pt({1.0, 1.0, 1.0}), 0.125).scalar, 12.0, 1e-12);
  const auto g = MetricModel::gaussian_flat(2).curvature_at(pt({1.0, 2.0}), 0.1);
  EXPECT_EQ(g.scalar, 0.0);
  EXPECT_EQ(g.rm_norm, 0.0);
  EXPECT_EQ(g.grad_R.norm(), 0.0);
  const auto c = MetricModel::shrinking_cylinder(3, 1.0).curvature_at(pt({0.3, 1.0, 2.0}), 0.0);
  EXPECT_NEAR(c.scalar, 1.0, 1e-14);
}

TEST(CurvatureAt, TraceAndEinsteinIdentities) {
  for (const auto& m : {MetricModel::einstein_sphere(3, 6.0), MetricModel::einstein_sphere(4, 2.0), MetricModel::shrinking_cylinder(3, 1.0),
                        MetricModel::shrinking_cylinder(4, 2.0)}) {
    for (double t : {-1.0, 0.0, 0.5 * m.singular_time(), 0.99 * m.singular_time()}) {
      VectorXd q = VectorXd::Constant(m.dimension(), 1.0);
      const auto c = m.curvature_at(q, t);
      const MatrixXd g = m.metric_at(q, t);
      const double tr = (g.inverse() * c.ric).trace();
      EXPECT_NEAR(tr / c.scalar, 1.0, 1e-10);
      EXPECT_LT((c.ric - c.ric.transpose()).norm(), 1e-12);
      if (m.family() == Family::EinsteinSphere) {
        EXPECT_NEAR(c.scalar * (m.singular_time() - t), m.dimension() / 2.0, 1e-10);
        EXPECT_LT((c.ric - c.scalar / m.dimension() * g).norm(), 1e-10 * c.scalar);
      }
    }
  }
}

TEST(CurvatureAt, MatchesChristoffelAssembly) {
  const auto cyl = MetricModel::shrinking_cylinder(3, 1.0);
  const auto ein = MetricModel::einstein_sphere(3, 6.0);
  for (const auto* m : {&cyl, &ein}) {
    const VectorXd q = pt({1.1, 0.9, 2.0});
    const double t = 0.1;
    const MatrixXd fd = ricci_by_differences([&](const VectorXd& x) { return m->metric_at(x, t); }, q);
    EXPECT_LT((fd - m->curvature_at(q, t).ric).norm(), 1e-5) << to_string(m->family());
  }
}

TEST(FlowEquation, CentredDifferenceIsSecondOrder) {
  const auto h = round_sphere_history(32, 0.004);
  const double Tn = 1.0 / (4.0 * kPi * kPi);
  const auto warped = MetricModel::numeric_warped(h, Tn);
  const auto e = MetricModel::einstein_sphere(3, 6.0);
  const auto c = MetricModel::shrinking_cylinder(3, 1.0);
  const auto g = MetricModel::gaussian_flat(3);
  for (const auto* m : {&e, &c, &g}) {
    const VectorXd q = pt({0.8, 1.2, 2.5});
    const double t = 0.1;
    auto err = [&](double dt) {
      const MatrixXd d = (m->metric_at(q, t + dt) - m->metric_at(q, t - dt)) / (2 * dt);
      return (d + 2.0 * m->curvature_at(q, t).ric).norm();
    };
    const double e1 = err(1e-2), e2 = err(5e-3);
    if (m->family() == Family::GaussianFlat || e1 < 1e-12) {
      EXPECT_LT(e1, 1e-12);
    } else {
      EXPECT_NEAR(e1 / e2, 4.0, 0.1) << to_string(m->family());
    }
  }
  // Tabulated flow: the metric is affine in t for the shrinking sphere, so
  // the centred difference is exact up to interpolation and flow error.
  const VectorXd q = pt({0.3, 1.2, 2.5});
  const double t = 0.5 * (h.times()[20] + h.times()[21]);
  const double dt = 0.25 * (h.times()[21] - h.times()[20]);
  const MatrixXd d = (warped.metric_at(q, t + dt) - warped.metric_at(q, t - dt)) / (2 * dt);
  const MatrixXd ric = warped.curvature_at(q, t).ric;
  EXPECT_LT((d + 2.0 * ric).norm() / ric.norm(), 1e-3);
}

TEST(MetricAt, PositiveDefiniteOnSamples) {
  for (const auto& m : {MetricModel::einstein_sphere(3, 6.0), MetricModel::shrinking_cylinder(3, 1.0)}) {
    for (double r = 0.1; r < 3.0; r += 0.3)
      for (double t : {0.0, 0.2}) {
        const MatrixXd g = m.metric_at(pt({r, 1.0, 4.0}), t);
        EXPECT_GT(Eigen::SelfAdjointEigenSolver<MatrixXd>(g).eigenvalues().minCoeff(), 0.0);
        EXPECT_LT((g - g.transpose()).norm(), 1e-12);
      }
  }
}

TEST(NumericWarped, RoundSphereMatchesEinstein) {
  // Round S^3 of radius 1/pi: R0 = 6 pi^2, polar angle r = pi x.
  const auto h = round_sphere_history(64, 0.006);
  const double T = 1.0 / (4.0 * kPi * kPi);
  const auto w = MetricModel::numeric_warped(h, T);
  const auto e = MetricModel::einstein_sphere(3, 6.0 * kPi * kPi);
  EXPECT_NEAR(e.singular_time(), T, 1e-15);
  for (double x : {0.0, 0.2, 0.5, 0.9}) {
    for (double t : {0.0, 0.002, 0.0055}) {
      const auto cw = w.curvature_at(pt({x, 1.0, 1.0}), t);
      const auto ce = e.curvature_at(pt({kPi * x, 1.0, 1.0}), t);
      EXPECT_NEAR(cw.scalar / ce.scalar, 1.0, 1e-5);
      EXPECT_NEAR(cw.grad_R(0), 0.0, 1e-4 * ce.scalar);
      const MatrixXd gw = w.metric_at(pt({x, 1.0, 1.0}), t);
      EXPECT_NEAR(gw(0, 0), kPi * kPi * e.metric_at(pt({kPi * x, 1.0, 1.0}), t)(0, 0), 1e-6);
    }
  }
  const ReducedChart cw(w, pt({0.0, 0.0, 0.0}));
  const ReducedChart ce(e, pt({0.0, 0.0, 0.0}));
  RVec x(1), r(1);
  x << 0.3;
  r << 0.3 * kPi;
  EXPECT_NEAR(cw.volume_density(x, 0.003), ce.volume_density(r, 0.003) * kPi, 1e-5 * ce.volume_density(r, 0.003) * kPi);
}

TEST(NumericWarped, SnapshotRoundTrip) {
  const auto h = round_sphere_history(16, 0.001);
  const auto w = MetricModel::numeric_warped(h, 0.03);
  const auto back = MetricModel::from_json(nlohmann::json::parse(w.to_json().dump()));
  const VectorXd q = pt({0.37, 1.0, 1.0});
  EXPECT_EQ(back.metric_at(q, 0.0007), w.metric_at(q, 0.0007));
  const auto e = MetricModel::from_json(MetricModel::einstein_sphere(3, 6.0).to_json());
  EXPECT_EQ(e.singular_time(), 0.25);
}

TEST(ReducedChart, LocateAndImages) {
  const auto e = MetricModel::einstein_sphere(3, 6.0);
  const ReducedChart c(e, pt({0.0, 0.0, 0.0}));
  EXPECT_NEAR(c.locate(pt({1.3, 0.4, 5.0}))(0), 1.3, 1e-12);
  const ReducedChart c2(e, pt({kPi / 2, kPi / 2, 0.0}));
  EXPECT_NEAR(c2.locate(pt({kPi / 2, kPi / 2, kPi}))(0), kPi, 1e-12);
  RVec r(1);
  r << 1.0;
  const auto im = c.images(r);
  ASSERT_EQ(im.size(), 2u);
  EXPECT_NEAR(im[1](0), 2 * kPi - 1.0, 1e-15);
  EXPECT_NEAR(c.canonical(im[1])(0), 1.0, 1e-12);
}

TEST(SolitonResidual, ClosedFormSolitons) {
  {
    const auto m = MetricModel::gaussian_flat(2, 1.0);
    const ReducedChart c(m, pt({0.0, 0.0}));
    const auto f = canonical_potential(c, {make_axis(-3, 3, 13), make_axis(-3, 3, 13)}, 0.5);
    EXPECT_LE(soliton_residual(m, f, 0.5), 1e-8);
  }
  {
    const auto m = MetricModel::einstein_sphere(3, 6.0);
    const ReducedChart c(m, pt({0.0, 0.0, 0.0}));
    for (double t : {-0.75, 0.0, 0.2}) {
      const auto f = canonical_potential(c, {make_axis(0, kPi, 33)}, t);
      EXPECT_LE(soliton_residual(m, f, t), 1e-10);
    }
  }
  {
    const auto m = MetricModel::shrinking_cylinder(3, 1.0);
    const ReducedChart c(m, pt({0.0, 0.0, 0.0}));
    const auto f = canonical_potential(c, {make_axis(-4, 4, 17), make_axis(0, kPi, 17)}, 0.0);
    EXPECT_LE(soliton_residual(m, f, 0.0), 1e-6);
    for (const auto& H : f.hess) EXPECT_LT((H - H.transpose()).norm(), 1e-8);
  }
}

TEST(SolitonResidual, DetectsNonSoliton) {
  const auto m = MetricModel::shrinking_cylinder(3, 1.0);
  const ReducedChart c(m, pt({0.0, 0.0, 0.0}));
  const auto f = analytic_potential(c, {make_axis(-2, 2, 9), make_axis(0, kPi, 9)}, 0.0, [](const RVec& x) {
    RVec df = RVec::Zero(2);
    df(0) = x(0) / 2.0 * 1.05;
    RMat d2 = RMat::Zero(2, 2);
    d2(0, 0) = 0.5 * 1.05;
    return PotentialJet{1.05 * x(0) * x(0) / 4.0, df, d2};
  });
  EXPECT_NEAR(soliton_residual(m, f, 0.0), 0.025, 1e-12);
}

TEST(SolitonResidual, GridMismatch) {
  const auto m = MetricModel::shrinking_cylinder(3, 1.0);
  const ReducedChart c(m, pt({0.0, 0.0, 0.0}));
  try {
    canonical_potential(c, {make_axis(-2, 2, 9)}, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GridMismatch);
  }
  const auto f = canonical_potential(c, {make_axis(-2, 2, 9), make_axis(0, kPi, 9)}, 0.0);
  try {
    soliton_residual(m, f, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::GridMismatch);
  }
}

TEST(GradConst, ClosedFormConstants) {
  {
    const auto m = MetricModel::gaussian_flat(2, 1.0);
    const ReducedChart c(m, pt({0.0, 0.0}));
    const auto g = gradconst_check(m, canonical_potential(c, {make_axis(-3, 3, 13), make_axis(-3, 3, 13)}, 0.0), 0.0);
    EXPECT_NEAR(g.C, 0.0, 1e-12);
    EXPECT_LE(g.spread, 1e-10);
  }
  {
    const auto m = MetricModel::einstein_sphere(3, 6.0);
    const ReducedChart c(m, pt({0.0, 0.0, 0.0}));
    const double t = m.singular_time() - 1.0;
    const auto g = gradconst_check(m, canonical_potential(c, {make_axis(0, kPi, 33)}, t), t);
    EXPECT_NEAR(g.C, 1.5, 1e-12);
    EXPECT_LE(g.spread, 1e-8);
  }
  {
    const auto m = MetricModel::shrinking_cylinder(3, 1.0);
    const ReducedChart c(m, pt({0.0, 0.0, 0.0}));
    const auto g = gradconst_check(m, canonical_potential(c, {make_axis(-4, 4, 17), make_axis(0, kPi, 9)}, 0.0), 0.0);
    // R + |grad f|^2 - f = (n-1)/2 + y^2/4 - y^2/4 at unit time to singularity.
    EXPECT_NEAR(g.C, 1.0, 1e-12);
    EXPECT_LE(g.spread, 1e-12);
  }
}

TEST(PotentialField, SampledQuadraticMatchesAnalytic) {
  const auto m = MetricModel::gaussian_flat(2, 1.0);
  const ReducedChart c(m, pt({0.0, 0.0}));
  const std::vector<Axis> axes{make_axis(-2, 2, 21), make_axis(-2, 2, 21)};
  const auto exact = canonical_potential(c, axes, 0.0);
  const auto sampled = sampled_potential(c, axes, 0.0, exact.f);
  for (std::size_t s = 0; s < exact.size(); ++s) {
    EXPECT_LT((exact.hess[s] - sampled.hess[s]).norm(), 1e-9);
    EXPECT_LT((exact.grad[s] - sampled.grad[s]).norm(), 1e-9);
  }
}
