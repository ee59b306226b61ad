#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "rflab/flow.hpp"

using namespace rflab;

namespace {

constexpr double kPi = std::numbers::pi;

// Round sphere of radius rho0 shrinks as rho^2 = rho0^2 - 2 (n - 1) t.
double sphere_scale(int n, double rho0, double t) { return std::sqrt(1.0 - 2.0 * (n - 1) * t / (rho0 * rho0)); }

double max_phi_error(const WarpedFlowState& s, double scale) {
  double err = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    const double exact = scale * std::sin(kPi * s.x[j]) / kPi;
    err = std::max(err, std::abs(s.phi[j] - exact));
  }
  return err;
}

WarpedFlowState advance(WarpedFlowState s, double dt, double t_end) {
  while (s.t < t_end - 1e-15) s = step_flow(s, std::min(dt, t_end - s.t));
  return s;
}

FlowHistory synthetic(double T, double C, double r, int count, double t_first = 0.0) {
  FlowHistory h;
  for (int i = 0; i < count; ++i) {
    const double t = T - (T - t_first) * std::pow(0.8, i);
    h.append_synthetic(t, C / std::pow(T - t, r));
  }
  return h;
}

}  // namespace

TEST(StepFlow, RoundSphereMatchesEinstein) {
  const int n = 3;
  const auto s0 = round_sphere_profile(n, 32);
  const double T = 1.0 / (kPi * kPi) / (2.0 * (n - 1));
  FlowRunConfig cfg;
  cfg.t_end = T / 2;
  const auto run = run_flow(s0, cfg);
  const auto& last = run.history.states().back();
  EXPECT_DOUBLE_EQ(last.t, T / 2);
  const double scale = sphere_scale(n, 1.0 / kPi, last.t);
  EXPECT_LE(max_phi_error(last, scale) / (scale / kPi), 1e-4);
  for (double p : last.psi) EXPECT_NEAR(p / scale, 1.0, 1e-4);
}

TEST(StepFlow, FlatCylinderRadius) {
  const int n = 4;
  const double phi0 = 0.8;
  auto s = cylinder_profile(n, 16, phi0);
  s = advance(s, 2.5e-4, 0.1);
  for (double p : s.phi) EXPECT_NEAR(p * p / (phi0 * phi0 - 2.0 * (n - 2) * 0.1), 1.0, 2e-6);
  for (double p : s.psi) EXPECT_NEAR(p, 1.0, 1e-12);
}

TEST(StepFlow, ZeroStepIsIdentity) {
  const auto s = dumbbell_profile(3, 40, 0.5);
  const auto t = step_flow(s, 0.0);
  EXPECT_EQ(t.t, s.t);
  EXPECT_EQ(t.phi, s.phi);
  EXPECT_EQ(t.psi, s.psi);
  EXPECT_EQ(t.w, s.w);
}

TEST(StepFlow, CflViolation) {
  const auto s = round_sphere_profile(3, 32);
  try {
    step_flow(s, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CflViolation);
  }
}

TEST(StepFlow, SymmetryPreserved) {
  FlowRunConfig cfg;
  cfg.max_steps = 2000;
  const auto run = run_flow(dumbbell_profile(3, 64, 0.6), cfg);
  const auto& s = run.history.states().back();
  const std::size_t m = s.size();
  double worst = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    worst = std::max(worst, std::abs(s.phi[j] - s.phi[m - 1 - j]));
    worst = std::max(worst, std::abs(s.psi[j] - s.psi[m - 1 - j]));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(StepFlow, ConvergenceOrder) {
  const int n = 3;
  const double T = 1.0 / (kPi * kPi) / (2.0 * (n - 1));
  const double t_end = 0.0096;
  ASSERT_LT(t_end, T);
  std::vector<double> errs;
  for (double dt : {8e-4, 4e-4, 2e-4}) {
    const auto s = advance(round_sphere_profile(n, 8), dt, t_end);
    errs.push_back(max_phi_error(s, sphere_scale(n, 1.0 / kPi, t_end)));
  }
  for (std::size_t i = 0; i + 1 < errs.size(); ++i) EXPECT_GE(std::log2(errs[i] / errs[i + 1]), 1.8) << errs[i] << " " << errs[i + 1];
}

TEST(StepFlow, SpatialConvergenceOfRicciRates) {
  // w evolves by -(K_rad + (n-2) K_sph); compare the discrete rate against the
  // rate from a much finer grid at shared nodes.
  std::vector<double> errs;
  auto rate_at_quarter = [](int N) {
    const auto s = dumbbell_profile(3, N, 0.5);
    const auto c = warped_curvature(s);
    const std::size_t j = static_cast<std::size_t>(N / 4);
    return -(c.k_rad[j] + c.k_sph[j]);
  };
  const double ref = rate_at_quarter(1024);
  for (int N : {32, 64, 128}) errs.push_back(std::abs(rate_at_quarter(N) - ref));
  for (std::size_t i = 0; i + 1 < errs.size(); ++i) EXPECT_GE(std::log2(errs[i] / errs[i + 1]), 1.8);
}

TEST(StepFlow, EinsteinRunScalarCurvature) {
  const int n = 3;
  const double T = 1.0 / (kPi * kPi) / (2.0 * (n - 1));
  FlowRunConfig cfg;
  cfg.t_end = 0.9 * T;
  const auto run = run_flow(round_sphere_profile(n, 32), cfg);
  for (const auto& s : run.history.states()) {
    const auto c = warped_curvature(s);
    for (double R : c.scalar) EXPECT_NEAR(R * 2.0 * (T - s.t) / n, 1.0, 1e-3);
  }
}

TEST(SingularTime, EinsteinSynthetic) {
  const double T = 0.25;
  const auto h = synthetic(T, 6.0, 1.0, 30);
  const auto est = estimate_singular_time(h);
  EXPECT_NEAR(est.T, T, 1e-3);
  EXPECT_GT(est.T, h.times().back());
  EXPECT_GE(est.uncertainty, 0.0);
}

TEST(SingularTime, ConstantCurvatureHasNoTrend) {
  FlowHistory h;
  for (int i = 0; i < 20; ++i) h.append_synthetic(0.1 * i, 3.0);
  try {
    estimate_singular_time(h);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoBlowupTrend);
  }
}

TEST(TypeA, SyntheticExponent) {
  const double T = 1.0;
  const auto h = synthetic(T, 2.0, 1.3, 60);
  const auto est = fit_type_a(h, T);
  EXPECT_NEAR(est.r, 1.3, 0.02);
  EXPECT_NEAR(est.C / 2.0, 1.0, 0.05);
  EXPECT_EQ(est.verdict, BlowupClass::TypeA);
}

TEST(TypeA, EinsteinAndCylinderRunsAreTypeI) {
  {
    const int n = 3;
    FlowRunConfig cfg;
    cfg.limits.max_curvature = 1e6;
    const auto run = run_flow(round_sphere_profile(n, 16), cfg);
    ASSERT_TRUE(run.hit_guard);
    const auto T = estimate_singular_time(run.history);
    EXPECT_NEAR(T.T, 1.0 / (kPi * kPi) / 4.0, 1e-4);
    const auto est = fit_type_a(run.history, T.T);
    EXPECT_NEAR(est.r, 1.0, 0.05);
    EXPECT_EQ(est.verdict, BlowupClass::TypeI);
  }
  {
    const int n = 3;
    FlowRunConfig cfg;
    cfg.limits.max_curvature = 1e6;
    const auto run = run_flow(cylinder_profile(n, 8, 1.0), cfg);
    ASSERT_TRUE(run.hit_guard);
    const auto T = estimate_singular_time(run.history);
    EXPECT_NEAR(T.T, 0.5, 1e-4);
    EXPECT_NEAR(fit_type_a(run.history, T.T).r, 1.0, 0.05);
  }
}

TEST(TypeA, InsufficientTail) {
  FlowHistory h;
  h.append_synthetic(0.0, 1.0);
  h.append_synthetic(0.1, 2.0);
  try {
    fit_type_a(h, 0.2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InsufficientTail);
  }
}

TEST(LowerBound, EinsteinPassesConstructedViolationFails) {
  const double T = 0.25;
  const auto ok = blowup_lower_bound_check(synthetic(T, 1.0, 1.0, 20), T);
  EXPECT_TRUE(ok.holds);
  EXPECT_NEAR(ok.min_ratio, 8.0, 1e-12);
  const auto bad = blowup_lower_bound_check(synthetic(T, 1.0 / 16.0, 1.0, 20), T);
  EXPECT_FALSE(bad.holds);
  EXPECT_NEAR(bad.min_ratio, 0.5, 1e-12);
}

TEST(Neckpinch, FiniteTimeAndLowerBound) {
  FlowRunConfig cfg;
  cfg.limits.max_curvature = 1e5;
  const auto run = run_flow(dumbbell_profile(3, 64, 0.7), cfg);
  ASSERT_TRUE(run.hit_guard);
  const auto& k = run.history.max_rm();
  const std::size_t tail = k.size() / 2;
  for (std::size_t i = tail + 1; i < k.size(); ++i) EXPECT_GT(k[i], k[i - 1]);
  const auto T = estimate_singular_time(run.history);
  EXPECT_GT(T.T, run.history.times().back());
  EXPECT_GT(T.uncertainty, 0.0);
  EXPECT_TRUE(blowup_lower_bound_check(run.history, T.T).holds);
  // The neck pinches: smallest interior phi is at the middle.
  const auto& s = run.history.states().back();
  const auto mid = s.size() / 2;
  EXPECT_LT(s.phi[mid], 0.5 * s.phi[s.size() / 4]);
}

TEST(History, SerializationRoundTrip) {
  FlowRunConfig cfg;
  cfg.max_steps = 30;
  cfg.store_every = 10;
  const auto run = run_flow(dumbbell_profile(3, 20, 0.4), cfg);
  std::stringstream ss;
  write_flow_history(ss, run.history, "abc123");
  const auto back = read_flow_history(ss);
  ASSERT_EQ(back.size(), run.history.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.times()[i], run.history.times()[i]);
    EXPECT_EQ(back.max_rm()[i], run.history.max_rm()[i]);
    const auto& a = back.state(i);
    const auto& b = run.history.state(i);
    EXPECT_EQ(a.phi, b.phi);
    EXPECT_EQ(a.psi, b.psi);
    EXPECT_EQ(a.w, b.w);
    EXPECT_EQ(a.anchor, b.anchor);
    EXPECT_EQ(a.topology, b.topology);
    EXPECT_EQ(a.n, b.n);
  }
}

TEST(History, RejectsNonIncreasingTimes) {
  FlowHistory h;
  h.append_synthetic(1.0, 1.0);
  EXPECT_THROW(h.append_synthetic(1.0, 2.0), Error);
}
