#include "mfcl/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "mfcl/presets.hpp"

namespace {

using mfcl::CoefficientSpec;
using mfcl::EmpiricalMeasure;
using mfcl::LqParams;
using mfcl::MatrixXd;
using mfcl::MeasureFacts;

LqParams unit_sigma0_params() {
  LqParams p;
  p.sigma0 = 1.0;
  p.a_max = 1.0;
  p.c = 0.0;  // F = 0 for the Hamiltonian closed-form examples
  return p;
}

MeasureFacts dummy_facts() {
  static const double atom = 0.0;
  return MeasureFacts::from_states(1, &atom, 1);
}

TEST(Hamiltonian, QuadraticClosedFormAgainstGridSearch) {
  auto spec = mfcl::make_lq_spec(unit_sigma0_params());
  const auto mu = dummy_facts();

  double z = 0.0;
  auto h = mfcl::hamiltonian(spec, 0.3, mu, &z);
  EXPECT_DOUBLE_EQ(h.value, 0.0);  // F(mu) = 0 here
  EXPECT_DOUBLE_EQ(h.argmax[0], 0.0);

  z = 0.5;
  h = mfcl::hamiltonian(spec, 0.3, mu, &z);
  EXPECT_NEAR(h.value, 0.125, 1e-12);
  EXPECT_NEAR(h.argmax[0], 0.5, 1e-12);

  z = 2.0;  // boundary optimum: a_max |z| - a_max^2 / 2
  h = mfcl::hamiltonian(spec, 0.3, mu, &z);
  EXPECT_NEAR(h.value, 1.5, 1e-12);
  EXPECT_NEAR(h.argmax[0], 1.0, 1e-12);

  // grid-search route agrees to 1e-6 at G = 10001
  CoefficientSpec grid_spec = spec;
  grid_spec.quadratic_hamiltonian = false;
  grid_spec.b1 = [](double, const MeasureFacts&, const double* a,
                    double* out) { out[0] = a[0]; };
  grid_spec.hamiltonian_grid = 10001;
  for (double zz : {0.0, 0.5, 2.0, -0.73}) {
    auto exact = mfcl::hamiltonian(spec, 0.1, mu, &zz);
    auto grid = mfcl::hamiltonian(grid_spec, 0.1, mu, &zz);
    EXPECT_NEAR(exact.value, grid.value, 1e-6);
    EXPECT_NEAR(exact.argmax[0], grid.argmax[0], 1e-3);
  }
}

TEST(Hamiltonian, EnvelopeProperty) {
  auto spec = mfcl::make_lq_spec(LqParams{});
  const auto mu = dummy_facts();
  mfcl::CounterRng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto blk = rng.at(mfcl::StreamRole::kScratch, trial, 0, 0);
    const double t = blk.uniform(0);
    double z = 6.0 * blk.uniform(1) - 3.0;
    const auto h = mfcl::hamiltonian(spec, t, mu, &z);

    double a = spec.control.lo[0] +
               (spec.control.hi[0] - spec.control.lo[0]) * blk.uniform(2);
    double b1v;
    spec.eval_b1(t, mu, &a, &b1v);
    EXPECT_GE(h.value, spec.running_reward(t, mu, &a) + b1v * z - 1e-9);

    spec.eval_b1(t, mu, h.argmax.data(), &b1v);
    EXPECT_NEAR(h.value, spec.running_reward(t, mu, h.argmax.data()) + b1v * z,
                1e-9);
  }
}

TEST(Hamiltonian, ConvexAndLipschitzInZ) {
  auto spec = mfcl::make_lq_spec(LqParams{});
  const auto mu = dummy_facts();
  mfcl::CounterRng rng(6);
  const double b1_sup = spec.b1_bound;
  for (int trial = 0; trial < 200; ++trial) {
    auto blk = rng.at(mfcl::StreamRole::kScratch, trial, 1, 0);
    double z1 = 8.0 * blk.uniform(0) - 4.0;
    double z2 = 8.0 * blk.uniform(1) - 4.0;
    double zm = 0.5 * (z1 + z2);
    const double h1 = mfcl::hamiltonian(spec, 0.2, mu, &z1).value;
    const double h2 = mfcl::hamiltonian(spec, 0.2, mu, &z2).value;
    const double hm = mfcl::hamiltonian(spec, 0.2, mu, &zm).value;
    EXPECT_LE(hm, 0.5 * h1 + 0.5 * h2 + 1e-9);
    // |H(z1) - H(z2)| <= sup|b1| |z1 - z2|
    EXPECT_LE(std::abs(h1 - h2), b1_sup * std::abs(z1 - z2) + 1e-9);
  }
}

TEST(Riccati, TerminalAndDegenerateCases) {
  LqParams p;
  auto sol = mfcl::solve_riccati(p);
  EXPECT_DOUBLE_EQ(sol.P.back(), p.gamma);
  EXPECT_DOUBLE_EQ(sol.q.back(), 0.0);
  const double h = 0.6;
  EXPECT_NEAR(sol.value(p.T, p.theta + h), -p.gamma * h * h, 1e-12);
  for (double P : sol.P) EXPECT_GE(P, 0.0);

  // value is symmetric in m around theta
  EXPECT_NEAR(sol.value(0.25, p.theta + h), sol.value(0.25, p.theta - h),
              1e-12);

  LqParams zero = p;
  zero.c = 0;
  zero.gamma = 0;
  auto flat = mfcl::solve_riccati(zero);
  EXPECT_NEAR(flat.value(0.0, -1.3), 0.0, 1e-14);
  EXPECT_NEAR(flat.value(0.7, 2.0), 0.0, 1e-14);

  EXPECT_TRUE(sol.feedback_interior(1.5));
  EXPECT_NEAR(sol.feedback(0.0, p.theta + 0.5),
              -2.0 * sol.P_at(0.0) * 0.5, 1e-12);
}

TEST(Riccati, ClosedFormCheckAtCZero) {
  // c = 0: Pdot = 2P^2 gives P(t) = gamma / (1 + 2 gamma (T - t)).
  LqParams p;
  p.c = 0.0;
  p.gamma = 0.8;
  auto sol = mfcl::solve_riccati(p);
  for (double t : {0.0, 0.31, 0.77, 1.0}) {
    const double exact = p.gamma / (1.0 + 2.0 * p.gamma * (p.T - t));
    EXPECT_NEAR(sol.P_at(t), exact, 1e-10);
  }
}

TEST(ValidateSpec, LqPassesWithZeroResidual) {
  auto spec = mfcl::make_lq_spec(LqParams{});
  auto rep = mfcl::validate_spec(spec);
  EXPECT_TRUE(rep.passed);
  EXPECT_LE(rep.decomposition_residual, 1e-12);
  EXPECT_GT(rep.sigma0_condition, 0.0);
}

TEST(ValidateSpec, FlagsUnboundedB1) {
  auto spec = mfcl::make_lq_spec(LqParams{});
  spec.quadratic_hamiltonian = false;
  const double eps = 1e-6;
  spec.b1 = [eps](double, const MeasureFacts&, const double* a, double* out) {
    out[0] = a[0] / eps;
  };
  spec.full_drift = nullptr;
  auto rep = mfcl::validate_spec(spec);
  EXPECT_FALSE(rep.passed);
  ASSERT_FALSE(rep.messages.empty());
  EXPECT_NE(rep.messages[0].find("b1 bound"), std::string::npos);
}

TEST(ValidateSpec, SingularSigma0Throws) {
  auto spec = mfcl::make_lq_spec(LqParams{});
  spec.sigma0 = {0, 0, 0, 0};
  EXPECT_THROW(mfcl::validate_spec(spec), std::domain_error);
}

TEST(Rewards, SpecExamples) {
  LqParams p;
  auto spec = mfcl::make_lq_spec(p);

  MatrixXd at_theta(1, 1);
  at_theta << p.theta;
  const double a0 = 0.0;
  // L = -|a|^2/2 + F with F = -c (mean - theta)^2 = 0 at the target
  EXPECT_DOUBLE_EQ(
      mfcl::eval_running_reward(spec, 0.0, EmpiricalMeasure(at_theta), &a0),
      0.0);
  EXPECT_DOUBLE_EQ(mfcl::eval_terminal_reward(spec, EmpiricalMeasure(at_theta)),
                   0.0);

  const double big = 2 * p.a_max;
  EXPECT_THROW(
      mfcl::eval_running_reward(spec, 0.0, EmpiricalMeasure(at_theta), &big),
      std::invalid_argument);

  // <mu, x^2> on {1,2,3} with equal weights
  CoefficientSpec quad = spec;
  quad.g = [](const MeasureFacts& mu) {
    return mu.expectation([](const double* x) { return x[0] * x[0]; });
  };
  MatrixXd pts(3, 1);
  pts << 1, 2, 3;
  EXPECT_NEAR(mfcl::eval_terminal_reward(quad, EmpiricalMeasure(pts)),
              14.0 / 3.0, 1e-14);
}

TEST(Presets, InteractionVariantsValidate) {
  LqParams p;
  mfcl::LqPresetOptions opt;
  opt.interaction = 0.5;
  auto interact = mfcl::make_lq_spec(p, opt);
  EXPECT_TRUE(mfcl::validate_spec(interact).passed);
  EXPECT_EQ(interact.name, "lq-interact");

  auto tanh_spec = mfcl::make_tanh_drift_spec(p, 0.5);
  EXPECT_TRUE(mfcl::validate_spec(tanh_spec).passed);
  EXPECT_EQ(tanh_spec.name, "tanh-drift");
  EXPECT_FALSE(tanh_spec.analytic_law);

  // OU conditional variance settles toward sigma^2 / (2 kappa)
  double mean, cov, B = 0.0;
  interact.analytic_law(50.0, &B, &mean, &cov);
  EXPECT_NEAR(cov, p.sigma * p.sigma / (2.0 * 0.5), 1e-10);
}

}  // namespace
