#include "mfcl/particle.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "mfcl/presets.hpp"
#include "mfcl/stats.hpp"

namespace {

using mfcl::CoefficientSpec;
using mfcl::CounterRng;
using mfcl::LqParams;
using mfcl::MeasureFacts;
using mfcl::Policy;
using mfcl::TimeGrid;

CoefficientSpec bare_spec(double sigma, double sigma0) {
  CoefficientSpec spec;
  spec.d = 1;
  spec.control = mfcl::ControlBox::symmetric(1, 2.0);
  spec.nu0 = mfcl::InitialLaw::gaussian1d(0.3, 0.25);
  spec.sigma_const = {sigma, 0, 0, 0};
  spec.sigma0 = {sigma0, 0, 0, 0};
  spec.drift_controlled = false;
  spec.full_drift = [](double, const double*, const MeasureFacts&,
                       const double* a, double* out) { out[0] = a[0]; };
  return spec;
}

TEST(Simulate, FrozenDynamicsKeepInitials) {
  auto spec = bare_spec(0.0, 0.0);
  spec.full_drift = [](double, const double*, const MeasureFacts&,
                       const double*, double* out) { out[0] = 0.0; };
  CounterRng rng(11);
  auto policy = Policy::constant(1, {0.0, 0.0});
  auto traj = mfcl::simulate_controlled_system(spec, policy, 16,
                                               TimeGrid(1.0, 20), rng);
  for (int k = 0; k < 16; ++k) {
    EXPECT_EQ(traj.slice(20)[k], traj.slice(0)[k]);
  }
}

TEST(Simulate, DeterministicOdeWithUnitControl) {
  // b = a, sigma = sigma0 = 0, a = 1: X_T = xi + T exactly.
  auto spec = bare_spec(0.0, 0.0);
  CounterRng rng(12);
  auto policy = Policy::constant(1, {1.0, 0.0});
  const TimeGrid grid(1.0, 40);
  auto traj = mfcl::simulate_controlled_system(spec, policy, 8, grid, rng);
  for (int k = 0; k < 8; ++k) {
    EXPECT_NEAR(traj.slice(40)[k], traj.slice(0)[k] + 1.0, 1e-12);
  }
}

TEST(Simulate, TerminalVarianceMatchesGaussianClosedForm) {
  // b = 0, constant sigma, sigma0: law of X_T is exact at any step size.
  const double sigma = 0.7, sigma0 = 0.4, T = 1.0, v0 = 0.25;
  auto spec = bare_spec(sigma, sigma0);
  CounterRng rng(13);
  const int N = 10000;
  auto traj = mfcl::simulate_controlled_system(
      spec, Policy::constant(1, {0.0, 0.0}), N, TimeGrid(T, 4), rng);
  // conditional on B the terminal cloud is Gaussian with variance
  // v0 + sigma^2 T; the sigma0 term is common to all particles
  const auto facts = traj.facts_at(4);
  const double expect_var = v0 + sigma * sigma * T;
  const double se = expect_var * std::sqrt(2.0 / (N - 1));
  EXPECT_NEAR(facts.var1(), expect_var, 3.0 * se);

  // across replications the full variance picks up sigma0^2 T as well
  mfcl::RunningStats terminal;
  for (int rep = 0; rep < 400; ++rep) {
    auto t2 = mfcl::simulate_controlled_system(
        spec, Policy::constant(1, {0.0, 0.0}), 25, TimeGrid(T, 4), rng, rep);
    for (int k = 0; k < 25; ++k) terminal.add(t2.slice(4)[k]);
  }
  const double full_var = v0 + (sigma * sigma + sigma0 * sigma0) * T;
  EXPECT_NEAR(terminal.variance(), full_var,
              3.0 * full_var * std::sqrt(2.0 / 400));
}

TEST(Simulate, SameSeedBitwiseIdentical) {
  auto spec = mfcl::make_lq_spec(LqParams{});
  CounterRng rng(21);
  const TimeGrid grid(1.0, 25);
  auto a = mfcl::simulate_mkv_cloud(spec, 64, grid, rng, 3);
  auto b = mfcl::simulate_mkv_cloud(spec, 64, grid, rng, 3);
  EXPECT_EQ(a.states, b.states);
  EXPECT_EQ(a.common_path, b.common_path);
}

// Permuting the (xi_k, W^k) streams permutes particle paths and leaves the
// empirical flow invariant.
class PermutedNoise {
 public:
  PermutedNoise(const mfcl::PhiloxNoise& base, std::vector<int> perm)
      : base_(base), perm_(std::move(perm)) {}
  void common_increment(int step, int d, double* out) const {
    base_.common_increment(step, d, out);
  }
  void idiosyncratic_increment(int k, int step, int d, double* out) const {
    base_.idiosyncratic_increment(perm_[k], step, d, out);
  }
  void initial_draw(const mfcl::InitialLaw& law, int k, double* out) const {
    base_.initial_draw(law, perm_[k], out);
  }

 private:
  mfcl::PhiloxNoise base_;
  std::vector<int> perm_;
};

TEST(Simulate, ExchangeabilityUnderStreamPermutation) {
  auto spec = mfcl::make_lq_spec(LqParams{}, {.interaction = 0.6});
  CounterRng rng(31);
  const TimeGrid grid(1.0, 20);
  const int N = 32;
  mfcl::PhiloxNoise base(rng, 0, grid);

  std::vector<int> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  std::rotate(perm.begin(), perm.begin() + 7, perm.end());

  mfcl::SimulateOptions unc;
  unc.uncontrolled = true;
  auto plain = mfcl::simulate_system(spec, nullptr, N, grid, base, unc);
  auto permuted = mfcl::simulate_system(spec, nullptr, N, grid,
                                        PermutedNoise(base, perm), unc);

  // the empirical mean is summed in a different order after permutation, so
  // agreement is to 1e-12 rather than bitwise for interacting coefficients
  for (int i = 0; i <= grid.n_steps; ++i) {
    for (int k = 0; k < N; ++k) {
      EXPECT_NEAR(permuted.slice(i)[k], plain.slice(i)[perm[k]], 1e-12);
    }
    EXPECT_NEAR(permuted.summaries[i].mean[0], plain.summaries[i].mean[0],
                1e-12);
    EXPECT_NEAR(permuted.summaries[i].cov[0], plain.summaries[i].cov[0],
                1e-12);
  }
  EXPECT_NEAR(mfcl::estimate_reward(spec, permuted),
              mfcl::estimate_reward(spec, plain), 1e-12);
}

TEST(MkvCloud, PureCommonNoiseTranslatesInitialLaw) {
  // b0 = 0, sigma = 0, sigma0 = 1: every particle equals xi_k + B_t.
  LqParams p;
  p.sigma = 0.0;
  p.sigma0 = 1.0;
  auto spec = mfcl::make_lq_spec(p);
  CounterRng rng(41);
  const TimeGrid grid(1.0, 10);
  auto traj = mfcl::simulate_mkv_cloud(spec, 32, grid, rng);
  for (int i = 0; i <= 10; ++i) {
    for (int k = 0; k < 32; ++k) {
      EXPECT_NEAR(traj.slice(i)[k], traj.slice(0)[k] + traj.common_path[i],
                  1e-12);
    }
  }
}

TEST(MkvCloud, ConditionalMeanTracksCommonPath) {
  LqParams p;
  auto spec = mfcl::make_lq_spec(p);
  CounterRng rng(42);
  const int N = 4000;
  const TimeGrid grid(1.0, 20);
  auto traj = mfcl::simulate_mkv_cloud(spec, N, grid, rng, 5);
  const double m_expect = p.m0 + p.sigma0 * traj.common_path[20];
  const double se = std::sqrt((p.v0 + p.sigma * p.sigma) / N);
  EXPECT_NEAR(traj.summaries[20].mean[0], m_expect, 3.0 * se);
}

TEST(MkvCloud, CouplingAcrossIdiosyncraticSeeds) {
  // different W-streams, same B-stream: cloud means differ by O(sigma/sqrt N)
  LqParams p;
  auto spec = mfcl::make_lq_spec(p);
  const int N = 2000;
  const TimeGrid grid(1.0, 20);

  CounterRng rng_a(50), rng_b(51);
  mfcl::SimulateOptions unc;
  unc.uncontrolled = true;
  // same B: both runs use rng_a's common stream through a hybrid source
  class HybridNoise {
   public:
    HybridNoise(mfcl::PhiloxNoise common, mfcl::PhiloxNoise idio)
        : common_(common), idio_(idio) {}
    void common_increment(int s, int d, double* o) const {
      common_.common_increment(s, d, o);
    }
    void idiosyncratic_increment(int k, int s, int d, double* o) const {
      idio_.idiosyncratic_increment(k, s, d, o);
    }
    void initial_draw(const mfcl::InitialLaw& law, int k, double* o) const {
      idio_.initial_draw(law, k, o);
    }

   private:
    mfcl::PhiloxNoise common_, idio_;
  };
  mfcl::PhiloxNoise base_a(rng_a, 0, grid), base_b(rng_b, 0, grid);
  auto one = mfcl::simulate_system(spec, nullptr, N, grid,
                                   HybridNoise(base_a, base_a), unc);
  auto two = mfcl::simulate_system(spec, nullptr, N, grid,
                                   HybridNoise(base_a, base_b), unc);
  EXPECT_EQ(one.common_path, two.common_path);
  const double diff =
      std::abs(one.summaries[20].mean[0] - two.summaries[20].mean[0]);
  const double scale = std::sqrt((p.v0 + p.sigma * p.sigma) / N);
  EXPECT_GT(diff, 0.0);
  EXPECT_LT(diff, 6.0 * scale);
}

TEST(CoupledClouds, NoInteractionIsBitwiseIdentical) {
  auto spec = mfcl::make_lq_spec(LqParams{});  // b0 = 0, no measure terms
  CounterRng rng(60);
  auto pair = mfcl::simulate_coupled_clouds(spec, 32, TimeGrid(1.0, 15), rng);
  EXPECT_EQ(pair.interacting.states, pair.decoupled.states);
  const double w2 = mfcl::wasserstein_p_1d(pair.interacting.measure_at(15),
                                           pair.decoupled.measure_at(15), 2.0);
  EXPECT_EQ(w2, 0.0);
}

TEST(CoupledClouds, GapShrinksWithN) {
  auto spec = mfcl::make_tanh_drift_spec(LqParams{}, 0.5);
  CounterRng rng(61);
  const TimeGrid grid(1.0, 20);
  const int reps = 60;
  std::vector<double> gap;
  for (int N : {8, 64}) {
    mfcl::RunningStats stats;
    for (int rep = 0; rep < reps; ++rep) {
      auto pair = mfcl::simulate_coupled_clouds(spec, N, grid, rng, rep);
      const double w2 = mfcl::wasserstein_p_1d(
          pair.interacting.measure_at(20), pair.decoupled.measure_at(20), 2.0);
      stats.add(w2 * w2);
    }
    gap.push_back(stats.mean);
  }
  EXPECT_LT(gap[1], gap[0]);
}

TEST(Reward, TrivialAndMeanCases) {
  auto spec = bare_spec(0.0, 0.0);
  spec.L0 = nullptr;
  spec.F = nullptr;
  spec.g = nullptr;
  spec.full_drift = [](double, const double*, const MeasureFacts&,
                       const double*, double* out) { out[0] = 0.0; };
  CounterRng rng(70);
  auto traj = mfcl::simulate_controlled_system(
      spec, Policy::constant(1, {0.0, 0.0}), 16, TimeGrid(1.0, 10), rng);
  EXPECT_DOUBLE_EQ(mfcl::estimate_reward(spec, traj), 0.0);

  spec.g = [](const MeasureFacts& mu) { return mu.mean1(); };
  const auto facts0 = traj.facts_at(0);
  EXPECT_NEAR(mfcl::estimate_reward(spec, traj), facts0.mean1(), 1e-12);
}

TEST(Reward, RiccatiFeedbackApproachesOracleValue) {
  LqParams p;
  auto spec = mfcl::make_lq_spec(p);
  const auto riccati = mfcl::solve_riccati(p);
  auto policy = Policy::empirical_feedback(
      1, [&riccati](double t, const MeasureFacts& mu, double* a) {
        a[0] = riccati.feedback(t, mu.mean1());
      });
  CounterRng rng(71);
  const TimeGrid grid(p.T, 50);
  const int N = 500, reps = 800;
  mfcl::RunningStats value;
  for (int rep = 0; rep < reps; ++rep) {
    auto traj = mfcl::simulate_controlled_system(spec, policy, N, grid, rng, rep);
    value.add(mfcl::estimate_reward(spec, traj));
  }
  const double oracle = riccati.value(0.0, p.m0);
  EXPECT_NEAR(value.mean, oracle,
              0.02 * std::abs(oracle) + 3.0 * value.stderr_of_mean());
}

// Conditional-law identity: in the drift-controlled LQ model the control
// shifts only the conditional mean, so the cloud variance of the controlled
// system matches the uncontrolled McKean-Vlasov cloud statistically.
TEST(Simulate, ConditionalLawIdentity) {
  LqParams p;
  auto spec = mfcl::make_lq_spec(p);
  const auto riccati = mfcl::solve_riccati(p);
  auto policy = Policy::empirical_feedback(
      1, [&riccati](double t, const MeasureFacts& mu, double* a) {
        a[0] = riccati.feedback(t, mu.mean1());
      });
  CounterRng rng(72);
  const int N = 4000;
  const TimeGrid grid(p.T, 25);
  auto controlled =
      mfcl::simulate_controlled_system(spec, policy, N, grid, rng, 0);
  auto uncontrolled = mfcl::simulate_mkv_cloud(spec, N, grid, rng, 1);
  const double v1 = controlled.facts_at(25).var1();
  const double v2 = uncontrolled.facts_at(25).var1();
  // two-sample dispersion test at the 1% level
  const double z = std::abs(std::log(v1) - std::log(v2)) /
                   std::sqrt(4.0 / (N - 1));
  EXPECT_LT(z, 2.576);
}

TEST(Trajectory, CsvHasContractColumns) {
  auto spec = mfcl::make_lq_spec(LqParams{});
  CounterRng rng(80);
  auto traj = mfcl::simulate_mkv_cloud(spec, 3, TimeGrid(0.5, 2), rng);
  std::stringstream ss;
  traj.to_csv(ss, 9);
  std::string header;
  std::getline(ss, header);
  EXPECT_EQ(header, "replication,particle,time,x0");
  std::string first;
  std::getline(ss, first);
  EXPECT_EQ(first.rfind("9,0,0", 0), 0u);
}

}  // namespace
