#pragma once

// Forward simulation: Euler-Maruyama for the controlled N-particle system
// with common noise, the uncontrolled McKean-Vlasov cloud, and the coupled
// interacting/decoupled pair used in propagation-of-chaos estimates.
//
// All noise is addressed through the counter RNG, so trajectories are
// bitwise reproducible from (seed, N, grid) and coupled systems share
// streams exactly.

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "mfcl/model.hpp"
#include "mfcl/rng.hpp"

namespace mfcl {

struct TimeGrid {
  double T = 1.0;
  int n_steps = 50;

  TimeGrid() = default;
  TimeGrid(double horizon, int steps) : T(horizon), n_steps(steps) {
    if (!(T > 0) || n_steps < 1) {
      throw std::invalid_argument("TimeGrid: need T > 0 and n_steps >= 1");
    }
  }
  double dt() const { return T / n_steps; }
  double t(int i) const { return T * i / n_steps; }
};

// Default noise source: Philox streams keyed by (seed, role, replication,
// particle, step). Tests may substitute any type with the same interface.
class PhiloxNoise {
 public:
  PhiloxNoise(const CounterRng& rng, std::uint64_t replication,
              const TimeGrid& grid)
      : rng_(rng), rep_(replication), sqrt_dt_(std::sqrt(grid.dt())) {}

  void common_increment(int step, int d, double* out) const {
    const auto z = rng_.normals(StreamRole::kCommon, rep_, 0, step);
    for (int j = 0; j < d; ++j) out[j] = sqrt_dt_ * z[j];
  }

  void idiosyncratic_increment(int k, int step, int d, double* out) const {
    const auto z = rng_.normals(StreamRole::kIdiosyncratic, rep_, k, step);
    for (int j = 0; j < d; ++j) out[j] = sqrt_dt_ * z[j];
  }

  void initial_draw(const InitialLaw& law, int k, double* out) const {
    law.sample(rng_, rep_, k, out);
  }

  const CounterRng& rng() const { return rng_; }
  std::uint64_t replication() const { return rep_; }

 private:
  CounterRng rng_;
  std::uint64_t rep_;
  double sqrt_dt_;
};

// Per-step measure summary kept with a trajectory.
struct StepSummary {
  std::array<double, kMaxDim> mean{};
  std::array<double, 3> cov{};
};

struct ParticleTrajectory {
  int N = 0;
  int d = 1;
  TimeGrid grid;
  // step-major: states[i * N * d + k * d + j]
  std::vector<double> states;
  std::vector<double> common_path;  // (n_steps + 1) x d, B_0 = 0
  std::vector<double> controls;     // n_steps x d, identical across agents
  std::vector<StepSummary> summaries;

  const double* slice(int step) const {
    return states.data() + static_cast<std::size_t>(step) * N * d;
  }
  double* slice(int step) {
    return states.data() + static_cast<std::size_t>(step) * N * d;
  }
  const double* B_at(int step) const { return common_path.data() + step * d; }

  MeasureFacts facts_at(int step) const {
    return MeasureFacts::from_states(d, slice(step), N);
  }

  EmpiricalMeasure measure_at(int step) const {
    MatrixXd pts(N, d);
    const double* s = slice(step);
    for (int k = 0; k < N; ++k) {
      for (int j = 0; j < d; ++j) pts(k, j) = s[k * d + j];
    }
    return EmpiricalMeasure(std::move(pts));
  }

  void to_csv(std::ostream& os, std::uint64_t replication = 0) const {
    os << "replication,particle,time,";
    for (int j = 0; j < d; ++j) os << "x" << j << (j + 1 < d ? "," : "\n");
    for (int k = 0; k < N; ++k) {
      for (int i = 0; i <= grid.n_steps; ++i) {
        os << replication << ',' << k << ',' << grid.t(i);
        for (int j = 0; j < d; ++j) os << ',' << slice(i)[k * d + j];
        os << '\n';
      }
    }
  }
};

// Admissible policy variants. The simulator passes the current common-noise
// path, the running controlled common state (integral of sigma0 b1(alpha)
// plus sigma0 B), and the empirical-measure facts; each variant reads only
// the arguments its information structure allows.
struct PolicyContext {
  int step = 0;
  double t = 0;
  int d = 1;
  const double* B_path = nullptr;    // (step + 1) x d prefix including B_t
  const double* x0_state = nullptr;  // controlled common state X^0_t
  const MeasureFacts* mu = nullptr;  // current empirical measure
  double* workspace = nullptr;       // per-trajectory policy memory
};

struct Policy {
  enum class Kind { kOpenLoopPiecewise, kCommonStateFeedback, kEmpiricalFeedback };
  Kind kind = Kind::kOpenLoopPiecewise;
  int workspace_size = 0;
  std::function<void(const PolicyContext&, double* a_out)> eval;

  static Policy constant(int d, std::array<double, kMaxDim> a) {
    Policy p;
    p.kind = Kind::kOpenLoopPiecewise;
    p.eval = [d, a](const PolicyContext&, double* out) {
      for (int j = 0; j < d; ++j) out[j] = a[j];
    };
    return p;
  }

  static Policy empirical_feedback(
      int d, std::function<void(double t, const MeasureFacts&, double*)> f) {
    Policy p;
    p.kind = Kind::kEmpiricalFeedback;
    p.eval = [d, f = std::move(f)](const PolicyContext& ctx, double* out) {
      f(ctx.t, *ctx.mu, out);
    };
    return p;
  }
};

namespace detail {

// One Euler-Maruyama step for all particles; mu frozen at the left
// endpoint, identical control applied to every agent. Controlled drift is
// b0 + sigma0 b1 in drift-controlled mode, otherwise the spec's full drift.
template <class DwSource>
inline void euler_step(const CoefficientSpec& spec, double t, double dt,
                       const MeasureFacts& mu, const double* alpha,
                       const double* in, double* out, int N, const double* dB,
                       DwSource&& dW, int step) {
  const int d = spec.d;
  const bool decomposed = alpha != nullptr && spec.drift_controlled;
  const bool general_drift = alpha != nullptr && !spec.drift_controlled;
  if (general_drift && !spec.full_drift) {
    throw std::invalid_argument(
        "euler_step: controlled run needs drift_controlled or full_drift");
  }
  std::array<double, kMaxDim> sb1{};
  if (decomposed) {
    std::array<double, kMaxDim> b1v{};
    spec.eval_b1(t, mu, alpha, b1v.data());
    for (int i = 0; i < d; ++i) {
      sb1[i] = 0;
      for (int j = 0; j < d; ++j) sb1[i] += spec.sigma0[i * d + j] * b1v[j];
    }
  }
  std::array<double, kMaxDim> drift{}, dw{};
  std::array<double, 4> sg{};
  const bool const_sigma = !spec.sigma;
  if (const_sigma) sg = spec.sigma_const;
  for (int k = 0; k < N; ++k) {
    const double* x = in + k * d;
    double* y = out + k * d;
    if (general_drift) {
      spec.full_drift(t, x, mu, alpha, drift.data());
    } else {
      spec.eval_b0(t, x, mu, drift.data());
      if (decomposed) {
        for (int i = 0; i < d; ++i) drift[i] += sb1[i];
      }
    }
    if (!const_sigma) spec.eval_sigma(t, x, mu, sg.data());
    dW(k, step, d, dw.data());
    for (int i = 0; i < d; ++i) {
      double v = x[i] + drift[i] * dt;
      for (int j = 0; j < d; ++j) {
        v += sg[i * d + j] * dw[j];
        v += spec.sigma0[i * d + j] * dB[j];
      }
      y[i] = v;
      if (!std::isfinite(v)) {
        throw std::runtime_error("euler_step: non-finite state (blow-up)");
      }
    }
  }
}

}  // namespace detail

struct SimulateOptions {
  bool uncontrolled = false;                  // b0 dynamics only
  const std::vector<StepSummary>* external_flow = nullptr;  // decoupled mode
  const std::vector<double>* fixed_initials = nullptr;      // N x d, quenched
};

template <class Noise>
ParticleTrajectory simulate_system(const CoefficientSpec& spec,
                                   const Policy* policy, int N,
                                   const TimeGrid& grid, const Noise& noise,
                                   const SimulateOptions& opts = {}) {
  if (N < 1) throw std::invalid_argument("simulate_system: N >= 1");
  const int d = spec.d;
  const int n = grid.n_steps;
  const double dt = grid.dt();

  ParticleTrajectory traj;
  traj.N = N;
  traj.d = d;
  traj.grid = grid;
  traj.states.resize(static_cast<std::size_t>(n + 1) * N * d);
  traj.common_path.assign(static_cast<std::size_t>(n + 1) * d, 0.0);
  traj.controls.assign(static_cast<std::size_t>(n) * d, 0.0);
  traj.summaries.resize(n + 1);

  if (opts.fixed_initials) {
    if (static_cast<int>(opts.fixed_initials->size()) != N * d) {
      throw std::invalid_argument("simulate_system: fixed initials size");
    }
    std::copy(opts.fixed_initials->begin(), opts.fixed_initials->end(),
              traj.slice(0));
  } else {
    for (int k = 0; k < N; ++k) {
      noise.initial_draw(spec.nu0, k, traj.slice(0) + k * d);
    }
  }

  std::vector<double> workspace(
      policy && policy->workspace_size > 0 ? policy->workspace_size : 0, 0.0);
  std::array<double, kMaxDim> x0{}, alpha{}, dB{}, b1v{};

  for (int i = 0; i <= n; ++i) {
    auto own_facts = MeasureFacts::from_states(d, traj.slice(i), N);
    traj.summaries[i].mean = own_facts.mean;
    traj.summaries[i].cov = own_facts.cov;
    if (i == n) break;

    MeasureFacts facts = own_facts;
    if (opts.external_flow) {
      facts = MeasureFacts::summary_only(d, (*opts.external_flow)[i].mean,
                                         (*opts.external_flow)[i].cov);
    }

    const double t = grid.t(i);
    noise.common_increment(i, d, dB.data());
    for (int j = 0; j < d; ++j) {
      traj.common_path[(i + 1) * d + j] = traj.common_path[i * d + j] + dB[j];
    }

    const double* alpha_ptr = nullptr;
    if (!opts.uncontrolled && policy) {
      PolicyContext ctx;
      ctx.step = i;
      ctx.t = t;
      ctx.d = d;
      ctx.B_path = traj.common_path.data();
      ctx.x0_state = x0.data();
      ctx.mu = &facts;
      ctx.workspace = workspace.empty() ? nullptr : workspace.data();
      policy->eval(ctx, alpha.data());
      spec.control.clamp(alpha.data());
      if (!spec.control.contains(alpha.data())) {
        throw std::logic_error("simulate_system: control escaped A");
      }
      for (int j = 0; j < d; ++j) traj.controls[i * d + j] = alpha[j];
      alpha_ptr = alpha.data();
      if (spec.drift_controlled) {
        // advance the controlled common state X^0
        spec.eval_b1(t, facts, alpha.data(), b1v.data());
        for (int a = 0; a < d; ++a) {
          for (int j = 0; j < d; ++j) {
            x0[a] += spec.sigma0[a * d + j] * (b1v[j] * dt + dB[j]);
          }
        }
      }
    }

    detail::euler_step(
        spec, t, dt, facts, alpha_ptr, traj.slice(i), traj.slice(i + 1), N,
        dB.data(),
        [&noise](int k, int step, int dd, double* out) {
          noise.idiosyncratic_increment(k, step, dd, out);
        },
        i);
  }
  return traj;
}

inline ParticleTrajectory simulate_controlled_system(
    const CoefficientSpec& spec, const Policy& policy, int N,
    const TimeGrid& grid, const CounterRng& rng, std::uint64_t replication = 0,
    const SimulateOptions& opts = {}) {
  const PhiloxNoise noise(rng, replication, grid);
  return simulate_system(spec, &policy, N, grid, noise, opts);
}

inline ParticleTrajectory simulate_mkv_cloud(const CoefficientSpec& spec,
                                             int N, const TimeGrid& grid,
                                             const CounterRng& rng,
                                             std::uint64_t replication = 0,
                                             const SimulateOptions& base = {}) {
  if (!spec.drift_controlled) {
    throw std::invalid_argument("simulate_mkv_cloud: drift-controlled spec required");
  }
  SimulateOptions opts = base;
  opts.uncontrolled = true;
  const PhiloxNoise noise(rng, replication, grid);
  return simulate_system(spec, nullptr, N, grid, noise, opts);
}

// Reference-cloud noise: same common stream, own W/initial streams.
class ReferenceNoise {
 public:
  ReferenceNoise(const CounterRng& rng, std::uint64_t replication,
                 const TimeGrid& grid)
      : rng_(rng), rep_(replication), sqrt_dt_(std::sqrt(grid.dt())) {}

  void common_increment(int step, int d, double* out) const {
    const auto z = rng_.normals(StreamRole::kCommon, rep_, 0, step);
    for (int j = 0; j < d; ++j) out[j] = sqrt_dt_ * z[j];
  }
  void idiosyncratic_increment(int k, int step, int d, double* out) const {
    const auto z = rng_.normals(StreamRole::kReference, rep_, k, step);
    for (int j = 0; j < d; ++j) out[j] = sqrt_dt_ * z[j];
  }
  void initial_draw(const InitialLaw& law, int k, double* out) const {
    // reference initials come from a disjoint stream: shift the particle
    // index into a range the main cloud never uses
    law.sample(rng_, rep_, (1ULL << 32) + k, out);
  }

 private:
  CounterRng rng_;
  std::uint64_t rep_;
  double sqrt_dt_;
};

struct CoupledClouds {
  ParticleTrajectory interacting;
  ParticleTrajectory decoupled;
};

// Interacting system and its decoupled copy driven by the identical noise
// bundle; the decoupled copy reads a reference measure flow computed from
// an auxiliary cloud of size ref_factor * N (bias O(1/N_ref)).
inline CoupledClouds simulate_coupled_clouds(const CoefficientSpec& spec,
                                             int N, const TimeGrid& grid,
                                             const CounterRng& rng,
                                             std::uint64_t replication = 0,
                                             int ref_factor = 16) {
  if (!spec.drift_controlled) {
    throw std::invalid_argument("simulate_coupled_clouds: drift-controlled spec required");
  }
  SimulateOptions unc;
  unc.uncontrolled = true;
  const ReferenceNoise ref_noise(rng, replication, grid);
  const auto reference =
      simulate_system(spec, nullptr, ref_factor * N, grid, ref_noise, unc);

  CoupledClouds out;
  const PhiloxNoise noise(rng, replication, grid);
  out.interacting = simulate_system(spec, nullptr, N, grid, noise, unc);

  SimulateOptions dec = unc;
  dec.external_flow = &reference.summaries;
  out.decoupled = simulate_system(spec, nullptr, N, grid, noise, dec);
  return out;
}

// Left-endpoint quadrature of the running reward plus the terminal reward,
// evaluated along the trajectory's own empirical flow.
inline double estimate_reward(const CoefficientSpec& spec,
                              const ParticleTrajectory& traj) {
  const double dt = traj.grid.dt();
  double acc = 0;
  for (int i = 0; i < traj.grid.n_steps; ++i) {
    const auto facts = traj.facts_at(i);
    acc += spec.running_reward(traj.grid.t(i), facts,
                               traj.controls.data() + i * traj.d) *
           dt;
  }
  const auto terminal = traj.facts_at(traj.grid.n_steps);
  return acc + (spec.g ? spec.g(terminal) : 0.0);
}

}  // namespace mfcl
