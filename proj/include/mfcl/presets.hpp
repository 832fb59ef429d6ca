#pragma once

// Named desk models. All scalar, Markovian, drift-controlled with full
// drift b(., a) = a (so b1 = sigma0^{-1} a in the decomposition) and
// quadratic rewards truncated far outside the operating range so the
// boundedness assumptions hold formally while the Riccati closed forms
// stay valid where trajectories live.

#include <cmath>

#include "mfcl/model.hpp"

namespace mfcl {

// u^2 clamped to slope 2r outside |u| <= r (continuous, Lipschitz).
inline double truncated_quadratic(double u, double r) {
  const double au = std::abs(u);
  return au <= r ? u * u : r * (2.0 * au - r);
}

inline constexpr double kRewardTruncationRadius = 100.0;

struct LqPresetOptions {
  double interaction = 0.0;  // kappa in b0 = kappa (mean - x)
  bool tanh_interaction = false;
};

inline CoefficientSpec make_lq_spec(const LqParams& p,
                                    const LqPresetOptions& opt = {}) {
  CoefficientSpec spec;
  spec.name = opt.tanh_interaction ? "tanh-drift"
              : (opt.interaction != 0.0 ? "lq-interact" : "lq");
  spec.d = 1;
  spec.control = ControlBox::symmetric(1, p.a_max);
  spec.nu0 = InitialLaw::gaussian1d(p.m0, p.v0);
  spec.sigma_const = {p.sigma, 0, 0, 0};
  spec.sigma0 = {p.sigma0, 0, 0, 0};
  spec.markovian = true;
  spec.constant_vol = opt.interaction == 0.0 && !opt.tanh_interaction;
  spec.drift_controlled = true;
  spec.quadratic_hamiltonian = true;
  spec.b1_scale = {1.0 / p.sigma0, 0, 0, 0};
  spec.b1_bound = p.a_max / p.sigma0;

  const double kappa = opt.interaction;
  if (opt.tanh_interaction) {
    spec.b0 = [kappa](double, const double* x, const MeasureFacts& mu,
                      double* out) {
      out[0] = kappa * std::tanh(mu.mean1() - x[0]);
    };
  } else if (kappa != 0.0) {
    spec.b0 = [kappa](double, const double* x, const MeasureFacts& mu,
                      double* out) { out[0] = kappa * (mu.mean1() - x[0]); };
  }

  spec.split_reward = true;
  spec.L0 = [](double, const double* a) { return -0.5 * a[0] * a[0]; };
  const double c = p.c, gamma = p.gamma, theta = p.theta;
  spec.F = [c, theta](const MeasureFacts& mu) {
    return -c * truncated_quadratic(mu.mean1() - theta,
                                    kRewardTruncationRadius);
  };
  spec.g = [gamma, theta](const MeasureFacts& mu) {
    return -gamma * truncated_quadratic(mu.mean1() - theta,
                                        kRewardTruncationRadius);
  };

  spec.full_drift = [kappa, tanh_mode = opt.tanh_interaction](
                        double, const double* x, const MeasureFacts& mu,
                        const double* a, double* out) {
    double drift = a[0];
    if (tanh_mode) {
      drift += kappa * std::tanh(mu.mean1() - x[0]);
    } else if (kappa != 0.0) {
      drift += kappa * (mu.mean1() - x[0]);
    }
    out[0] = drift;
  };

  // Conditional law of the uncontrolled dynamics given B. The conditional
  // mean m0 + sigma0 B_t holds for both the plain and the linear-interaction
  // model; the variance is Brownian resp. OU toward sigma^2/(2 kappa).
  if (!opt.tanh_interaction) {
    const double m0 = p.m0, v0 = p.v0, s0 = p.sigma0, s = p.sigma;
    if (kappa == 0.0) {
      spec.analytic_law = [m0, v0, s0, s](double t, const double* B,
                                          double* mean, double* cov) {
        mean[0] = m0 + s0 * B[0];
        cov[0] = v0 + s * s * t;
      };
    } else {
      spec.analytic_law = [m0, v0, s0, s, kappa](double t, const double* B,
                                                 double* mean, double* cov) {
        mean[0] = m0 + s0 * B[0];
        const double decay = std::exp(-2.0 * kappa * t);
        cov[0] = v0 * decay + s * s * (1.0 - decay) / (2.0 * kappa);
      };
    }
  }
  return spec;
}

inline CoefficientSpec make_tanh_drift_spec(const LqParams& p, double kappa) {
  LqPresetOptions opt;
  opt.interaction = kappa;
  opt.tanh_interaction = true;
  return make_lq_spec(p, opt);
}

}  // namespace mfcl
