#pragma once

// Problem definitions: coefficient functions in the drift-controlled
// decomposition b = b0 + sigma0 * b1(t, mu, a), reward structure, the
// Hamiltonian sup_a(L + b1 . a), assumption validation, and the
// linear-quadratic Riccati oracle used as an analytic benchmark.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfcl/measure.hpp"
#include "mfcl/rng.hpp"

namespace mfcl {

inline constexpr int kMaxDim = 2;

// Lightweight measure view used in simulation loops: optional atom spans
// plus cached mean / packed covariance ([xx] in d=1, [xx,xy,yy] in d=2).
struct MeasureFacts {
  int d = 1;
  int n = 0;
  const double* atoms = nullptr;    // n x d, row-major; may be null
  const double* weights = nullptr;  // null means equal weights 1/n
  std::array<double, kMaxDim> mean{};
  std::array<double, 3> cov{};

  double mean1() const { return mean[0]; }
  double var1() const { return cov[0]; }

  double weight(int i) const {
    return weights ? weights[i] : 1.0 / static_cast<double>(n);
  }

  bool has_atoms() const { return atoms != nullptr; }

  double expectation(const std::function<double(const double*)>& f) const {
    if (!has_atoms()) {
      throw std::logic_error("MeasureFacts: atom view required");
    }
    double acc = 0;
    for (int i = 0; i < n; ++i) acc += weight(i) * f(atoms + i * d);
    return acc;
  }

  static MeasureFacts from_states(int d, const double* states, int n,
                                  const double* w = nullptr) {
    MeasureFacts f;
    f.d = d;
    f.n = n;
    f.atoms = states;
    f.weights = w;
    for (int j = 0; j < d; ++j) {
      double m = 0;
      for (int i = 0; i < n; ++i) m += f.weight(i) * states[i * d + j];
      f.mean[j] = m;
    }
    int c = 0;
    for (int j = 0; j < d; ++j) {
      for (int l = j; l < d; ++l, ++c) {
        double v = 0;
        for (int i = 0; i < n; ++i) {
          v += f.weight(i) * (states[i * d + j] - f.mean[j]) *
               (states[i * d + l] - f.mean[l]);
        }
        f.cov[c] = v;
      }
    }
    return f;
  }

  static MeasureFacts summary_only(int d, const std::array<double, kMaxDim>& m,
                                   const std::array<double, 3>& c) {
    MeasureFacts f;
    f.d = d;
    f.mean = m;
    f.cov = c;
    return f;
  }
};

// Owning row-major copy of an EmpiricalMeasure for facts-based evaluation.
struct MeasureData {
  std::vector<double> atoms;
  std::vector<double> weights;
  int d = 1;
  int n = 0;

  explicit MeasureData(const EmpiricalMeasure& m)
      : d(static_cast<int>(m.dim())), n(static_cast<int>(m.size())) {
    if (d > kMaxDim) throw std::invalid_argument("MeasureData: d <= 2 only");
    atoms.resize(static_cast<std::size_t>(n) * d);
    weights.resize(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) atoms[i * d + j] = m.points()(i, j);
      weights[i] = m.weights()(i);
    }
  }

  MeasureFacts facts() const {
    return MeasureFacts::from_states(d, atoms.data(), n, weights.data());
  }
};

struct ControlBox {
  int d = 1;
  std::array<double, kMaxDim> lo{};
  std::array<double, kMaxDim> hi{};
  std::array<double, kMaxDim> a0{};

  static ControlBox symmetric(int d, double a_max) {
    ControlBox b;
    b.d = d;
    for (int j = 0; j < d; ++j) {
      b.lo[j] = -a_max;
      b.hi[j] = a_max;
      b.a0[j] = 0;
    }
    return b;
  }

  void clamp(double* a) const {
    for (int j = 0; j < d; ++j) a[j] = std::clamp(a[j], lo[j], hi[j]);
  }

  bool contains(const double* a, double tol = 1e-12) const {
    for (int j = 0; j < d; ++j) {
      if (a[j] < lo[j] - tol || a[j] > hi[j] + tol) return false;
    }
    return true;
  }
};

// ~Gaussian or atom-cloud initial law; all particles are i.i.d. nu0.
struct InitialLaw {
  enum class Kind { kGaussian, kCloud };
  Kind kind = Kind::kGaussian;
  int d = 1;
  std::array<double, kMaxDim> mean{};
  std::array<double, 3> cov{};  // packed, diagonal supported for sampling
  std::shared_ptr<const MeasureData> cloud;

  static InitialLaw gaussian1d(double m0, double v0) {
    InitialLaw law;
    law.d = 1;
    law.mean = {m0, 0};
    law.cov = {v0, 0, 0};
    return law;
  }

  static InitialLaw from_cloud(const EmpiricalMeasure& m) {
    InitialLaw law;
    law.kind = Kind::kCloud;
    law.d = static_cast<int>(m.dim());
    auto data = std::make_shared<MeasureData>(m);
    const auto f = data->facts();
    law.mean = f.mean;
    law.cov = f.cov;
    law.cloud = std::move(data);
    return law;
  }

  void sample(const CounterRng& rng, std::uint64_t replication,
              std::uint64_t particle, double* out) const {
    const auto blk = rng.at(StreamRole::kInitial, replication, particle, 0);
    if (kind == Kind::kGaussian) {
      const auto z = blk.normals();
      for (int j = 0; j < d; ++j) {
        const double sd = std::sqrt(std::max(cov[j == 0 ? 0 : 2], 0.0));
        out[j] = mean[j] + sd * z[j];
      }
    } else {
      // inverse-CDF over atom weights
      const double u = blk.uniform(0);
      double cum = 0;
      int pick = cloud->n - 1;
      for (int i = 0; i < cloud->n; ++i) {
        cum += cloud->weights[i];
        if (u <= cum) {
          pick = i;
          break;
        }
      }
      for (int j = 0; j < d; ++j) out[j] = cloud->atoms[pick * d + j];
    }
  }
};

// Coefficients (b0, sigma, sigma0, b1, L, g) with structure flags.
// sigma0 is a constant matrix (Markovian mode); sigma may vary.
struct CoefficientSpec {
  std::string name = "custom";
  int d = 1;
  ControlBox control = ControlBox::symmetric(1, 1.0);
  InitialLaw nu0 = InitialLaw::gaussian1d(0.0, 1.0);

  using DriftFn =
      std::function<void(double t, const double* x, const MeasureFacts& mu,
                         double* out)>;
  using ControlDriftFn = std::function<void(
      double t, const MeasureFacts& mu, const double* a, double* out)>;
  using FullDriftFn =
      std::function<void(double t, const double* x, const MeasureFacts& mu,
                         const double* a, double* out)>;

  DriftFn b0;                               // null means zero drift
  std::array<double, 4> sigma_const{};      // d x d row-major
  DriftFn sigma;                            // null means constant sigma_const
  std::array<double, 4> sigma0{};           // constant d x d row-major
  ControlDriftFn b1;                        // required when drift_controlled
  double b1_bound = 0.0;                    // declared sup |b1|

  // Rewards. split_reward means L(t, mu, a) = L0(t, a) + F(mu).
  bool split_reward = true;
  std::function<double(double t, const double* a)> L0;
  std::function<double(const MeasureFacts&)> F;
  std::function<double(double t, const MeasureFacts&, const double* a)> L_general;
  std::function<double(const MeasureFacts&)> g;

  // Quadratic Hamiltonian structure: L0 = -|a|^2/2 and b1(t, mu, a) = S a,
  // giving sup_a(L0 + b1 . z) in closed form at y = S^T z.
  bool quadratic_hamiltonian = false;
  std::array<double, 4> b1_scale{};  // S, d x d row-major

  bool markovian = true;
  bool constant_vol = false;
  bool drift_controlled = false;

  // Optional independent full-drift map for decomposition validation.
  FullDriftFn full_drift;

  // Optional closed-form conditional law given B_t (uncontrolled dynamics):
  // fills mean (d) and packed covariance.
  std::function<void(double t, const double* B, double* mean, double* cov)>
      analytic_law;

  int hamiltonian_grid = 101;

  double running_reward(double t, const MeasureFacts& mu,
                        const double* a) const {
    if (split_reward) return (L0 ? L0(t, a) : 0.0) + (F ? F(mu) : 0.0);
    return L_general(t, mu, a);
  }

  void eval_sigma(double t, const double* x, const MeasureFacts& mu,
                  double* out) const {
    if (sigma) {
      sigma(t, x, mu, out);
    } else {
      for (int i = 0; i < d * d; ++i) out[i] = sigma_const[i];
    }
  }

  void eval_b0(double t, const double* x, const MeasureFacts& mu,
               double* out) const {
    if (b0) {
      b0(t, x, mu, out);
    } else {
      for (int j = 0; j < d; ++j) out[j] = 0;
    }
  }

  void eval_b1(double t, const MeasureFacts& mu, const double* a,
               double* out) const {
    if (quadratic_hamiltonian) {
      for (int i = 0; i < d; ++i) {
        out[i] = 0;
        for (int j = 0; j < d; ++j) out[i] += b1_scale[i * d + j] * a[j];
      }
    } else {
      b1(t, mu, a, out);
    }
  }
};

struct HamiltonianResult {
  double value = 0;
  std::array<double, kMaxDim> argmax{};
};

namespace detail {

template <class Objective>
HamiltonianResult grid_argmax(const CoefficientSpec& spec, Objective&& f) {
  const int d = spec.d;
  const int grid = spec.hamiltonian_grid;
  HamiltonianResult res;
  std::array<double, kMaxDim> a{};
  double best = -std::numeric_limits<double>::infinity();
  auto consider = [&](const double* cand) {
    const double v = f(cand);
    if (v > best) {  // ascending scan keeps the lexicographically smallest tie
      best = v;
      for (int j = 0; j < d; ++j) res.argmax[j] = cand[j];
    }
  };
  if (d == 1) {
    for (int i = 0; i < grid; ++i) {
      a[0] = spec.control.lo[0] +
             (spec.control.hi[0] - spec.control.lo[0]) * i / (grid - 1.0);
      consider(a.data());
    }
  } else {
    for (int i = 0; i < grid; ++i) {
      a[0] = spec.control.lo[0] +
             (spec.control.hi[0] - spec.control.lo[0]) * i / (grid - 1.0);
      for (int k = 0; k < grid; ++k) {
        a[1] = spec.control.lo[1] +
               (spec.control.hi[1] - spec.control.lo[1]) * k / (grid - 1.0);
        consider(a.data());
      }
    }
  }
  res.value = best;
  return res;
}

}  // namespace detail

// sup_a ( L0(t, a) + b1(t, mu, a) . z ) -- the driver part of H without the
// additive F(mu) term. Quadratic case in closed form at y = S^T z.
inline HamiltonianResult hamiltonian_sup(const CoefficientSpec& spec, double t,
                                         const MeasureFacts& mu,
                                         const double* z) {
  const int d = spec.d;
  for (int j = 0; j < d; ++j) {
    if (!std::isfinite(z[j])) {
      throw std::invalid_argument("hamiltonian: non-finite z");
    }
  }
  HamiltonianResult res;
  if (spec.quadratic_hamiltonian) {
    for (int i = 0; i < d; ++i) {
      double y = 0;
      for (int j = 0; j < d; ++j) y += spec.b1_scale[j * d + i] * z[j];
      const double a = std::clamp(y, spec.control.lo[i], spec.control.hi[i]);
      res.argmax[i] = a;
      res.value += a * y - 0.5 * a * a;
    }
    return res;
  }
  if (!spec.split_reward) {
    throw std::logic_error("hamiltonian_sup: split reward structure required");
  }
  std::array<double, kMaxDim> b1v{};
  return detail::grid_argmax(spec, [&](const double* cand) {
    spec.eval_b1(t, mu, cand, b1v.data());
    double v = spec.L0 ? spec.L0(t, cand) : 0.0;
    for (int j = 0; j < d; ++j) v += b1v[j] * z[j];
    return v;
  });
}

// H(t, mu, z) = sup_{a in A} ( L(t, mu, a) + b1(t, mu, a) . z ).
// Quadratic case: closed-form coordinatewise clamp at y = S^T z; otherwise
// grid search over the box, lexicographically smallest tie-break.
inline HamiltonianResult hamiltonian(const CoefficientSpec& spec, double t,
                                     const MeasureFacts& mu, const double* z) {
  if (spec.quadratic_hamiltonian || spec.split_reward) {
    HamiltonianResult res = hamiltonian_sup(spec, t, mu, z);
    res.value += spec.F ? spec.F(mu) : 0.0;
    return res;
  }
  const int d = spec.d;
  for (int j = 0; j < d; ++j) {
    if (!std::isfinite(z[j])) {
      throw std::invalid_argument("hamiltonian: non-finite z");
    }
  }
  std::array<double, kMaxDim> b1v{};
  return detail::grid_argmax(spec, [&](const double* cand) {
    spec.eval_b1(t, mu, cand, b1v.data());
    double v = spec.running_reward(t, mu, cand);
    for (int j = 0; j < d; ++j) v += b1v[j] * z[j];
    return v;
  });
}

// ---------------------------------------------------------------------------
// Linear-quadratic desk model and its Riccati oracle.

struct LqParams {
  double T = 1.0;
  double sigma = 0.4;
  double sigma0 = 0.6;
  double a_max = 4.0;
  double c = 0.5;        // running state cost weight
  double gamma = 1.0;    // terminal cost weight
  double theta = 0.5;    // target
  double m0 = -0.3;      // initial mean
  double v0 = 0.04;      // initial variance
  int rk4_steps = 10000;
};

// Backward Riccati system for the scalar LQ model with drift b(.,a) = a:
//   Pdot = 2 P^2 - c,  P(T) = gamma;   qdot = -sigma0^2 P,  q(T) = 0.
// Value at (t, m) is -P(t)(m - theta)^2 - q(t); feedback -2P(t)(m - theta).
struct RiccatiSolution {
  LqParams params;
  std::vector<double> t;
  std::vector<double> P;
  std::vector<double> q;

  double P_at(double s) const { return interp(P, s); }
  double q_at(double s) const { return interp(q, s); }

  double value(double s, double m) const {
    const double u = m - params.theta;
    return -P_at(s) * u * u - q_at(s);
  }

  double feedback(double s, double m) const {
    return std::clamp(-2.0 * P_at(s) * (m - params.theta), -params.a_max,
                      params.a_max);
  }

  // True iff the unconstrained optimizer stays strictly inside the box for
  // all states with |m - theta| <= span.
  bool feedback_interior(double span) const {
    double pmax = 0;
    for (double p : P) pmax = std::max(pmax, p);
    return 2.0 * pmax * span < params.a_max;
  }

 private:
  double interp(const std::vector<double>& f, double s) const {
    if (s <= t.front()) return f.front();
    if (s >= t.back()) return f.back();
    const double dt = t[1] - t[0];
    const auto i = static_cast<std::size_t>((s - t.front()) / dt);
    const auto j = std::min(i + 1, f.size() - 1);
    const double w = (s - t[i]) / dt;
    return (1.0 - w) * f[i] + w * f[j];
  }
};

inline RiccatiSolution solve_riccati(const LqParams& p) {
  if (p.c < 0 || p.gamma < 0) {
    throw std::invalid_argument("solve_riccati: need c, gamma >= 0");
  }
  const int n = std::max(p.rk4_steps, 10000);
  RiccatiSolution sol;
  sol.params = p;
  sol.t.resize(n + 1);
  sol.P.resize(n + 1);
  sol.q.resize(n + 1);
  const double dt = p.T / n;
  for (int i = 0; i <= n; ++i) sol.t[i] = i * dt;
  sol.P[n] = p.gamma;
  sol.q[n] = 0.0;
  const auto fP = [&](double P) { return 2.0 * P * P - p.c; };
  const auto fq = [&](double P) { return -p.sigma0 * p.sigma0 * P; };
  for (int i = n; i > 0; --i) {
    const double h = -dt;  // backward integration
    const double P0 = sol.P[i], q0 = sol.q[i];
    const double k1 = fP(P0);
    const double k2 = fP(P0 + 0.5 * h * k1);
    const double k3 = fP(P0 + 0.5 * h * k2);
    const double k4 = fP(P0 + h * k3);
    sol.P[i - 1] = P0 + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    const double l1 = fq(P0);
    const double l2 = fq(P0 + 0.5 * h * k1);
    const double l3 = fq(P0 + 0.5 * h * k2);
    const double l4 = fq(P0 + h * k3);
    sol.q[i - 1] = q0 + h / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4);
    if (!std::isfinite(sol.P[i - 1])) {
      throw std::runtime_error("solve_riccati: blow-up (impossible for c, gamma >= 0)");
    }
  }
  return sol;
}

inline double lq_value_oracle(const LqParams& p, double t, double m) {
  if (t > p.T) throw std::invalid_argument("lq_value_oracle: t > T");
  return solve_riccati(p).value(t, m);
}

// ---------------------------------------------------------------------------
// Spec validation: sampled assumption checks and decomposition residual.

struct ValidationReport {
  bool passed = true;
  double decomposition_residual = 0.0;
  double b1_max_observed = 0.0;
  double sigma0_condition = 0.0;
  double b0_lipschitz_x = 0.0;
  double sigma_lipschitz_x = 0.0;
  std::vector<std::string> messages;
};

inline ValidationReport validate_spec(const CoefficientSpec& spec,
                                      int samples = 256,
                                      std::uint64_t seed = 7777) {
  ValidationReport rep;
  const int d = spec.d;
  if (d < 1 || d > kMaxDim) {
    throw std::invalid_argument("validate_spec: d must be 1 or 2");
  }

  if (spec.drift_controlled) {
    Eigen::MatrixXd s0(d, d);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) s0(i, j) = spec.sigma0[i * d + j];
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(s0);
    const double smin = svd.singularValues().minCoeff();
    const double smax = svd.singularValues().maxCoeff();
    if (smin <= 1e-14 * std::max(1.0, smax)) {
      throw std::domain_error("validate_spec: singular sigma0");
    }
    rep.sigma0_condition = smax / smin;
  }

  CounterRng rng(seed);
  std::array<double, kMaxDim> x{}, x2{}, a{}, b1v{}, out{}, out2{};
  std::array<double, 4> sg{}, sg2{};
  std::vector<double> cloud(8 * d);
  for (int s = 0; s < samples; ++s) {
    const auto blk = rng.at(StreamRole::kScratch, 31, s, 0);
    const double t = blk.uniform(0);
    for (int j = 0; j < d; ++j) {
      x[j] = 6.0 * blk.uniform(1) - 3.0;
      a[j] = spec.control.lo[j] +
             (spec.control.hi[j] - spec.control.lo[j]) * blk.uniform(2);
    }
    for (int i = 0; i < 8; ++i) {
      const auto cb = rng.at(StreamRole::kScratch, 32, s, i);
      for (int j = 0; j < d; ++j) cloud[i * d + j] = 4.0 * cb.uniform(j) - 2.0;
    }
    const auto mu = MeasureFacts::from_states(d, cloud.data(), 8);

    if (spec.drift_controlled) {
      spec.eval_b1(t, mu, a.data(), b1v.data());
      double norm = 0;
      for (int j = 0; j < d; ++j) norm += b1v[j] * b1v[j];
      rep.b1_max_observed = std::max(rep.b1_max_observed, std::sqrt(norm));
      if (spec.full_drift) {
        spec.full_drift(t, x.data(), mu, a.data(), out.data());
        spec.eval_b0(t, x.data(), mu, out2.data());
        double resid = 0;
        for (int i = 0; i < d; ++i) {
          double composed = out2[i];
          for (int j = 0; j < d; ++j) composed += spec.sigma0[i * d + j] * b1v[j];
          resid = std::max(resid, std::abs(out[i] - composed));
        }
        rep.decomposition_residual = std::max(rep.decomposition_residual, resid);
      }
    }

    // crude Lipschitz-in-x estimates by finite differences
    const double h = 1e-4;
    for (int j = 0; j < d; ++j) x2[j] = x[j] + (j == 0 ? h : 0.0);
    spec.eval_b0(t, x.data(), mu, out.data());
    spec.eval_b0(t, x2.data(), mu, out2.data());
    for (int j = 0; j < d; ++j) {
      rep.b0_lipschitz_x =
          std::max(rep.b0_lipschitz_x, std::abs(out2[j] - out[j]) / h);
    }
    spec.eval_sigma(t, x.data(), mu, sg.data());
    spec.eval_sigma(t, x2.data(), mu, sg2.data());
    for (int j = 0; j < d * d; ++j) {
      rep.sigma_lipschitz_x =
          std::max(rep.sigma_lipschitz_x, std::abs(sg2[j] - sg[j]) / h);
    }
  }

  if (rep.decomposition_residual > 1e-9) {
    rep.passed = false;
    rep.messages.push_back("drift decomposition mismatch: |b - (b0 + sigma0 b1)| = " +
                           std::to_string(rep.decomposition_residual));
  }
  if (spec.drift_controlled && spec.b1_bound > 0 &&
      rep.b1_max_observed > spec.b1_bound * (1.0 + 1e-9)) {
    rep.passed = false;
    rep.messages.push_back("b1 bound violation: observed " +
                           std::to_string(rep.b1_max_observed) + " > declared " +
                           std::to_string(spec.b1_bound));
  }
  return rep;
}

inline double eval_running_reward(const CoefficientSpec& spec, double t,
                                  const EmpiricalMeasure& mu, const double* a) {
  if (!spec.control.contains(a)) {
    throw std::invalid_argument("eval_running_reward: control outside A");
  }
  const MeasureData data(mu);
  return spec.running_reward(t, data.facts(), a);
}

inline double eval_terminal_reward(const CoefficientSpec& spec,
                                   const EmpiricalMeasure& mu) {
  const MeasureData data(mu);
  return spec.g ? spec.g(data.facts()) : 0.0;
}

}  // namespace mfcl
