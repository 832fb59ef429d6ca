#pragma once

// Regression Monte Carlo backward solvers for the mean-field BSDE and the
// N-particle BSDE, optimal-control extraction from the Z-component, and
// the stability-bound table of the convergence theorem.
//
// Backward update: Y_i = E[Y_{i+1} | features] + H(t_i, mu_i, Z_i) dt,
// with Z_i the regression of Y_{i+1} dB_i / dt on the same features.
// Conditional expectations are realized by ridge-regularized least squares
// on polynomial features of (B_t, mean and variance of the measure flow).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mfcl/measure.hpp"
#include "mfcl/model.hpp"
#include "mfcl/parallel.hpp"
#include "mfcl/particle.hpp"
#include "mfcl/stats.hpp"

namespace mfcl {

struct RegressionBasis {
  int degree = 3;
  double ridge_scale = 1e-8;
};

namespace detail {

inline std::vector<std::vector<int>> monomials_up_to(int vars, int degree) {
  std::vector<std::vector<int>> out;
  std::vector<int> alpha(vars, 0);
  std::function<void(int, int)> rec = [&](int pos, int budget) {
    if (pos == vars) {
      out.push_back(alpha);
      return;
    }
    for (int e = 0; e <= budget; ++e) {
      alpha[pos] = e;
      rec(pos + 1, budget - e);
      alpha[pos] = 0;
    }
  };
  rec(0, degree);
  return out;
}

inline void eval_monomials(const std::vector<std::vector<int>>& expo,
                           const double* vars, int nvars, double* out) {
  for (std::size_t j = 0; j < expo.size(); ++j) {
    double prod = 1.0;
    for (int p = 0; p < nvars; ++p) {
      for (int e = 0; e < expo[j][p]; ++e) prod *= vars[p];
    }
    out[j] = prod;
  }
}

// Ridge least squares with column standardization. Zero-variance columns
// are dropped (degenerate steps, e.g. t = 0, collapse to plain means), the
// ridge system is solved through an augmented pivoted QR, and predictions
// are clipped to the observed target range so backward induction cannot
// compound tail extrapolation of the polynomial basis.
struct RidgeFit {
  std::vector<int> kept;
  Eigen::VectorXd col_mean;
  Eigen::VectorXd col_std;
  Eigen::MatrixXd beta;   // kept x n_rhs
  Eigen::VectorXd y_mean; // n_rhs
  Eigen::VectorXd y_lo, y_hi;
  double condition = 1.0;
  double residual_rms = 0.0;

  // features: the full monomial row, indexed like the training matrix
  double predict(const double* features, int rhs) const {
    double y = y_mean(rhs);
    for (std::size_t k = 0; k < kept.size(); ++k) {
      y += beta(static_cast<Eigen::Index>(k), rhs) *
           (features[kept[k]] - col_mean(k)) / col_std(k);
    }
    return std::clamp(y, y_lo(rhs), y_hi(rhs));
  }

  double predict_matrix_row(const Eigen::MatrixXd& X, Eigen::Index row,
                            int rhs) const {
    double y = y_mean(rhs);
    for (std::size_t k = 0; k < kept.size(); ++k) {
      y += beta(static_cast<Eigen::Index>(k), rhs) *
           (X(row, kept[k]) - col_mean(k)) / col_std(k);
    }
    return std::clamp(y, y_lo(rhs), y_hi(rhs));
  }
};

inline RidgeFit ridge_fit(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                          double ridge_scale) {
  const auto M = X.rows();
  const auto F = X.cols();
  const auto R = Y.cols();
  RidgeFit fit;
  fit.y_mean = Y.colwise().mean().transpose();
  fit.y_lo = Y.colwise().minCoeff().transpose();
  fit.y_hi = Y.colwise().maxCoeff().transpose();

  Eigen::VectorXd mean = X.colwise().mean().transpose();
  Eigen::VectorXd sd(F);
  for (Eigen::Index j = 0; j < F; ++j) {
    sd(j) = std::sqrt((X.col(j).array() - mean(j)).square().sum() /
                      static_cast<double>(M));
  }
  for (Eigen::Index j = 0; j < F; ++j) {
    if (sd(j) > 1e-12 * (1.0 + std::abs(mean(j)))) {
      fit.kept.push_back(static_cast<int>(j));
    }
  }
  const auto K = static_cast<Eigen::Index>(fit.kept.size());
  fit.col_mean.resize(K);
  fit.col_std.resize(K);
  fit.beta = Eigen::MatrixXd::Zero(K, R);
  if (K == 0) return fit;

  // augmented system [Xs; sqrt(lambda) I] beta = [Yc; 0] gives the exact
  // ridge solution and stays stable under exact collinearity
  Eigen::MatrixXd A(M + K, K);
  for (Eigen::Index k = 0; k < K; ++k) {
    fit.col_mean(k) = mean(fit.kept[k]);
    fit.col_std(k) = sd(fit.kept[k]);
    A.col(k).head(M) =
        (X.col(fit.kept[k]).array() - fit.col_mean(k)) / fit.col_std(k);
  }
  const double lambda =
      std::max(ridge_scale * static_cast<double>(M), 1e-300);
  A.bottomRows(K).setZero();
  A.bottomRows(K).diagonal().setConstant(std::sqrt(lambda));

  Eigen::MatrixXd B(M + K, R);
  B.topRows(M) = Y.rowwise() - fit.y_mean.transpose();
  B.bottomRows(K).setZero();

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  fit.beta = qr.solve(B);

  const auto rdiag = qr.matrixR().diagonal().cwiseAbs();
  const auto rank = std::max<Eigen::Index>(qr.rank(), 1);
  fit.condition = rdiag(0) / std::max(rdiag(rank - 1), 1e-300);
  fit.residual_rms = std::sqrt((B.topRows(M) - A.topRows(M) * fit.beta)
                                   .squaredNorm() /
                               static_cast<double>(M * R));
  return fit;
}

}  // namespace detail

struct BsdeDiagnostics {
  double max_condition = 0.0;
  std::vector<double> regression_residual;   // per step
  std::vector<double> martingale_residual;   // per step, mean over paths
  std::vector<double> martingale_residual_se;
  double particle_z_integral = 0.0;  // sum_k E int |(sigma0^-1 sigma) Z^{N,k}|^2
};

struct BsdeSolution {
  double Y0 = 0.0;
  double Y0_stderr = 0.0;
  TimeGrid grid;
  int d = 1;
  int feature_vars = 0;
  std::vector<std::vector<int>> feature_exponents;
  std::vector<detail::RidgeFit> y_fits;  // per step 0..n-1
  std::vector<detail::RidgeFit> z_fits;  // per step 0..n-1
  BsdeDiagnostics diagnostics;

  // realized samples (kept when requested): Y is M x (n+1), Z is M x n x d,
  // features M x (n+1) x feature_vars, terminal clouds M x N
  bool has_samples = false;
  int M = 0;
  std::vector<double> Y_samples;
  std::vector<double> Z_samples;
  std::vector<double> feature_values;
  std::vector<double> w2_sq_terminal;  // vs analytic law, per path

  double Y_at(int m, int i) const { return Y_samples[m * (grid.n_steps + 1) + i]; }
  double Z_at(int m, int i, int j) const {
    return Z_samples[(m * grid.n_steps + i) * d + j];
  }
};

struct BsdeOptions {
  bool use_analytic_law = false;     // closed-form measure flow if available
  bool keep_samples = false;
  bool particle_z_diagnostic = false;  // pooled Z^{N,k} estimate (stores states)
  const std::vector<double>* fixed_initials = nullptr;  // cloud_size x d
  bool w2_vs_analytic = false;       // record W2^2(mu^N_T, mu_T) per path
};

namespace detail {

// Forward-pass record per (path, step): feature variables, F(mu), dB, and
// terminal reward per path.
struct ForwardData {
  int M = 0, n = 0, d = 1, vars = 0;
  std::vector<double> features;  // M x (n+1) x vars: [B(d), mean(d), cov(dd)]
  std::vector<double> F_values;  // M x (n+1)
  std::vector<double> dB;        // M x n x d
  std::vector<double> terminal_g;          // M
  std::vector<double> w2_sq;               // M (optional)
  std::vector<double> particle_states;     // M x (n+1) x N x d (optional)

  double* feat(int m, int i) { return features.data() + (static_cast<std::size_t>(m) * (n + 1) + i) * vars; }
  const double* feat(int m, int i) const { return features.data() + (static_cast<std::size_t>(m) * (n + 1) + i) * vars; }
};

inline int summary_var_count(int d) { return d + d + d * (d + 1) / 2; }

// Simulate the uncontrolled measure flow along one common path and record
// regression variables. cloud_size is N (particle BSDE) or N_inner.
inline void forward_pass(const CoefficientSpec& spec, int cloud_size,
                         const TimeGrid& grid, const CounterRng& rng,
                         std::uint64_t rep, const BsdeOptions& opts,
                         ForwardData& data) {
  const int d = spec.d;
  const int n = grid.n_steps;
  const double dt = grid.dt();
  const PhiloxNoise noise(rng, rep, grid);
  const bool analytic = opts.use_analytic_law && spec.analytic_law;

  std::vector<double> cur(cloud_size * d), nxt(cloud_size * d);
  if (opts.fixed_initials) {
    if (opts.fixed_initials->size() != cur.size()) {
      throw std::invalid_argument("forward_pass: fixed initials size");
    }
    std::copy(opts.fixed_initials->begin(), opts.fixed_initials->end(),
              cur.begin());
  } else {
    for (int k = 0; k < cloud_size; ++k) {
      noise.initial_draw(spec.nu0, k, cur.data() + k * d);
    }
  }

  std::array<double, kMaxDim> B{}, dB{};
  const int m = static_cast<int>(rep);
  for (int i = 0; i <= n; ++i) {
    MeasureFacts facts;
    if (analytic) {
      std::array<double, kMaxDim> mean{};
      std::array<double, 3> cov{};
      spec.analytic_law(grid.t(i), B.data(), mean.data(), cov.data());
      facts = MeasureFacts::summary_only(d, mean, cov);
    } else {
      facts = MeasureFacts::from_states(d, cur.data(), cloud_size);
    }
    double* f = data.feat(m, i);
    for (int j = 0; j < d; ++j) f[j] = B[j];
    for (int j = 0; j < d; ++j) f[d + j] = facts.mean[j];
    for (int c = 0; c < d * (d + 1) / 2; ++c) f[2 * d + c] = facts.cov[c];
    data.F_values[static_cast<std::size_t>(m) * (n + 1) + i] =
        spec.F ? spec.F(facts) : 0.0;
    if (opts.particle_z_diagnostic) {
      std::copy(cur.begin(), cur.end(),
                data.particle_states.begin() +
                    (static_cast<std::size_t>(m) * (n + 1) + i) * cloud_size * d);
    }
    if (i == n) {
      data.terminal_g[m] = spec.g ? spec.g(facts) : 0.0;
      if (opts.w2_vs_analytic) {
        if (!spec.analytic_law || d != 1) {
          throw std::invalid_argument(
              "forward_pass: W2 tracking needs a scalar analytic law");
        }
        std::array<double, kMaxDim> mean{};
        std::array<double, 3> cov{};
        spec.analytic_law(grid.t(i), B.data(), mean.data(), cov.data());
        MatrixXd pts(cloud_size, 1);
        for (int k = 0; k < cloud_size; ++k) pts(k, 0) = cur[k];
        data.w2_sq[m] = wasserstein2_sq_to_gaussian_1d(
            EmpiricalMeasure(std::move(pts)), mean[0], cov[0]);
      }
      break;
    }

    noise.common_increment(i, d, dB.data());
    for (int j = 0; j < d; ++j) {
      data.dB[(static_cast<std::size_t>(m) * n + i) * d + j] = dB[j];
      B[j] += dB[j];
    }
    euler_step(
        spec, grid.t(i), dt, facts, nullptr, cur.data(), nxt.data(),
        cloud_size, dB.data(),
        [&noise](int k, int step, int dd, double* out) {
          noise.idiosyncratic_increment(k, step, dd, out);
        },
        i);
    std::swap(cur, nxt);
  }
}

inline void build_feature_matrix(const ForwardData& data, int step,
                                 const std::vector<std::vector<int>>& expo,
                                 Eigen::MatrixXd& X) {
  const int M = data.M;
  const auto F = static_cast<Eigen::Index>(expo.size());
  X.resize(M, F);
  std::vector<double> row(expo.size());
  for (int m = 0; m < M; ++m) {
    eval_monomials(expo, data.feat(m, step), data.vars, row.data());
    for (Eigen::Index j = 0; j < F; ++j) X(m, j) = row[j];
  }
}

}  // namespace detail

// Shared backward-induction core. The mean-field solver runs it with an
// inner approximation cloud (or the closed-form law); the particle solver
// runs it with the N-particle cloud itself.
inline BsdeSolution solve_bsde_core(const CoefficientSpec& spec, int cloud_size,
                                    int M_outer, const TimeGrid& grid,
                                    const RegressionBasis& basis,
                                    std::uint64_t seed,
                                    const BsdeOptions& opts = {}) {
  if (!spec.drift_controlled) {
    throw std::invalid_argument("solve_bsde: drift-controlled spec required");
  }
  if (!spec.split_reward) {
    throw std::invalid_argument("solve_bsde: split reward L = L0 + F required");
  }
  const int d = spec.d;
  const int n = grid.n_steps;
  const double dt = grid.dt();
  const int vars = detail::summary_var_count(d);
  const auto expo = detail::monomials_up_to(vars, basis.degree);
  const auto F_count = static_cast<int>(expo.size());
  if (F_count * 10 > M_outer) {
    throw std::invalid_argument(
        "solve_bsde: feature count exceeds sample budget / 10");
  }

  detail::ForwardData data;
  data.M = M_outer;
  data.n = n;
  data.d = d;
  data.vars = vars;
  data.features.resize(static_cast<std::size_t>(M_outer) * (n + 1) * vars);
  data.F_values.resize(static_cast<std::size_t>(M_outer) * (n + 1));
  data.dB.resize(static_cast<std::size_t>(M_outer) * n * d);
  data.terminal_g.resize(M_outer);
  if (opts.w2_vs_analytic) data.w2_sq.resize(M_outer);
  if (opts.particle_z_diagnostic) {
    data.particle_states.resize(static_cast<std::size_t>(M_outer) * (n + 1) *
                                cloud_size * d);
  }

  const CounterRng rng(seed);
  parallel_for(0, M_outer, [&](int m) {
    detail::forward_pass(spec, cloud_size, grid, rng, m, opts, data);
  });

  BsdeSolution sol;
  sol.grid = grid;
  sol.d = d;
  sol.feature_vars = vars;
  sol.feature_exponents = expo;
  sol.y_fits.resize(n);
  sol.z_fits.resize(n);
  sol.diagnostics.regression_residual.assign(n, 0.0);
  sol.diagnostics.martingale_residual.assign(n, 0.0);
  sol.diagnostics.martingale_residual_se.assign(n, 0.0);

  std::vector<double> Y(M_outer), Y_next(M_outer);
  for (int m = 0; m < M_outer; ++m) Y[m] = data.terminal_g[m];

  if (opts.keep_samples) {
    sol.has_samples = true;
    sol.M = M_outer;
    sol.Y_samples.resize(static_cast<std::size_t>(M_outer) * (n + 1));
    sol.Z_samples.resize(static_cast<std::size_t>(M_outer) * n * d);
    sol.feature_values = data.features;
    for (int m = 0; m < M_outer; ++m) {
      sol.Y_samples[static_cast<std::size_t>(m) * (n + 1) + n] = Y[m];
    }
    if (opts.w2_vs_analytic) sol.w2_sq_terminal = data.w2_sq;
  }

  Eigen::MatrixXd X;
  Eigen::MatrixXd y_rhs(M_outer, 1);
  Eigen::MatrixXd z_rhs(M_outer, d);
  std::vector<double> y_cond(M_outer);
  std::array<double, kMaxDim> z{};

  for (int i = n - 1; i >= 0; --i) {
    detail::build_feature_matrix(data, i, expo, X);
    for (int m = 0; m < M_outer; ++m) y_rhs(m, 0) = Y[m];
    auto yfit = detail::ridge_fit(X, y_rhs, basis.ridge_scale);

    // martingale control variate: project the conditionally centered
    // Y against dB/dt, avoiding the 1/sqrt(dt) variance blow-up that a
    // raw projection feeds into the convex driver
    for (int m = 0; m < M_outer; ++m) {
      y_cond[m] = yfit.predict_matrix_row(X, m, 0);
      const double centered = Y[m] - y_cond[m];
      for (int j = 0; j < d; ++j) {
        z_rhs(m, j) = centered *
                      data.dB[(static_cast<std::size_t>(m) * n + i) * d + j] /
                      dt;
      }
    }
    auto zfit = detail::ridge_fit(X, z_rhs, basis.ridge_scale);
    if (!std::isfinite(yfit.condition) || !std::isfinite(zfit.condition)) {
      throw std::runtime_error("solve_bsde: rank-deficient regression");
    }
    sol.diagnostics.max_condition = std::max(
        {sol.diagnostics.max_condition, yfit.condition, zfit.condition});
    sol.diagnostics.regression_residual[i] = yfit.residual_rms;

    const double t = grid.t(i);
    RunningStats mart;
    for (int m = 0; m < M_outer; ++m) {
      const double* f = data.feat(m, i);
      for (int j = 0; j < d; ++j) z[j] = zfit.predict_matrix_row(X, m, j);
      std::array<double, kMaxDim> mean{};
      std::array<double, 3> cov{};
      for (int j = 0; j < d; ++j) mean[j] = f[d + j];
      for (int c = 0; c < d * (d + 1) / 2; ++c) cov[c] = f[2 * d + c];
      const auto facts = MeasureFacts::summary_only(d, mean, cov);
      const double H =
          data.F_values[static_cast<std::size_t>(m) * (n + 1) + i] +
          hamiltonian_sup(spec, t, facts, z.data()).value;
      const double y_new = y_cond[m] + H * dt;

      double zdB = 0;
      for (int j = 0; j < d; ++j) {
        zdB += z[j] * data.dB[(static_cast<std::size_t>(m) * n + i) * d + j];
      }
      mart.add(y_new - Y[m] - H * dt + zdB);

      Y_next[m] = y_new;
      if (opts.keep_samples) {
        for (int j = 0; j < d; ++j) {
          sol.Z_samples[(static_cast<std::size_t>(m) * n + i) * d + j] = z[j];
        }
      }
    }
    std::swap(Y, Y_next);
    if (opts.keep_samples) {
      for (int m = 0; m < M_outer; ++m) {
        sol.Y_samples[static_cast<std::size_t>(m) * (n + 1) + i] = Y[m];
      }
    }
    sol.diagnostics.martingale_residual[i] = mart.mean;
    sol.diagnostics.martingale_residual_se[i] = mart.stderr_of_mean();
    sol.y_fits[i] = std::move(yfit);
    sol.z_fits[i] = std::move(zfit);
  }

  RunningStats y0;
  for (int m = 0; m < M_outer; ++m) y0.add(Y[m]);
  sol.Y0 = y0.mean;
  sol.Y0_stderr = y0.stderr_of_mean();

  // pooled per-particle Z^{N,k} diagnostic (theorem's cross-term column)
  if (opts.particle_z_diagnostic) {
    if (!opts.keep_samples) {
      throw std::invalid_argument(
          "solve_bsde: particle_z_diagnostic requires keep_samples");
    }
    if (spec.sigma) {
      throw std::invalid_argument(
          "solve_bsde: particle_z_diagnostic needs constant sigma");
    }
    const int N = cloud_size;
    const int pvars = d + vars;  // particle state + symmetric variables
    const auto pexpo = detail::monomials_up_to(pvars, basis.degree);
    const auto PF = static_cast<Eigen::Index>(pexpo.size());
    Eigen::MatrixXd Xp(static_cast<Eigen::Index>(M_outer) * N, PF);
    Eigen::MatrixXd yp(static_cast<Eigen::Index>(M_outer) * N, d);
    std::array<double, 4> s0inv_sigma{};
    if (d == 1) {
      s0inv_sigma[0] = spec.sigma_const[0] / spec.sigma0[0];
    } else {
      Eigen::Matrix2d s0, sg;
      for (int i = 0; i < 4; ++i) {
        s0(i / 2, i % 2) = spec.sigma0[i];
        sg(i / 2, i % 2) = spec.sigma_const[i];
      }
      Eigen::Matrix2d r = s0.inverse() * sg;
      for (int i = 0; i < 4; ++i) s0inv_sigma[i] = r(i / 2, i % 2);
    }
    double total = 0;
    std::vector<double> feat(pvars), zk(d), sym_feat(expo.size()),
        prow(PF);
    const CounterRng rng2(seed);
    const double sqrt_dt = std::sqrt(dt);
    for (int i = 0; i < n; ++i) {
      Eigen::Index row = 0;
      for (int m = 0; m < M_outer; ++m) {
        const double* sym = data.feat(m, i);
        const double* states =
            data.particle_states.data() +
            (static_cast<std::size_t>(m) * (n + 1) + i) * N * d;
        // same control-variate centering as the Z^N projection
        detail::eval_monomials(expo, sym, vars, sym_feat.data());
        const double y_next =
            sol.Y_samples[static_cast<std::size_t>(m) * (n + 1) + i + 1] -
            sol.y_fits[i].predict(sym_feat.data(), 0);
        for (int k = 0; k < N; ++k, ++row) {
          for (int j = 0; j < d; ++j) feat[j] = states[k * d + j];
          for (int v = 0; v < vars; ++v) feat[d + v] = sym[v];
          detail::eval_monomials(pexpo, feat.data(), pvars, prow.data());
          for (Eigen::Index j = 0; j < PF; ++j) Xp(row, j) = prow[j];
          const auto zn = rng2.normals(StreamRole::kIdiosyncratic, m, k, i);
          for (int j = 0; j < d; ++j) {
            yp(row, j) = y_next * (sqrt_dt * zn[j]) / dt;
          }
        }
      }
      auto pfit = detail::ridge_fit(Xp, yp, basis.ridge_scale);
      // accumulate E sum_k |(sigma0^-1 sigma) Zhat^{N,k}|^2 dt
      row = 0;
      double step_acc = 0;
      for (int m = 0; m < M_outer; ++m) {
        for (int k = 0; k < N; ++k, ++row) {
          for (int j = 0; j < d; ++j) {
            zk[j] = pfit.predict_matrix_row(Xp, row, j);
          }
          double norm = 0;
          for (int a = 0; a < d; ++a) {
            double v = 0;
            for (int j = 0; j < d; ++j) v += s0inv_sigma[a * d + j] * zk[j];
            norm += v * v;
          }
          step_acc += norm;
        }
      }
      total += step_acc / M_outer * dt;
    }
    sol.diagnostics.particle_z_integral = total;
  }

  return sol;
}

// Mean-field BSDE: inner cloud of N_inner particles approximates the
// conditional law along each of M_outer common paths (or the spec's
// closed-form law when the option is set).
inline BsdeSolution solve_mf_bsde(const CoefficientSpec& spec, int N_inner,
                                  int M_outer, const TimeGrid& grid,
                                  const RegressionBasis& basis,
                                  std::uint64_t seed,
                                  const BsdeOptions& opts = {}) {
  return solve_bsde_core(spec, N_inner, M_outer, grid, basis, seed, opts);
}

// N-particle BSDE on the uncontrolled system; Y0 estimates the centralized
// value. Regression features are symmetric statistics of mu^N plus B.
inline BsdeSolution solve_particle_bsde(const CoefficientSpec& spec, int N,
                                        int M_outer, const TimeGrid& grid,
                                        const RegressionBasis& basis,
                                        std::uint64_t seed,
                                        const BsdeOptions& opts = {}) {
  BsdeOptions o = opts;
  o.use_analytic_law = false;  // the particle cloud is the object itself
  return solve_bsde_core(spec, N, M_outer, grid, basis, seed, o);
}

// Optimal control read off the fitted Z-regression. The returned policy is
// open-loop in the common path: it maintains the drift-corrected path
// Btilde = B + int b1(alpha) ds so that the fitted regression (built under
// the reference measure) is evaluated at the matching common-noise state.
inline Policy extract_control(const CoefficientSpec& spec,
                              const BsdeSolution& solution) {
  if (!spec.analytic_law) {
    throw std::invalid_argument(
        "extract_control: spec must provide the analytic conditional law");
  }
  struct Shared {
    CoefficientSpec spec;
    std::vector<detail::RidgeFit> z_fits;
    std::vector<std::vector<int>> expo;
    int vars;
    double dt;
  };
  auto shared = std::make_shared<Shared>();
  shared->spec = spec;
  shared->z_fits = solution.z_fits;
  shared->expo = solution.feature_exponents;
  shared->vars = solution.feature_vars;
  shared->dt = solution.grid.dt();

  Policy policy;
  policy.kind = Policy::Kind::kOpenLoopPiecewise;
  policy.workspace_size = spec.d;  // accumulated int b1(alpha) ds
  policy.eval = [shared](const PolicyContext& ctx, double* out) {
    const auto& s = *shared;
    const int d = s.spec.d;
    std::array<double, kMaxDim> btilde{}, mean{}, z{};
    std::array<double, 3> cov{};
    for (int j = 0; j < d; ++j) {
      btilde[j] = ctx.B_path[ctx.step * d + j] + ctx.workspace[j];
    }
    s.spec.analytic_law(ctx.t, btilde.data(), mean.data(), cov.data());

    std::vector<double> raw(s.vars);
    for (int j = 0; j < d; ++j) raw[j] = btilde[j];
    for (int j = 0; j < d; ++j) raw[d + j] = mean[j];
    for (int c = 0; c < d * (d + 1) / 2; ++c) raw[2 * d + c] = cov[c];
    std::vector<double> feats(s.expo.size());
    detail::eval_monomials(s.expo, raw.data(), s.vars, feats.data());
    const auto& fit = s.z_fits[ctx.step];
    for (int j = 0; j < d; ++j) z[j] = fit.predict(feats.data(), j);

    const auto facts = MeasureFacts::summary_only(d, mean, cov);
    const auto h = hamiltonian_sup(s.spec, ctx.t, facts, z.data());
    for (int j = 0; j < d; ++j) out[j] = h.argmax[j];

    std::array<double, kMaxDim> b1v{};
    s.spec.eval_b1(ctx.t, facts, out, b1v.data());
    for (int j = 0; j < d; ++j) ctx.workspace[j] += b1v[j] * s.dt;
  };
  return policy;
}

// Stability table of the BSDE convergence theorem: per N, the coupled
// differences E sup|Y^N - Y|^2 and E int |Z^N - Z|^2 against
// E[W2^2(mu^N_T, mu_T)], all on seed-matched common paths.
struct StabilityRow {
  int N = 0;
  double y_gap_sq = 0;
  double z_gap_sq = 0;
  double w2_sq = 0;
  double ratio = 0;  // y_gap_sq / w2_sq
  bool exact_zero = false;
};

struct StabilityBudgets {
  int M_outer = 4096;
  RegressionBasis basis;
};

inline std::vector<StabilityRow> stability_gap(const CoefficientSpec& spec,
                                               const std::vector<int>& N_list,
                                               const TimeGrid& grid,
                                               const StabilityBudgets& budgets,
                                               std::uint64_t seed) {
  if (!spec.analytic_law) {
    throw std::invalid_argument(
        "stability_gap: preset must provide the analytic conditional law");
  }
  BsdeOptions mf_opts;
  mf_opts.use_analytic_law = true;
  mf_opts.keep_samples = true;
  const auto mf = solve_mf_bsde(spec, /*N_inner=*/1, budgets.M_outer, grid,
                                budgets.basis, seed, mf_opts);

  std::vector<StabilityRow> rows;
  const int n = grid.n_steps;
  const double dt = grid.dt();
  for (int N : N_list) {
    BsdeOptions p_opts;
    p_opts.keep_samples = true;
    p_opts.w2_vs_analytic = true;
    const auto pn =
        solve_particle_bsde(spec, N, budgets.M_outer, grid, budgets.basis,
                            seed, p_opts);
    StabilityRow row;
    row.N = N;
    RunningStats ys, zs, ws;
    for (int m = 0; m < budgets.M_outer; ++m) {
      double ymax = 0, zacc = 0;
      for (int i = 0; i <= n; ++i) {
        const double dy = pn.Y_at(m, i) - mf.Y_at(m, i);
        ymax = std::max(ymax, dy * dy);
      }
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < spec.d; ++j) {
          const double dz = pn.Z_at(m, i, j) - mf.Z_at(m, i, j);
          zacc += dz * dz * dt;
        }
      }
      ys.add(ymax);
      zs.add(zacc);
      ws.add(pn.w2_sq_terminal[m]);
    }
    row.y_gap_sq = ys.mean;
    row.z_gap_sq = zs.mean;
    row.w2_sq = ws.mean;
    if (row.w2_sq < 1e-14) {
      row.exact_zero = true;
      row.ratio = 0.0;
    } else {
      row.ratio = row.y_gap_sq / row.w2_sq;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mfcl
