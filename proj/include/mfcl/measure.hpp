#pragma once

// Probability measures as weighted atom clouds, the Wasserstein distances
// used by the convergence experiments, and Gaussian-convolution quadrature
// for lifted reward evaluation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfcl/stats.hpp"

namespace mfcl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

class EmpiricalMeasure {
 public:
  // points: one atom per row. Missing weights mean the uniform 1/N cloud.
  static EmpiricalMeasure from_points(MatrixXd points,
                                      VectorXd weights = VectorXd()) {
    return EmpiricalMeasure(std::move(points), std::move(weights));
  }

  EmpiricalMeasure(MatrixXd points, VectorXd weights = VectorXd())
      : points_(std::move(points)) {
    const auto n = points_.rows();
    if (n < 1) throw std::invalid_argument("EmpiricalMeasure: empty cloud");
    if (!points_.allFinite()) {
      throw std::invalid_argument("EmpiricalMeasure: non-finite coordinate");
    }
    if (weights.size() == 0) {
      equal_weights_ = true;
      weights_ = VectorXd::Constant(n, 1.0 / static_cast<double>(n));
    } else {
      if (weights.size() != n) {
        throw std::invalid_argument("EmpiricalMeasure: weight count mismatch");
      }
      if ((weights.array() < 0).any() || !weights.allFinite()) {
        throw std::invalid_argument("EmpiricalMeasure: negative weight");
      }
      const double total = weights.sum();
      if (total <= 0) {
        throw std::invalid_argument("EmpiricalMeasure: all-zero weights");
      }
      weights_ = weights / total;
      equal_weights_ =
          (weights_.array() - 1.0 / static_cast<double>(n)).abs().maxCoeff() ==
          0.0;
    }
  }

  Eigen::Index size() const { return points_.rows(); }
  Eigen::Index dim() const { return points_.cols(); }
  const MatrixXd& points() const { return points_; }
  const VectorXd& weights() const { return weights_; }
  bool equal_weights() const { return equal_weights_; }

  VectorXd mean() const { return points_.transpose() * weights_; }

  MatrixXd covariance() const {
    const VectorXd m = mean();
    MatrixXd c = MatrixXd::Zero(dim(), dim());
    for (Eigen::Index i = 0; i < size(); ++i) {
      const VectorXd u = points_.row(i).transpose() - m;
      c += weights_(i) * u * u.transpose();
    }
    return c;
  }

  double integrate(const std::function<double(const VectorXd&)>& phi) const {
    double acc = 0;
    for (Eigen::Index i = 0; i < size(); ++i) {
      acc += weights_(i) * phi(points_.row(i).transpose());
    }
    return acc;
  }

  void to_csv(std::ostream& os) const {
    for (Eigen::Index i = 0; i < size(); ++i) {
      for (Eigen::Index j = 0; j < dim(); ++j) {
        os << points_(i, j) << ',';
      }
      os << weights_(i) << '\n';
    }
  }

  static EmpiricalMeasure from_csv(std::istream& is) {
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::vector<double> row;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
      rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::invalid_argument("from_csv: empty file");
    const auto cols = rows.front().size();
    if (cols < 2) throw std::invalid_argument("from_csv: need coords,weight");
    MatrixXd pts(rows.size(), cols - 1);
    VectorXd w(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != cols) {
        throw std::invalid_argument("from_csv: ragged rows");
      }
      for (std::size_t j = 0; j + 1 < cols; ++j) pts(i, j) = rows[i][j];
      w(i) = rows[i].back();
    }
    return EmpiricalMeasure(std::move(pts), std::move(w));
  }

 private:
  MatrixXd points_;
  VectorXd weights_;
  bool equal_weights_ = false;
};

// Mixed moments of order 1..k in graded lexicographic order; the first d
// entries are the mean vector.
struct MomentTable {
  std::vector<std::vector<int>> exponents;
  std::vector<double> values;
};

inline MomentTable moments(const EmpiricalMeasure& mu, int order) {
  if (order < 1) throw std::invalid_argument("moments: order must be >= 1");
  const int d = static_cast<int>(mu.dim());
  MomentTable table;
  std::vector<int> alpha(d, 0);
  // enumerate multi-indices of total degree g in lexicographic order
  std::function<void(int, int)> rec = [&](int pos, int remaining) {
    if (pos == d - 1) {
      alpha[pos] = remaining;
      table.exponents.push_back(alpha);
      return;
    }
    for (int e = remaining; e >= 0; --e) {
      alpha[pos] = e;
      rec(pos + 1, remaining - e);
    }
  };
  for (int g = 1; g <= order; ++g) rec(0, g);
  table.values.reserve(table.exponents.size());
  for (const auto& a : table.exponents) {
    double acc = 0;
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
      double prod = mu.weights()(i);
      for (int j = 0; j < d; ++j) {
        prod *= std::pow(mu.points()(i, j), a[j]);
      }
      acc += prod;
    }
    table.values.push_back(acc);
  }
  return table;
}

// Exact W_p between two weighted 1-d clouds via the monotone (quantile)
// coupling; optimal in one dimension for any p >= 1.
inline double wasserstein_p_1d(const EmpiricalMeasure& mu,
                               const EmpiricalMeasure& nu, double p) {
  if (mu.dim() != 1 || nu.dim() != 1) {
    throw std::invalid_argument("wasserstein_p_1d: 1-d measures only");
  }
  if (p < 1.0) throw std::invalid_argument("wasserstein_p_1d: p must be >= 1");

  auto sorted = [](const EmpiricalMeasure& m) {
    std::vector<std::pair<double, double>> xw(m.size());
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      xw[i] = {m.points()(i, 0), m.weights()(i)};
    }
    std::sort(xw.begin(), xw.end());
    return xw;
  };
  const auto a = sorted(mu);
  const auto b = sorted(nu);

  double cost = 0;
  std::size_t i = 0, j = 0;
  double ra = a[0].second, rb = b[0].second;
  while (i < a.size() && j < b.size()) {
    const double m = std::min(ra, rb);
    cost += m * std::pow(std::abs(a[i].first - b[j].first), p);
    ra -= m;
    rb -= m;
    if (ra <= 0 && ++i < a.size()) ra = a[i].second;
    if (rb <= 0 && ++j < b.size()) rb = b[j].second;
  }
  return std::pow(cost, 1.0 / p);
}

namespace detail {

// Hungarian algorithm with potentials, O(n^3). Deterministic row-scan
// order breaks cost ties.
inline double assignment_cost(const MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> match(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, false);
    std::vector<int> way(n + 1, 0);
    match[0] = i;
    int j0 = 0;
    do {
      used[j0] = true;
      const int i0 = match[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0;
  for (int j = 1; j <= n; ++j) total += cost(match[j] - 1, j - 1);
  return total;
}

}  // namespace detail

inline constexpr int kAssignmentCapDefault = 512;

// Exact W_2 between equal-size equal-weight clouds in any dimension via
// optimal assignment on the squared-distance cost matrix.
inline double wasserstein2_assignment(const EmpiricalMeasure& mu,
                                      const EmpiricalMeasure& nu,
                                      int cap = kAssignmentCapDefault) {
  if (mu.size() != nu.size()) {
    throw std::invalid_argument("wasserstein2_assignment: unequal sizes");
  }
  if (!mu.equal_weights() || !nu.equal_weights()) {
    throw std::invalid_argument("wasserstein2_assignment: weights must be 1/N");
  }
  if (mu.dim() != nu.dim()) {
    throw std::invalid_argument("wasserstein2_assignment: dimension mismatch");
  }
  const auto n = mu.size();
  if (n > cap) {
    throw std::invalid_argument("wasserstein2_assignment: N over cap");
  }
  MatrixXd cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      cost(i, j) = (mu.points().row(i) - nu.points().row(j)).squaredNorm();
    }
  }
  return std::sqrt(detail::assignment_cost(cost) / static_cast<double>(n));
}

// Gauss-Hermite nodes/weights for integration against N(0,1), computed by
// Golub-Welsch on the Jacobi matrix of the probabilists' Hermite family.
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;

  explicit GaussHermite(int order) {
    if (order < 1) throw std::invalid_argument("GaussHermite: order >= 1");
    MatrixXd jacobi = MatrixXd::Zero(order, order);
    for (int k = 1; k < order; ++k) {
      const double beta = std::sqrt(static_cast<double>(k));
      jacobi(k, k - 1) = beta;
      jacobi(k - 1, k) = beta;
    }
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(jacobi);
    nodes.resize(order);
    weights.resize(order);
    for (int k = 0; k < order; ++k) {
      nodes[k] = es.eigenvalues()(k);
      const double v0 = es.eigenvectors()(0, k);
      weights[k] = v0 * v0;
    }
  }
};

// nu0 * N(shift, covariance), represented by tensorized Gauss-Hermite
// quadrature. Integrating phi equals sum over atoms and nodes of
// weight * phi(atom + shift + node).
class GaussianConvolution {
 public:
  GaussianConvolution(EmpiricalMeasure base, VectorXd shift,
                      MatrixXd covariance, int quadrature_order = 8)
      : base_(std::move(base)),
        shift_(std::move(shift)),
        covariance_(std::move(covariance)),
        order_(quadrature_order) {
    const auto d = base_.dim();
    if (shift_.size() != d || covariance_.rows() != d ||
        covariance_.cols() != d) {
      throw std::invalid_argument("GaussianConvolution: dimension mismatch");
    }
    if (d > 2) {
      throw std::invalid_argument("GaussianConvolution: d <= 2 supported");
    }
    if (!covariance_.isApprox(covariance_.transpose(), 1e-10)) {
      throw std::invalid_argument("GaussianConvolution: covariance not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(covariance_);
    VectorXd lam = es.eigenvalues();
    for (Eigen::Index i = 0; i < lam.size(); ++i) {
      if (lam(i) < -1e-12 * std::max(1.0, covariance_.norm())) {
        throw std::invalid_argument("GaussianConvolution: covariance not PSD");
      }
      lam(i) = std::max(lam(i), 0.0);
    }
    const MatrixXd factor =
        es.eigenvectors() * lam.array().sqrt().matrix().asDiagonal();

    const GaussHermite gh(order_);
    if (d == 1) {
      for (int k = 0; k < order_; ++k) {
        nodes_.push_back(VectorXd::Constant(1, factor(0, 0) * gh.nodes[k]));
        node_weights_.push_back(gh.weights[k]);
      }
    } else {
      for (int k = 0; k < order_; ++k) {
        for (int l = 0; l < order_; ++l) {
          VectorXd z(2);
          z << gh.nodes[k], gh.nodes[l];
          nodes_.push_back(factor * z);
          node_weights_.push_back(gh.weights[k] * gh.weights[l]);
        }
      }
    }
  }

  const EmpiricalMeasure& base() const { return base_; }
  const VectorXd& shift() const { return shift_; }
  const MatrixXd& covariance() const { return covariance_; }
  int quadrature_order() const { return order_; }

  double integrate(const std::function<double(const VectorXd&)>& phi) const {
    double acc = 0;
    for (Eigen::Index i = 0; i < base_.size(); ++i) {
      const VectorXd atom = base_.points().row(i).transpose() + shift_;
      double inner = 0;
      for (std::size_t q = 0; q < nodes_.size(); ++q) {
        inner += node_weights_[q] * phi(atom + nodes_[q]);
      }
      acc += base_.weights()(i) * inner;
    }
    return acc;
  }

  VectorXd mean() const { return base_.mean() + shift_; }

  // Expanded weighted cloud (atoms x quadrature nodes); lets measure-valued
  // rewards evaluate on the convolution like on any other cloud.
  EmpiricalMeasure to_measure() const {
    const auto d = base_.dim();
    const auto rows = base_.size() * static_cast<Eigen::Index>(nodes_.size());
    MatrixXd pts(rows, d);
    VectorXd w(rows);
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < base_.size(); ++i) {
      const VectorXd atom = base_.points().row(i).transpose() + shift_;
      for (std::size_t q = 0; q < nodes_.size(); ++q, ++r) {
        pts.row(r) = (atom + nodes_[q]).transpose();
        w(r) = base_.weights()(i) * node_weights_[q];
      }
    }
    return EmpiricalMeasure(std::move(pts), std::move(w));
  }

  // Quadrature self-check: reproduce N(0,1) moments up to order 2q-1.
  // Error is relative to the moment scale ((m-1)!! grows fast).
  double max_gaussian_moment_error() const {
    const GaussHermite gh(order_);
    double worst = 0;
    std::vector<double> target(2 * order_, 0.0);
    target[0] = 1.0;
    for (int m = 2; m < 2 * order_; m += 2) {
      target[m] = static_cast<double>(m - 1) * target[m - 2];
    }
    for (int m = 0; m <= 2 * order_ - 1; ++m) {
      double got = 0;
      for (int k = 0; k < order_; ++k) {
        got += gh.weights[k] * std::pow(gh.nodes[k], m);
      }
      const double scale =
          std::max(1.0, m >= 1 ? target[(m / 2) * 2] : 1.0);
      worst = std::max(worst, std::abs(got - target[m]) / scale);
    }
    return worst;
  }

 private:
  EmpiricalMeasure base_;
  VectorXd shift_;
  MatrixXd covariance_;
  int order_;
  std::vector<VectorXd> nodes_;
  std::vector<double> node_weights_;
};

inline GaussianConvolution convolve_gaussian(const EmpiricalMeasure& nu0,
                                             const VectorXd& shift,
                                             const MatrixXd& covariance,
                                             int order = 8) {
  return GaussianConvolution(nu0, shift, covariance, order);
}

// Exact squared W_2 between a 1-d cloud and N(mean, var), by integrating
// the quantile coupling in closed form over each cumulative-weight slab.
inline double wasserstein2_sq_to_gaussian_1d(const EmpiricalMeasure& mu,
                                             double mean, double var) {
  if (mu.dim() != 1) {
    throw std::invalid_argument("wasserstein2_sq_to_gaussian_1d: 1-d only");
  }
  if (var < 0) throw std::invalid_argument("negative variance");
  std::vector<std::pair<double, double>> xw(mu.size());
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    xw[i] = {mu.points()(i, 0), mu.weights()(i)};
  }
  std::sort(xw.begin(), xw.end());
  const double sd = std::sqrt(var);

  // On [a,b] in quantile space: I0 = b-a, I1 = int PhiInv, I2 = int PhiInv^2.
  auto slab = [&](double a, double b, double x, double& acc) {
    a = std::clamp(a, 0.0, 1.0);
    b = std::clamp(b, 0.0, 1.0);
    if (b <= a) return;
    const double eps = 1e-15;
    const double za = normal_quantile(std::max(a, eps));
    const double zb = normal_quantile(std::min(b, 1.0 - eps));
    const double I0 = b - a;
    const double I1 = normal_pdf(za) - normal_pdf(zb);
    const double I2 = (normal_cdf(zb) - zb * normal_pdf(zb)) -
                      (normal_cdf(za) - za * normal_pdf(za));
    const double c = x - mean;
    acc += c * c * I0 - 2.0 * c * sd * I1 + sd * sd * I2;
  };

  double acc = 0, cum = 0;
  for (const auto& [x, w] : xw) {
    slab(cum, cum + w, x, acc);
    cum += w;
  }
  return std::max(acc, 0.0);
}

}  // namespace mfcl
