#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "segdiff/common.hpp"
#include "segdiff/mask.hpp"

namespace segdiff {

/// Dice overlap 2|A∩B| / (|A|+|B|) for one class; 1.0 when both regions are
/// empty, which rewards correctly predicting absence.
inline double dice(const Mask& a, const Mask& b, int cls) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("dice: mask size mismatch " + std::to_string(a.width) +
                                "x" + std::to_string(a.height) + " vs " +
                                std::to_string(b.width) + "x" + std::to_string(b.height));
  std::int64_t in_a = 0, in_b = 0, both = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const bool pa = a.labels[i] == cls;
    const bool pb = b.labels[i] == cls;
    in_a += pa;
    in_b += pb;
    both += pa && pb;
  }
  if (in_a + in_b == 0) return 1.0;
  return 2.0 * double(both) / double(in_a + in_b);
}

/// Mean Dice over the foreground classes {1, .., C-1}.
inline double mean_foreground_dice(const Mask& a, const Mask& b) {
  const int c = std::max(a.num_classes, b.num_classes);
  if (c < 2) throw std::invalid_argument("mean_foreground_dice: no foreground classes");
  double s = 0.0;
  for (int cls = 1; cls < c; ++cls) s += dice(a, b, cls);
  return s / double(c - 1);
}

/// Eigen-decomposition of a symmetric matrix by the cyclic Jacobi method.
/// Matrices are row-major n x n; eigenvectors come back as columns of q.
struct SymmetricEigen {
  std::vector<double> values;  // n
  std::vector<double> q;       // n x n, column j is the eigenvector of values[j]
  int n = 0;
};

inline SymmetricEigen jacobi_eigen(std::vector<double> m, int n, int max_sweeps = 100) {
  if (n < 1 || static_cast<std::int64_t>(m.size()) != std::int64_t(n) * n)
    throw std::invalid_argument("jacobi_eigen: bad matrix size");
  SymmetricEigen out;
  out.n = n;
  out.q.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) out.q[std::size_t(i) * n + i] = 1.0;

  auto at = [&](std::vector<double>& v, int i, int j) -> double& {
    return v[std::size_t(i) * n + j];
  };

  double scale = 0.0;
  for (int i = 0; i < n; ++i) scale = std::max(scale, std::abs(at(m, i, i)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) scale = std::max(scale, std::abs(at(m, i, j)));
  const double tol = scale > 0 ? 1e-14 * scale : 0.0;

  bool converged = n == 1;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += at(m, i, j) * at(m, i, j);
    if (std::sqrt(off) <= tol) {
      converged = true;
      break;
    }
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = at(m, p, q);
        if (std::abs(apq) <= tol / std::max(1, n)) continue;
        const double theta = (at(m, q, q) - at(m, p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        const double tau = s / (1.0 + c);
        const double app = at(m, p, p), aqq = at(m, q, q);
        at(m, p, p) = app - t * apq;
        at(m, q, q) = aqq + t * apq;
        at(m, p, q) = 0.0;
        at(m, q, p) = 0.0;
        for (int r = 0; r < n; ++r) {
          if (r != p && r != q) {
            const double arp = at(m, r, p), arq = at(m, r, q);
            at(m, r, p) = arp - s * (arq + tau * arp);
            at(m, p, r) = at(m, r, p);
            at(m, r, q) = arq + s * (arp - tau * arq);
            at(m, q, r) = at(m, r, q);
          }
          const double qrp = at(out.q, r, p), qrq = at(out.q, r, q);
          at(out.q, r, p) = qrp - s * (qrq + tau * qrp);
          at(out.q, r, q) = qrq + s * (qrp - tau * qrq);
        }
      }
    }
  }
  if (!converged) {
    double off = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) off += at(m, i, j) * at(m, i, j);
    if (std::sqrt(off) > tol)
      throw NumericError("jacobi_eigen: no convergence after " +
                         std::to_string(max_sweeps) + " sweeps");
  }
  out.values.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.values[std::size_t(i)] = at(m, i, i);
  return out;
}

/// Gaussian moments of a feature set; covariance uses the 1/n convention so
/// duplicating a set leaves the fit unchanged.
struct GaussianFit {
  int dim = 0;
  std::vector<double> mean;
  std::vector<double> cov;  // dim x dim row-major
};

inline GaussianFit fit_gaussian(const std::vector<std::vector<double>>& features) {
  if (features.empty()) throw std::invalid_argument("fit_gaussian: empty feature set");
  GaussianFit g;
  g.dim = static_cast<int>(features.front().size());
  const double n = double(features.size());
  g.mean.assign(static_cast<std::size_t>(g.dim), 0.0);
  for (const auto& f : features) {
    if (static_cast<int>(f.size()) != g.dim)
      throw std::invalid_argument("fit_gaussian: inconsistent feature dimension");
    for (int i = 0; i < g.dim; ++i) g.mean[std::size_t(i)] += f[std::size_t(i)];
  }
  for (auto& v : g.mean) v /= n;
  g.cov.assign(static_cast<std::size_t>(g.dim) * g.dim, 0.0);
  for (const auto& f : features)
    for (int i = 0; i < g.dim; ++i)
      for (int j = 0; j < g.dim; ++j)
        g.cov[std::size_t(i) * g.dim + j] +=
            (f[std::size_t(i)] - g.mean[std::size_t(i)]) *
            (f[std::size_t(j)] - g.mean[std::size_t(j)]);
  for (auto& v : g.cov) v /= n;
  return g;
}

namespace detail {

/// Q f(L) Q^T for a symmetric eigendecomposition.
inline std::vector<double> apply_spectral(const SymmetricEigen& e,
                                          const std::vector<double>& fvals) {
  const int n = e.n;
  std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int k = 0; k < n; ++k)
        s += e.q[std::size_t(i) * n + k] * fvals[std::size_t(k)] *
             e.q[std::size_t(j) * n + k];
      out[std::size_t(i) * n + j] = s;
    }
  return out;
}

inline std::vector<double> matmul_sq(const std::vector<double>& a,
                                     const std::vector<double>& b, int n) {
  std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      const double av = a[std::size_t(i) * n + k];
      for (int j = 0; j < n; ++j) out[std::size_t(i) * n + j] += av * b[std::size_t(k) * n + j];
    }
  return out;
}

inline std::vector<double> clamped_sqrt_eigs(const SymmetricEigen& e, const char* what) {
  std::vector<double> roots(e.values.size());
  for (std::size_t i = 0; i < e.values.size(); ++i) {
    double v = e.values[i];
    if (v < -1e-8)
      throw NumericError(std::string(what) + ": eigenvalue " + std::to_string(v) +
                         " below -1e-8");
    if (v < 0) v = 0;
    roots[i] = std::sqrt(v);
  }
  return roots;
}

}  // namespace detail

/// Frechet distance between two Gaussian fits:
///   |mu_a - mu_b|^2 + tr(S_a + S_b - 2 sqrtm(sqrt(S_a) S_b sqrt(S_a)))
/// with both matrix square roots computed through the Jacobi eigensolver.
inline double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  if (a.dim != b.dim)
    throw std::invalid_argument("frechet_distance: dimension mismatch " +
                                std::to_string(a.dim) + " vs " + std::to_string(b.dim));
  const int n = a.dim;
  double mean_term = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = a.mean[std::size_t(i)] - b.mean[std::size_t(i)];
    mean_term += d * d;
  }
  double tr_a = 0.0, tr_b = 0.0;
  for (int i = 0; i < n; ++i) {
    tr_a += a.cov[std::size_t(i) * n + i];
    tr_b += b.cov[std::size_t(i) * n + i];
  }

  const SymmetricEigen ea = jacobi_eigen(a.cov, n);
  const std::vector<double> sqrt_a =
      detail::apply_spectral(ea, detail::clamped_sqrt_eigs(ea, "frechet sqrt(cov_a)"));
  std::vector<double> inner = detail::matmul_sq(detail::matmul_sq(sqrt_a, b.cov, n),
                                                sqrt_a, n);
  // Symmetrize before the second decomposition to shed rounding asymmetry.
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double v = 0.5 * (inner[std::size_t(i) * n + j] + inner[std::size_t(j) * n + i]);
      inner[std::size_t(i) * n + j] = v;
      inner[std::size_t(j) * n + i] = v;
    }
  const SymmetricEigen ei = jacobi_eigen(std::move(inner), n);
  const std::vector<double> roots = detail::clamped_sqrt_eigs(ei, "frechet sqrtm(inner)");
  double tr_sqrt = 0.0;
  for (double r : roots) tr_sqrt += r;

  return mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
}

/// Frechet distance between the Gaussian fits of two raw feature sets.
inline double feature_fid(const std::vector<std::vector<double>>& set_a,
                          const std::vector<std::vector<double>>& set_b) {
  return frechet_distance(fit_gaussian(set_a), fit_gaussian(set_b));
}

}  // namespace segdiff
