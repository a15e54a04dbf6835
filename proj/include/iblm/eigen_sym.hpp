#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "iblm/error.hpp"
#include "iblm/tensor.hpp"

namespace iblm {

struct SymmetricEigen {
  std::vector<double> values;  // descending
  RowMatrix vectors;           // column i pairs with values[i]
  int sweeps = 0;
};

// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
// Converged when the off-diagonal Frobenius norm drops to tol * trace
// (sum of |diagonal| when the trace is not positive).
inline SymmetricEigen jacobi_eigen(const Tensor& k, double tol = 1e-12, int max_sweeps = 100) {
  if (k.rank() != 2 || k.dim(0) != k.dim(1)) throw ShapeError("symmetric-eigenvalues", k.shape(), "matrix must be square");
  const auto n = static_cast<Eigen::Index>(k.dim(0));
  RowMatrix a = k.mat();
  double scale = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) scale = std::max(scale, std::abs(a(i, i)));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > 1e-9 * std::max(1.0, scale)) {
        throw ShapeError("symmetric-eigenvalues", k.shape(), "matrix is not symmetric");
      }
    }
  }
  a = 0.5 * (a + a.transpose()).eval();

  RowMatrix v = RowMatrix::Identity(n, n);
  const double trace = a.trace();
  const double threshold = tol * (trace > 0.0 ? trace : a.diagonal().cwiseAbs().sum());

  auto off_norm = [&] {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };

  int sweep = 0;
  while (off_norm() > threshold) {
    if (sweep == max_sweeps) throw ConvergenceError("symmetric-eigenvalues: Jacobi did not converge", sweep);
    ++sweep;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index r = 0; r < n; ++r) {
          const double arp = a(r, p);
          const double arq = a(r, q);
          a(r, p) = c * arp - s * arq;
          a(r, q) = s * arp + c * arq;
        }
        for (Eigen::Index r = 0; r < n; ++r) {
          const double apr = a(p, r);
          const double aqr = a(q, r);
          a(p, r) = c * apr - s * aqr;
          a(q, r) = s * apr + c * aqr;
        }
        for (Eigen::Index r = 0; r < n; ++r) {
          const double vrp = v(r, p);
          const double vrq = v(r, q);
          v(r, p) = c * vrp - s * vrq;
          v(r, q) = s * vrp + c * vrq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) > a(j, j); });

  SymmetricEigen out;
  out.sweeps = sweep;
  out.values.resize(static_cast<std::size_t>(n));
  out.vectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values[static_cast<std::size_t>(i)] = a(order[i], order[i]);
    out.vectors.col(i) = v.col(order[i]);
  }
  return out;
}

}  // namespace iblm
