#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "iblm/tensor.hpp"

namespace iblm::testing {

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  return Tensor::randn({rows, cols}, rng, stddev);
}

// Eigenvalues of R R^T through Eigen's self-adjoint solver on the full
// s x s Gram matrix, descending. Independent of the Jacobi path.
inline std::vector<double> reference_gram_spectrum(const Tensor& r) {
  const Eigen::MatrixXd k = r.mat() * r.mat().transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(k, Eigen::EigenvaluesOnly);
  std::vector<double> ev(solver.eigenvalues().data(), solver.eigenvalues().data() + solver.eigenvalues().size());
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

// Renyi entropy (nats) of the Gram spectrum computed directly from the
// definition, keeping the min(s, d) leading eigenvalues and the same floor.
inline double reference_mbe(const Tensor& r, double alpha, double epsilon = 1e-12) {
  auto ev = reference_gram_spectrum(r);
  ev.resize(std::min(r.dim(0), r.dim(1)));
  double trace = 0.0;
  for (double l : ev) trace += l;
  double mass = 0.0;
  for (auto& l : ev) {
    l = std::max(l, epsilon * trace);
    mass += l;
  }
  if (alpha == 1.0) {
    double h = 0.0;
    for (double l : ev) h -= (l / mass) * std::log(l / mass);
    return h;
  }
  double s = 0.0;
  for (double l : ev) s += std::pow(l / mass, alpha);
  return std::log(s) / (1.0 - alpha);
}

inline Tensor random_orthogonal(std::size_t n, std::uint64_t seed) {
  const Tensor a = random_matrix(n, n, seed);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(a.mat()));
  Eigen::MatrixXd q = qr.householderQ();
  return from_matrix(q);
}

}  // namespace iblm::testing
