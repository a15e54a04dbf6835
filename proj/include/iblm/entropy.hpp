#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "iblm/eigen_sym.hpp"
#include "iblm/error.hpp"
#include "iblm/ops.hpp"
#include "iblm/tape.hpp"

namespace iblm {

// Matrix-based entropy of a token-representation matrix R (tokens x features),
// computed from the eigenvalue distribution of its Gram matrix K = R R^T.
//
// The nonzero spectrum of R R^T equals that of R^T R, so the Gram matrix is
// always formed on the smaller side and the spectrum has min(s, d) entries.
struct MbeConfig {
  double alpha = 2.0;       // Renyi order; 1 selects the Shannon limit
  bool normalize = false;   // divide by log(min(s, d))
  double epsilon = 1e-12;   // spectrum floor, relative to the trace

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DomainError("mbe: alpha must be a positive finite number");
    if (!(epsilon > 0.0)) throw DomainError("mbe: epsilon must be positive");
  }
};

inline constexpr double kLn2 = std::numbers::ln2;

inline double nats_to_bits(double nats) { return nats / kLn2; }

struct SpectrumReport {
  std::vector<double> eigenvalues;          // descending
  double trace = 0.0;
  std::vector<double> normalized_spectrum;  // floored, sums to 1
  double mbe = 0.0;                         // nats
  double mbe_normalized = 0.0;              // mbe / log(min(s, d))
};

namespace detail {

inline void check_representation(const char* op, const Tensor& r) {
  if (r.rank() != 2) throw ShapeError(op, r.shape(), "expected a tokens x features matrix");
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!std::isfinite(r[i])) throw NonFiniteError(std::string(op) + ": non-finite representation", i);
  }
}

inline double rank_scale(const Tensor& r) {
  const double m = static_cast<double>(std::min(r.dim(0), r.dim(1)));
  return m > 1.0 ? std::log(m) : 0.0;
}

inline bool use_feature_side(const Tensor& r) { return r.dim(1) < r.dim(0); }

struct FlooredSpectrum {
  std::vector<double> p;
  std::vector<bool> floored;
  double mass = 0.0;
};

inline FlooredSpectrum floor_spectrum(std::span<const double> lambda, double epsilon) {
  double trace = 0.0;
  for (double l : lambda) trace += l;
  const double floor = epsilon * trace;
  FlooredSpectrum out;
  out.p.resize(lambda.size());
  out.floored.resize(lambda.size());
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    out.floored[i] = lambda[i] < floor;
    out.p[i] = out.floored[i] ? floor : lambda[i];
    out.mass += out.p[i];
  }
  for (auto& v : out.p) v /= out.mass;
  return out;
}

inline double renyi(std::span<const double> p, double alpha) {
  if (alpha == 1.0) {
    double h = 0.0;
    for (double v : p)
      if (v > 0.0) h -= v * std::log(v);
    return h;
  }
  double a = 0.0;
  for (double v : p) a += std::pow(v, alpha);
  return std::log(a) / (1.0 - alpha);
}

}  // namespace detail

// Renyi entropy (nats) of a nonnegative spectrum after flooring every value at
// epsilon * sum and renormalizing. Differentiable in the spectrum.
inline Var spectral_entropy(Var eigenvalues, double alpha, double epsilon) {
  const Tensor& lv = eigenvalues.value();
  double trace = 0.0;
  for (double l : lv.values()) trace += l;
  if (!(trace > epsilon)) throw DomainError("mbe: degenerate representation (trace <= epsilon)");
  auto spec = detail::floor_spectrum(lv.values(), epsilon);
  const double value = detail::renyi(spec.p, alpha);
  const NodeId in = eigenvalues.id;
  return eigenvalues.tape->record(
      "spectral-entropy", Tensor::scalar(value), {in},
      [in, alpha, epsilon, spec = std::move(spec)](Tape& t, NodeId self) {
        const std::size_t n = spec.p.size();
        std::vector<double> gp(n);
        if (alpha == 1.0) {
          for (std::size_t i = 0; i < n; ++i) gp[i] = -(std::log(spec.p[i]) + 1.0);
        } else {
          double a = 0.0;
          for (double v : spec.p) a += std::pow(v, alpha);
          for (std::size_t i = 0; i < n; ++i) gp[i] = alpha * std::pow(spec.p[i], alpha - 1.0) / ((1.0 - alpha) * a);
        }
        double centre = 0.0;
        for (std::size_t i = 0; i < n; ++i) centre += gp[i] * spec.p[i];
        const double up = t.grad(self)[0];
        double floored_sum = 0.0;
        std::vector<double> gmu(n);
        for (std::size_t i = 0; i < n; ++i) {
          gmu[i] = (gp[i] - centre) / spec.mass;
          if (spec.floored[i]) floored_sum += gmu[i];
        }
        Tensor g({n});
        for (std::size_t k = 0; k < n; ++k) g[k] = up * ((spec.floored[k] ? 0.0 : gmu[k]) + epsilon * floored_sum);
        t.accumulate(in, g);
      });
}

// S_alpha = 1/(1-alpha) * log sum_i (lambda_i / tr K)^alpha over the Gram spectrum.
inline Var mbe(Var r, const MbeConfig& config = {}) {
  config.validate();
  const Tensor& rv = r.value();
  detail::check_representation("mbe", rv);
  Var k = detail::use_feature_side(rv) ? gram_matrix(transpose(r)) : gram_matrix(r);
  double trace = 0.0;
  for (std::size_t i = 0; i < k.value().dim(0); ++i) trace += k.value()(i, i);
  if (!(trace > config.epsilon)) throw DomainError("mbe: degenerate representation (trace <= epsilon)");
  Var s = spectral_entropy(symmetric_eigenvalues(k), config.alpha, config.epsilon);
  if (!config.normalize) return s;
  const double denom = detail::rank_scale(rv);
  return scale(s, denom > 0.0 ? 1.0 / denom : 0.0);
}

// Order-2 MBE through the identity sum_i lambda_i^2 = ||K||_F^2:
// S_2 = -log(||K||_F^2 / tr(K)^2). No eigen-decomposition.
inline Var mbe_alpha2_fast(Var r, bool normalize = false, double epsilon = 1e-12) {
  const Tensor& rv = r.value();
  detail::check_representation("mbe-alpha2-fast", rv);
  Var k = detail::use_feature_side(rv) ? gram_matrix(transpose(r)) : gram_matrix(r);
  Var tr = trace(k);
  if (!(tr.item() > epsilon)) throw DomainError("mbe: degenerate representation (trace <= epsilon)");
  Var s = sub(scale(log(tr), 2.0), log(frobenius_norm_squared(k)));
  if (!normalize) return s;
  const double denom = detail::rank_scale(rv);
  return scale(s, denom > 0.0 ? 1.0 / denom : 0.0);
}

// Tape-free evaluation with the full spectral breakdown.
inline SpectrumReport spectrum_report(const Tensor& r, const MbeConfig& config = {}) {
  config.validate();
  detail::check_representation("mbe", r);
  RowMatrix k = detail::use_feature_side(r) ? RowMatrix(r.mat().transpose() * r.mat())
                                            : RowMatrix(r.mat() * r.mat().transpose());
  SpectrumReport rep;
  rep.trace = k.trace();
  if (!(rep.trace > config.epsilon)) throw DomainError("mbe: degenerate representation (trace <= epsilon)");
  rep.eigenvalues = jacobi_eigen(from_matrix(k)).values;
  auto spec = detail::floor_spectrum(rep.eigenvalues, config.epsilon);
  rep.mbe = detail::renyi(spec.p, config.alpha);
  const double denom = detail::rank_scale(r);
  rep.mbe_normalized = denom > 0.0 ? rep.mbe / denom : 0.0;
  rep.normalized_spectrum = std::move(spec.p);
  return rep;
}

inline double mbe_value(const Tensor& r, const MbeConfig& config = {}) {
  const auto rep = spectrum_report(r, config);
  return config.normalize ? rep.mbe_normalized : rep.mbe;
}

// Fast order-2 value without a tape.
inline double mbe_alpha2_value(const Tensor& r, bool normalize = false, double epsilon = 1e-12) {
  detail::check_representation("mbe-alpha2-fast", r);
  RowMatrix k = detail::use_feature_side(r) ? RowMatrix(r.mat().transpose() * r.mat())
                                            : RowMatrix(r.mat() * r.mat().transpose());
  const double tr = k.trace();
  if (!(tr > epsilon)) throw DomainError("mbe: degenerate representation (trace <= epsilon)");
  const double s = 2.0 * std::log(tr) - std::log(k.squaredNorm());
  if (!normalize) return s;
  const double denom = detail::rank_scale(r);
  return denom > 0.0 ? s / denom : 0.0;
}

// ---------------------------------------------------------------------------
// Discrete entropy and bound calculators. All results are in bits.

inline double shannon_entropy(std::span<const double> p) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0)) throw DomainError("shannon-entropy: entry " + std::to_string(i) + " is negative");
    total += p[i];
  }
  if (p.empty() || std::abs(total - 1.0) > 1e-8) throw DomainError("shannon-entropy: probabilities must sum to 1");
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log2(v);
  return h;
}

struct MinProbBound {
  double exact = 0.0;
  double approx = 0.0;  // beta * log2(n) with beta = alpha_min * n
};

// Lowest entropy of an n-outcome distribution whose every probability is at
// least alpha_min: one outcome takes 1 - alpha_min (n - 1), the rest alpha_min.
inline MinProbBound min_prob_entropy_bound(int n, double alpha_min) {
  if (n < 2) throw DomainError("min-prob-entropy-bound: n must be >= 2");
  const double nn = static_cast<double>(n);
  if (!(alpha_min > 0.0) || alpha_min > (1.0 / nn) * (1.0 + 1e-12)) {
    throw DomainError("min-prob-entropy-bound: alpha_min must lie in (0, 1/n]");
  }
  const double rest = nn - 1.0;
  const double top = 1.0 - alpha_min * rest;
  MinProbBound b;
  b.exact = -top * std::log2(top) - rest * alpha_min * std::log2(alpha_min);
  b.approx = alpha_min * nn * std::log2(nn);
  return b;
}

// beta = H(p) / log2 n, the constant for which H(p) >= beta log2 n holds with equality.
inline double beta_for_distribution(std::span<const double> p) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0)) throw DomainError("beta-for-distribution: entry " + std::to_string(i) + " is not positive");
  }
  const double h = shannon_entropy(p);
  if (p.size() == 1) return 1.0;
  const double beta = h / std::log2(static_cast<double>(p.size()));
  return std::clamp(beta, std::numeric_limits<double>::min(), 1.0);
}

struct BoundInputs {
  std::size_t sample_count = 0;             // N
  std::vector<double> layer_entropy_bits;   // H(R_l)
  double alpha_exponent = 1.0;              // >= 1
  double beta = 1.0;                        // (0, 1]
  std::size_t omega_size = 1;
  double min_prob = 1.0;

  void validate() const {
    if (sample_count < 2) throw DomainError("generalization-gap-bound: N must be >= 2");
    if (layer_entropy_bits.empty()) throw DomainError("generalization-gap-bound: no layer entropies");
    for (double h : layer_entropy_bits) {
      if (!std::isfinite(h) || h < 0.0) throw DomainError("generalization-gap-bound: entropies must be finite and >= 0");
    }
    if (!(alpha_exponent >= 1.0) || !std::isfinite(alpha_exponent)) {
      throw DomainError("generalization-gap-bound: alpha exponent must be >= 1");
    }
    if (!(beta > 0.0 && beta <= 1.0)) throw DomainError("bound inputs: beta must lie in (0, 1]");
    if (omega_size < 1) throw DomainError("bound inputs: omega size must be positive");
    if (!(min_prob > 0.0) || min_prob > 1.0 / static_cast<double>(omega_size) * (1.0 + 1e-12)) {
      throw DomainError("bound inputs: min-prob must lie in (0, 1/|omega|]");
    }
  }
};

// log2(N) * 2^(alpha * min_l H(R_l)) / sqrt(N). The big-O constant is taken
// as 1, so only ratios and trends of this value carry meaning.
inline double generalization_gap_bound(const BoundInputs& in) {
  in.validate();
  const double h_min = *std::min_element(in.layer_entropy_bits.begin(), in.layer_entropy_bits.end());
  const double n = static_cast<double>(in.sample_count);
  return std::log2(n) * std::exp2(in.alpha_exponent * h_min) / std::sqrt(n);
}

}  // namespace iblm
