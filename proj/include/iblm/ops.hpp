#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "iblm/eigen_sym.hpp"
#include "iblm/error.hpp"
#include "iblm/tape.hpp"
#include "iblm/tensor.hpp"

// Differentiable operations. Every function records its output on the tape
// of its inputs together with a backward rule.
namespace iblm {

namespace detail {

inline Tape& same_tape(const char* op, Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw TapeError(std::string(op) + ": operands live on different tapes");
  return *a.tape;
}

// Rank-matched broadcasting: each axis must agree or be 1 on one side.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) throw ShapeError(op, a, b);
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      throw ShapeError(op, a, b);
    }
  }
  return out;
}

inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(in.size(), 0);
  std::size_t s = 1;
  for (std::size_t ax = in.size(); ax-- > 0;) {
    strides[ax] = (in[ax] == 1 && out[ax] != 1) ? 0 : s;
    s *= in[ax];
  }
  return strides;
}

// Calls f(out_index, offset_a, offset_b) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t r = out.size();
  const std::size_t total = numel(out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, oa, ob);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < out[ax]) break;
      oa -= sa[ax] * out[ax];
      ob -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

// Sums a gradient of broadcast shape `from` back down to `target`.
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out(target, 0.0);
  const auto st = broadcast_strides(target, g.shape());
  const std::vector<std::size_t> zero(target.size(), 0);
  for_each_broadcast(g.shape(), st, zero, [&](std::size_t i, std::size_t ot, std::size_t) { out[ot] += g[i]; });
  return out;
}

template <class F>
Tensor binary_broadcast(const char* op, const Tensor& a, const Tensor& b, F&& f) {
  const Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  Tensor out(out_shape);
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  for_each_broadcast(out_shape, broadcast_strides(a.shape(), out_shape), broadcast_strides(b.shape(), out_shape),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(a[ia], b[ib]); });
  return out;
}

inline void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(op, t.shape(), "expected a matrix");
}

template <class F>
Var unary(const char* op, Var a, F&& forward_and_derivative) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  Tensor dy_dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto [v, d] = forward_and_derivative(x[i]);
    y[i] = v;
    dy_dx[i] = d;
  }
  const NodeId in = a.id;
  return a.tape->record(op, std::move(y), {in}, [in, dy_dx = std::move(dy_dx)](Tape& t, NodeId self) {
    Tensor g = t.grad(self);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= dy_dx[i];
    t.accumulate(in, g);
  });
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix("matmul", av);
  detail::require_matrix("matmul", bv);
  if (av.dim(1) != bv.dim(0)) throw ShapeError("matmul", av.shape(), bv.shape());
  Tensor out({av.dim(0), bv.dim(1)});
  out.mat().noalias() = av.mat() * bv.mat();
  const NodeId ia = a.id;
  const NodeId ib = b.id;
  return tape.record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Tensor ga(t.value(ia).shape());
      ga.mat().noalias() = g.mat() * t.value(ib).mat().transpose();
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ib)) {
      Tensor gb(t.value(ib).shape());
      gb.mat().noalias() = t.value(ia).mat().transpose() * g.mat();
      t.accumulate(ib, gb);
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& av = a.value();
  detail::require_matrix("transpose", av);
  Tensor out({av.dim(1), av.dim(0)});
  out.mat() = av.mat().transpose();
  const NodeId in = a.id;
  return a.tape->record("transpose", std::move(out), {in}, [in](Tape& t, NodeId self) {
    const Tensor& g = t.grad(self);
    Tensor ga({g.dim(1), g.dim(0)});
    ga.mat() = g.mat().transpose();
    t.accumulate(in, ga);
  });
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape("add", a, b);
  Tensor out = detail::binary_broadcast("add", a.value(), b.value(), [](double x, double y) { return x + y; });
  const NodeId ia = a.id;
  const NodeId ib = b.id;
  return tape.record("add", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, detail::reduce_to(g, t.value(ia).shape()));
    if (t.requires_grad(ib)) t.accumulate(ib, detail::reduce_to(g, t.value(ib).shape()));
  });
}

inline Var sub(Var a, Var b) {
  Tape& tape = detail::same_tape("sub", a, b);
  Tensor out = detail::binary_broadcast("sub", a.value(), b.value(), [](double x, double y) { return x - y; });
  const NodeId ia = a.id;
  const NodeId ib = b.id;
  return tape.record("sub", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, detail::reduce_to(g, t.value(ia).shape()));
    if (t.requires_grad(ib)) {
      Tensor gb = detail::reduce_to(g, t.value(ib).shape());
      for (auto& v : gb.storage()) v = -v;
      t.accumulate(ib, gb);
    }
  });
}

inline Var scale(Var a, double c) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = c * av[i];
  const NodeId in = a.id;
  return a.tape->record("scalar-mul", std::move(out), {in}, [in, c](Tape& t, NodeId self) {
    Tensor g = t.grad(self);
    for (auto& v : g.storage()) v *= c;
    t.accumulate(in, g);
  });
}

// Elementwise product with rank-matched broadcasting.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape("mul", a, b);
  Tensor out = detail::binary_broadcast("mul", a.value(), b.value(), [](double x, double y) { return x * y; });
  const NodeId ia = a.id;
  const NodeId ib = b.id;
  return tape.record("mul", std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId self) {
    const Tensor& g = t.grad(self);
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor ga = detail::binary_broadcast("mul", g, bv, [](double x, double y) { return x * y; });
      t.accumulate(ia, detail::reduce_to(ga, av.shape()));
    }
    if (t.requires_grad(ib)) {
      Tensor gb = detail::binary_broadcast("mul", g, av, [](double x, double y) { return x * y; });
      t.accumulate(ib, detail::reduce_to(gb, bv.shape()));
    }
  });
}

inline Var relu(Var a) {
  return detail::unary("relu", a, [](double x) { return std::pair{x > 0.0 ? x : 0.0, x > 0.0 ? 1.0 : 0.0}; });
}

// Exact (erf) GELU.
inline Var gelu(Var a) {
  return detail::unary("gelu", a, [](double x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    const double pdf = std::exp(-0.5 * x * x) * 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    return std::pair{x * cdf, cdf + x * pdf};
  });
}

inline Var log(Var a) {
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] > 0.0)) throw NonFiniteError("log: argument must be positive", i);
  }
  return detail::unary("log", a, [](double x) { return std::pair{std::log(x), 1.0 / x}; });
}

inline Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  const NodeId in = a.id;
  return a.tape->record("sum", Tensor::scalar(s), {in}, [in](Tape& t, NodeId self) {
    t.accumulate(in, Tensor(t.value(in).shape(), t.grad(self)[0]));
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Normalizes over the last axis, then applies per-feature gain and bias
// (each holding exactly `features` values).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& tape = detail::same_tape("layer-norm", x, gain);
  detail::same_tape("layer-norm", x, bias);
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  const std::size_t n = xv.rows();
  if (d < 1) throw ShapeError("layer-norm", xv.shape(), "feature extent must be >= 1");
  if (gain.value().size() != d) throw ShapeError("layer-norm", xv.shape(), gain.value().shape());
  if (bias.value().size() != d) throw ShapeError("layer-norm", xv.shape(), bias.value().shape());
  Tensor xhat(xv.shape());
  std::vector<double> rstd(n);
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.values().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * rstd[r];
      xhat[r * d + c] = h;
      out[r * d + c] = gv[c] * h + bv[c];
    }
  }
  const NodeId ix = x.id;
  const NodeId ig = gain.id;
  const NodeId ib = bias.id;
  return tape.record("layer-norm", std::move(out), {ix, ig, ib},
                     [ix, ig, ib, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, NodeId self) {
                       const Tensor& g = t.grad(self);
                       const Tensor& gv = t.value(ig);
                       if (t.requires_grad(ig) || t.requires_grad(ib)) {
                         Tensor dg(gv.shape(), 0.0);
                         Tensor db(t.value(ib).shape(), 0.0);
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t c = 0; c < d; ++c) {
                             dg[c] += g[r * d + c] * xhat[r * d + c];
                             db[c] += g[r * d + c];
                           }
                         }
                         t.accumulate(ig, dg);
                         t.accumulate(ib, db);
                       }
                       if (t.requires_grad(ix)) {
                         Tensor dx(t.value(ix).shape());
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < n; ++r) {
                           double m1 = 0.0;
                           double m2 = 0.0;
                           for (std::size_t c = 0; c < d; ++c) {
                             const double dh = g[r * d + c] * gv[c];
                             m1 += dh;
                             m2 += dh * xhat[r * d + c];
                           }
                           m1 *= inv_d;
                           m2 *= inv_d;
                           for (std::size_t c = 0; c < d; ++c) {
                             const double dh = g[r * d + c] * gv[c];
                             dx[r * d + c] = rstd[r] * (dh - m1 - xhat[r * d + c] * m2);
                           }
                         }
                         t.accumulate(ix, dx);
                       }
                     });
}

// Gathers rows of `table` (vocab x dim) for each id.
inline Var embedding(Var table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  detail::require_matrix("embedding-lookup", tv);
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  if (ids.empty()) throw ShapeError("embedding-lookup", tv.shape(), "no ids given");
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ShapeError("embedding-lookup", tv.shape(), "id " + std::to_string(ids[i]) + " out of range");
    }
    std::copy_n(tv.values().data() + static_cast<std::size_t>(ids[i]) * d, d, &out[i * d]);
  }
  const NodeId in = table.id;
  return table.tape->record("embedding-lookup", std::move(out), {in},
                            [in, d, ids = std::vector<int>(ids.begin(), ids.end())](Tape& t, NodeId self) {
                              const Tensor& g = t.grad(self);
                              Tensor gt(t.value(in).shape(), 0.0);
                              for (std::size_t i = 0; i < ids.size(); ++i) {
                                double* dst = &gt[static_cast<std::size_t>(ids[i]) * d];
                                for (std::size_t c = 0; c < d; ++c) dst[c] += g[i * d + c];
                              }
                              t.accumulate(in, gt);
                            });
}

inline constexpr int kIgnoreTarget = -1;

// Mean cross-entropy of row-wise softmax(logits) against integer targets.
// Rows whose target is kIgnoreTarget do not contribute.
inline Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor& lv = logits.value();
  detail::require_matrix("softmax-cross-entropy", lv);
  const std::size_t n = lv.dim(0);
  const std::size_t v = lv.dim(1);
  if (targets.size() != n) throw ShapeError("softmax-cross-entropy", lv.shape(), Shape{targets.size()});
  Tensor probs(lv.shape());
  double loss = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = lv.values().data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      probs[r * v + c] = std::exp(row[c] - mx);
      z += probs[r * v + c];
    }
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    const int tgt = targets[r];
    if (tgt == kIgnoreTarget) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= v) {
      throw ShapeError("softmax-cross-entropy", lv.shape(), "target " + std::to_string(tgt) + " out of range");
    }
    loss += -(row[tgt] - mx - std::log(z));
    ++counted;
  }
  if (counted == 0) throw ShapeError("softmax-cross-entropy", lv.shape(), "every target is ignored");
  loss /= static_cast<double>(counted);
  const NodeId in = logits.id;
  return logits.tape->record(
      "softmax-cross-entropy", Tensor::scalar(loss), {in},
      [in, n, v, counted, probs = std::move(probs), tg = std::vector<int>(targets.begin(), targets.end())](
          Tape& t, NodeId self) {
        const double scale = t.grad(self)[0] / static_cast<double>(counted);
        Tensor g(t.value(in).shape(), 0.0);
        for (std::size_t r = 0; r < n; ++r) {
          if (tg[r] == kIgnoreTarget) continue;
          for (std::size_t c = 0; c < v; ++c) g[r * v + c] = scale * probs[r * v + c];
          g[r * v + static_cast<std::size_t>(tg[r])] -= scale;
        }
        t.accumulate(in, g);
      });
}

// Mean absolute error against a constant target.
inline Var l1_loss(Var pred, const Tensor& target) {
  const Tensor& pv = pred.value();
  if (pv.shape() != target.shape()) throw ShapeError("l1-loss", pv.shape(), target.shape());
  double loss = 0.0;
  Tensor sign(pv.shape());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double diff = pv[i] - target[i];
    loss += std::abs(diff);
    sign[i] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  }
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  const NodeId in = pred.id;
  return pred.tape->record("l1-loss", Tensor::scalar(loss * inv_n), {in},
                           [in, inv_n, sign = std::move(sign)](Tape& t, NodeId self) {
                             Tensor g = sign;
                             const double s = t.grad(self)[0] * inv_n;
                             for (auto& x : g.storage()) x *= s;
                             t.accumulate(in, g);
                           });
}

// K = R * R^T.
inline Var gram_matrix(Var r) {
  const Tensor& rv = r.value();
  detail::require_matrix("gram-matrix", rv);
  const std::size_t s = rv.dim(0);
  Tensor k({s, s});
  k.mat().noalias() = rv.mat() * rv.mat().transpose();
  const NodeId in = r.id;
  return r.tape->record("gram-matrix", std::move(k), {in}, [in](Tape& t, NodeId self) {
    const Tensor& g = t.grad(self);
    const Tensor& rv = t.value(in);
    Tensor gr(rv.shape());
    gr.mat().noalias() = (g.mat() + g.mat().transpose()) * rv.mat();
    t.accumulate(in, gr);
  });
}

inline Var trace(Var k) {
  const Tensor& kv = k.value();
  detail::require_matrix("trace", kv);
  if (kv.dim(0) != kv.dim(1)) throw ShapeError("trace", kv.shape(), "matrix must be square");
  const std::size_t n = kv.dim(0);
  double tr = 0.0;
  for (std::size_t i = 0; i < n; ++i) tr += kv(i, i);
  const NodeId in = k.id;
  return k.tape->record("trace", Tensor::scalar(tr), {in}, [in, n](Tape& t, NodeId self) {
    Tensor g(t.value(in).shape(), 0.0);
    const double up = t.grad(self)[0];
    for (std::size_t i = 0; i < n; ++i) g(i, i) = up;
    t.accumulate(in, g);
  });
}

inline Var frobenius_norm_squared(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v * v;
  const NodeId in = a.id;
  return a.tape->record("frobenius-norm-squared", Tensor::scalar(s), {in}, [in](Tape& t, NodeId self) {
    Tensor g = t.value(in);
    const double up = 2.0 * t.grad(self)[0];
    for (auto& v : g.storage()) v *= up;
    t.accumulate(in, g);
  });
}

// Eigenvalues of a symmetric matrix in descending order, via cyclic Jacobi.
// Backward uses d(lambda_i) = v_i^T dK v_i; upstream gradients are averaged
// inside clusters of (numerically) equal eigenvalues, which is exact for any
// function that is symmetric in the spectrum.
inline Var symmetric_eigenvalues(Var k, double tol = 1e-12, int max_sweeps = 100) {
  SymmetricEigen eig = jacobi_eigen(k.value(), tol, max_sweeps);
  const std::size_t n = eig.values.size();
  Tensor out({n}, eig.values);
  double spread = 0.0;
  for (double l : eig.values) spread += std::abs(l);
  const double cluster_tol = 1e-10 * std::max(spread, 1e-300);
  const NodeId in = k.id;
  return k.tape->record("symmetric-eigenvalues", std::move(out), {in},
                        [in, n, cluster_tol, eig = std::move(eig)](Tape& t, NodeId self) {
                          const Tensor& g = t.grad(self);
                          std::vector<double> weights(g.values().begin(), g.values().end());
                          std::size_t begin = 0;
                          while (begin < n) {
                            std::size_t end = begin + 1;
                            while (end < n && eig.values[end - 1] - eig.values[end] <= cluster_tol) ++end;
                            double avg = 0.0;
                            for (std::size_t i = begin; i < end; ++i) avg += g[i];
                            avg /= static_cast<double>(end - begin);
                            for (std::size_t i = begin; i < end; ++i) weights[i] = avg;
                            begin = end;
                          }
                          const auto w = Eigen::Map<const Eigen::VectorXd>(weights.data(), static_cast<Eigen::Index>(n));
                          Tensor gk({n, n});
                          gk.mat().noalias() = eig.vectors * w.asDiagonal() * eig.vectors.transpose();
                          t.accumulate(in, gk);
                        });
}

// Multi-head causal self-attention over packed [q | k | v] rows.
// qkv: (batch*seq) x (3*dim); returns (batch*seq) x dim.
inline Var causal_attention(Var qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Tensor& in_v = qkv.value();
  detail::require_matrix("causal-attention", in_v);
  if (in_v.dim(0) != batch * seq || in_v.dim(1) % 3 != 0) {
    throw ShapeError("causal-attention", in_v.shape(), Shape{batch * seq, 3});
  }
  const std::size_t dim = in_v.dim(1) / 3;
  if (heads == 0 || dim % heads != 0) throw ShapeError("causal-attention", in_v.shape(), "dim not divisible by heads");
  const std::size_t hd = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto T = static_cast<Eigen::Index>(seq);
  const auto H = static_cast<Eigen::Index>(hd);

  Tensor out({batch * seq, dim});
  std::vector<RowMatrix> probs(batch * heads);
  const auto src = in_v.mat();
  auto dst = out.mat();
  for (std::size_t b = 0; b < batch; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * seq);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * hd);
      const auto q = src.block(r0, c0, T, H);
      const auto kk = src.block(r0, static_cast<Eigen::Index>(dim) + c0, T, H);
      const auto vv = src.block(r0, static_cast<Eigen::Index>(2 * dim) + c0, T, H);
      RowMatrix p = (q * kk.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < T; ++i) {
        double mx = p(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, p(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          z += p(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= z;
        for (Eigen::Index j = i + 1; j < T; ++j) p(i, j) = 0.0;
      }
      dst.block(r0, c0, T, H).noalias() = p * vv;
      probs[b * heads + h] = std::move(p);
    }
  }

  const NodeId in = qkv.id;
  return qkv.tape->record(
      "causal-attention", std::move(out), {in},
      [in, batch, heads, dim, T, H, inv_sqrt, probs = std::move(probs)](Tape& t, NodeId self) {
        const auto g = t.grad(self).mat();
        const auto src = t.value(in).mat();
        Tensor gin(t.value(in).shape(), 0.0);
        auto gm = gin.mat();
        for (std::size_t b = 0; b < batch; ++b) {
          const auto r0 = static_cast<Eigen::Index>(b) * T;
          for (std::size_t h = 0; h < heads; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h) * H;
            const auto kq = static_cast<Eigen::Index>(dim);
            const RowMatrix& p = probs[b * heads + h];
            const auto q = src.block(r0, c0, T, H);
            const auto kk = src.block(r0, kq + c0, T, H);
            const auto vv = src.block(r0, 2 * kq + c0, T, H);
            const auto go = g.block(r0, c0, T, H);
            gm.block(r0, 2 * kq + c0, T, H).noalias() += p.transpose() * go;
            RowMatrix dp = go * vv.transpose();
            RowMatrix ds(T, T);
            for (Eigen::Index i = 0; i < T; ++i) {
              double dot = 0.0;
              for (Eigen::Index j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
              for (Eigen::Index j = 0; j < T; ++j) ds(i, j) = j <= i ? p(i, j) * (dp(i, j) - dot) * inv_sqrt : 0.0;
            }
            gm.block(r0, c0, T, H).noalias() += ds * kk;
            gm.block(r0, kq + c0, T, H).noalias() += ds.transpose() * q;
          }
        }
        t.accumulate(in, gin);
      });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

}  // namespace iblm
