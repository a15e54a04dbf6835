#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "iblm/error.hpp"
#include "iblm/tape.hpp"

namespace iblm {

// A scalar function of one tensor, built on whatever tape its argument lives on.
using ScalarFn = std::function<Var(Var)>;

inline double evaluate(const ScalarFn& f, const Tensor& point) {
  Tape tape;
  Var out = f(tape.constant(point));
  return out.item();
}

// Max over coordinates of |analytic - numeric| / max(1, |numeric|), with the
// numeric derivative taken by central differences.
inline double grad_check(const ScalarFn& f, const Tensor& point, double step = 1e-5) {
  Tensor analytic;
  {
    Tape tape;
    Var x = tape.leaf(point);
    Var y = f(x);
    if (!std::isfinite(y.item())) throw NonFiniteError("grad-check: non-finite value at the base point", 0);
    tape.backward(y);
    analytic = x.has_grad() ? x.grad() : Tensor(point.shape(), 0.0);
  }
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double up = evaluate(f, probe);
    probe[i] = point[i] - step;
    const double down = evaluate(f, probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) throw NonFiniteError("grad-check: non-finite value", i);
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(analytic[i])) throw NonFiniteError("grad-check: non-finite analytic gradient", i);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace iblm
