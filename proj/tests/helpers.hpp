#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "taskroute/autograd.hpp"
#include "taskroute/rng.hpp"

namespace testutil {

using taskroute::Rng;
using taskroute::Shape;
using taskroute::Tensor;

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Values bounded away from zero, for inputs that pass through a kink.
template <typename T>
Tensor<T> random_away_from_zero(const Shape& shape, Rng& rng, double gap = 0.05) {
  Tensor<T> t(shape);
  for (auto& v : t.storage()) {
    const double mag = rng.uniform(gap, 1.0);
    v = static_cast<T>(rng.bernoulli(0.5) ? mag : -mag);
  }
  return t;
}

struct GradCheck {
  double worst_rel = 0.0;
  std::size_t checked = 0;
  bool ok() const { return worst_rel < 1e-4; }
};

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central differences with step 1e-4 on every entry of `x`; `loss` rebuilds
/// the scalar from the perturbed tensor.
inline GradCheck finite_difference(Tensor<double>& x, const Tensor<double>& analytic,
                                   const std::function<double()>& loss, double step = 1e-4) {
  GradCheck out;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = loss();
    x[i] = orig - step;
    const double down = loss();
    x[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    out.worst_rel = std::max(out.worst_rel, rel_err(analytic[i], numeric));
    ++out.checked;
  }
  return out;
}

}  // namespace testutil
