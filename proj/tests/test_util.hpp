#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mrha/tensor.hpp"

namespace mrha::test {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps gradients that are
/// numerically zero from dividing finite-difference noise by ~0.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

/// Central differences of f with respect to every entry of inputs[which].
inline Tensor numeric_gradient(const std::function<double(const std::vector<Tensor>&)>& f,
                               std::vector<Tensor> inputs, std::size_t which,
                               double h = 1e-6) {
  Tensor grad(inputs[which].shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double saved = inputs[which][i];
    inputs[which][i] = saved + h;
    const double up = f(inputs);
    inputs[which][i] = saved - h;
    const double down = f(inputs);
    inputs[which][i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

struct GradCheckResult {
  double worst = 0.0;
  std::size_t worst_index = 0;
};

inline GradCheckResult compare_gradients(const Tensor& analytic, const Tensor& numeric,
                                         double floor = 1e-4) {
  GradCheckResult r;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = relative_error(analytic[i], numeric[i], floor);
    if (e > r.worst) {
      r.worst = e;
      r.worst_index = i;
    }
  }
  return r;
}

}  // namespace mrha::test
