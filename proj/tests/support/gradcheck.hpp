#pragma once

// Central finite-difference gradient checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "nre/rng.hpp"
#include "nre/tensor.hpp"

namespace nre::testing {

struct GradCheckResult {
  double worst = 0.0;  // largest relative error seen
  std::string where;
};

// Relative error |a - n| / max(|a|, |n|); pairs where both are below
// `floor` are compared absolutely against `floor`. Central differences at
// step 1e-5 carry roundoff near 1e-11, so a floor of 1e-6 keeps exactly-zero
// gradients from reading as relative noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double diff = std::abs(analytic - numeric);
  if (scale < floor) return diff / floor;
  return diff / scale;
}

// `loss` rebuilds the scalar from the given inputs. Each input must be a
// leaf with requires_grad set.
inline GradCheckResult check_gradients(std::vector<Tensor> inputs,
                                       const std::function<Tensor(const std::vector<Tensor>&)>& loss,
                                       double step = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  loss(inputs).backward();
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<double> analytic(inputs[k].grad().begin(), inputs[k].grad().end());
    auto values = inputs[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss(inputs).item();
      values[i] = saved - step;
      const double down = loss(inputs).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double err = relative_error(a, numeric);
      if (err > result.worst) {
        result.worst = err;
        result.where = "input " + std::to_string(k) + " element " + std::to_string(i) + ": analytic " +
                       std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return result;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_vector(std::move(shape), std::move(v), true);
}

// Fixed random projection to a scalar so every output element receives a
// distinct upstream gradient.
inline Tensor project(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(x.numel());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return sum(multiply(x, Tensor::from_vector(x.shape(), std::move(w))));
}

}  // namespace nre::testing
