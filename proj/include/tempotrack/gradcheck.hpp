#pragma once

// Central finite-difference verification of reverse-mode gradients.
// f must be deterministic and scalar-valued; behaviour is undefined for
// stochastic f.

#include <functional>

#include "tempotrack/tensor.hpp"

namespace tempotrack {

// Max over coordinates of |analytic - central| / max(1, |central|).
// f is re-run 2*numel+1 times against the same leaf tensor, whose values are
// perturbed in place.
template <typename T>
double grad_check(const std::function<Tensor<T>()>& f, Tensor<T>& x, double eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> y = f();
  if (y.size() != 1)
    throw ContractError("grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
  y.backward();
  std::vector<double> analytic(x.size(), 0.0);
  if (x.has_grad()) {
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) analytic[i] = static_cast<double>(g[i]);
  }

  double max_err = 0.0;
  auto data = x.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const T orig = data[i];
    data[i] = orig + static_cast<T>(eps);
    const double fp = static_cast<double>(f().item());
    data[i] = orig - static_cast<T>(eps);
    const double fm = static_cast<double>(f().item());
    data[i] = orig;
    const double central = (fp - fm) / (2.0 * eps);
    const double err = std::abs(analytic[i] - central) / std::max(1.0, std::abs(central));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace tempotrack
