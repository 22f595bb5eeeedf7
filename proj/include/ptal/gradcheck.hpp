#pragma once

// Central finite-difference gradient checking. f must be a deterministic
// scalar-valued tensor function: any internal randomness has to be frozen
// (re-seeded per call), and f must not open its own GradientTape.

#include <functional>

#include "ptal/tensor.hpp"

namespace ptal {

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step = 1e-3) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");

  Tensor leaf = x.clone(true);
  std::vector<double> analytic(x.numel(), 0.0);
  {
    GradientTape tape;
    Tensor loss = f(leaf);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
    GradMap grads = tape.backward(loss);
    Tensor g = grads.grad_for(leaf);
    for (std::size_t i = 0; i < g.numel(); ++i) analytic[i] = g.vals()[i];
  }

  double worst = 0.0;
  Tensor probe = x.clone(false);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float saved = probe.vals()[i];
    probe.vals()[i] = static_cast<float>(saved + step);
    const double xp = probe.vals()[i];
    const double fp = f(probe).item64();
    probe.vals()[i] = static_cast<float>(saved - step);
    const double xm = probe.vals()[i];
    const double fm = f(probe).item64();
    probe.vals()[i] = saved;
    // Divide by the step as actually stored in float32, not the nominal one.
    const double fd = (fp - fm) / (xp - xm);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ptal
