// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients.

#pragma once

#include <cmath>
#include <functional>

#include "maskref/tensor.hpp"

namespace maskref {

/// f must build a scalar loss from (graph, x). Returns the max over
/// coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), comparing the
/// tape gradient against a central difference with step h.
inline double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f,
                         Tensor x, double h = 1e-5) {
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> g_ad;
  {
    Graph g;
    Tensor loss = f(g, x);
    if (loss.size() != 1) throw ShapeError("grad_check: f must be scalar-valued");
    g.backward(loss);
    auto gr = x.grad();
    g_ad.assign(gr.begin(), gr.end());
  }
  double max_err = 0.0;
  auto eval = [&](std::size_t i, double v) {
    const double saved = x.values_mut()[i];
    x.values_mut()[i] = v;
    Graph g;
    double out = f(g, x).item();
    x.values_mut()[i] = saved;
    return out;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.values()[i];
    const double fd = (eval(i, v + h) - eval(i, v - h)) / (2.0 * h);
    const double err = std::abs(g_ad[i] - fd) /
                       std::max({1.0, std::abs(g_ad[i]), std::abs(fd)});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace maskref
