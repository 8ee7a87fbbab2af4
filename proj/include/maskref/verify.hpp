// SPDX-License-Identifier: Apache-2.0
//
// Self-verification batteries: finite-difference checks over every
// differentiable op (including a full refinement stack) and the
// original-vs-refactored module equivalence sweep.

#pragma once

#include <string>
#include <vector>

#include "maskref/gradcheck.hpp"
#include "maskref/refine.hpp"
#include "maskref/tensor.hpp"

namespace maskref {

struct OpGradReport {
  std::string op;
  double max_err = 0.0;
  int trials = 0;
};

namespace detail {

inline Tensor rand_uniform(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values_mut()) v = lo + uniform01(rng) * (hi - lo);
  return t;
}

/// Values bounded away from zero, so ReLU kinks sit clear of the
/// finite-difference step.
inline Tensor rand_off_zero(std::mt19937_64& rng, Shape shape, double margin = 0.05) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values_mut()) {
    const double u = margin + uniform01(rng) * (1.0 - margin);
    v = (rng() & 1) ? u : -u;
  }
  return t;
}

/// Distinct well-separated values so pooling argmaxes cannot flip under the
/// finite-difference step.
inline Tensor rand_distinct(std::mt19937_64& rng, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::vector<int> perm(t.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[rng() % i]);
  for (std::size_t i = 0; i < t.size(); ++i) t.values_mut()[i] = 0.01 * perm[i];
  return t;
}

inline Tensor rand_hard_targets(std::mt19937_64& rng, Shape shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.values_mut()) v = (rng() & 1) ? 1.0 : 0.0;
  return t;
}

}  // namespace detail

/// Run `trials` random configurations of every differentiable op through the
/// central-difference checker, plus a full 3-stage refinement stack. Each
/// report carries the max relative error seen for that op.
inline std::vector<OpGradReport> gradcheck_battery(int trials, std::uint64_t seed,
                                                   double h = 1e-5) {
  std::mt19937_64 rng(seed);
  std::vector<OpGradReport> reports;
  auto probe_sum = [](Graph& g, Tensor y, const Tensor& probe) {
    return sum(g, mul(g, y, probe));
  };
  auto run = [&](const std::string& name,
                 const std::function<double(std::mt19937_64&)>& one) {
    OpGradReport r{name, 0.0, trials};
    for (int t = 0; t < trials; ++t) r.max_err = std::max(r.max_err, one(rng));
    reports.push_back(std::move(r));
  };

  run("conv2d/input", [&](std::mt19937_64& r) {
    const int cin = 1 + static_cast<int>(r() % 2), h2 = 4 + static_cast<int>(r() % 3);
    const PadMode pm = (r() & 1) ? PadMode::reflective : PadMode::zero;
    Tensor w = detail::rand_uniform(r, {2, cin, 3, 3}, -1, 1);
    Tensor b = detail::rand_uniform(r, {2}, -1, 1);
    Tensor probe = detail::rand_uniform(r, {1, 2, h2, h2}, -1, 1);
    return grad_check([&](Graph& g, const Tensor& x) {
      return probe_sum(g, conv2d(g, x, w, b, 1, 1, pm), probe);
    }, detail::rand_uniform(r, {1, cin, h2, h2}, -1, 1), h);
  });
  run("conv2d/weight", [&](std::mt19937_64& r) {
    const int cin = 1 + static_cast<int>(r() % 2), h2 = 4 + static_cast<int>(r() % 3);
    const PadMode pm = (r() & 1) ? PadMode::reflective : PadMode::zero;
    Tensor x = detail::rand_uniform(r, {1, cin, h2, h2}, -1, 1);
    Tensor b = detail::rand_uniform(r, {2}, -1, 1);
    Tensor probe = detail::rand_uniform(r, {1, 2, h2, h2}, -1, 1);
    return grad_check([&](Graph& g, const Tensor& w) {
      return probe_sum(g, conv2d(g, x, w, b, 1, 1, pm), probe);
    }, detail::rand_uniform(r, {2, cin, 3, 3}, -1, 1), h);
  });
  run("conv2d/stride2", [&](std::mt19937_64& r) {
    Tensor w = detail::rand_uniform(r, {1, 1, 3, 3}, -1, 1);
    Tensor b = detail::rand_uniform(r, {1}, -1, 1);
    return grad_check([&](Graph& g, const Tensor& x) {
      return sum(g, conv2d(g, x, w, b, 2, 1, PadMode::zero));
    }, detail::rand_uniform(r, {1, 1, 6, 6}, -1, 1), h);
  });
  run("maxpool2", [&](std::mt19937_64& r) {
    Tensor probe = detail::rand_uniform(r, {1, 1, 3, 3}, -1, 1);
    return grad_check([&](Graph& g, const Tensor& x) {
      return probe_sum(g, maxpool2(g, x), probe);
    }, detail::rand_distinct(r, {1, 1, 6, 6}), h);
  });
  run("bilinear_up2", [&](std::mt19937_64& r) {
    const int h2 = 2 + static_cast<int>(r() % 3);
    Tensor probe = detail::rand_uniform(r, {1, 1, 2 * h2, 2 * h2}, -1, 1);
    return grad_check([&](Graph& g, const Tensor& x) {
      return probe_sum(g, bilinear_up2(g, x), probe);
    }, detail::rand_uniform(r, {1, 1, h2, h2}, -1, 1), h);
  });
  run("concat+relu", [&](std::mt19937_64& r) {
    Tensor other = detail::rand_off_zero(r, {1, 2, 4, 4});
    Tensor probe = detail::rand_uniform(r, {1, 3, 4, 4}, -1, 1);
    return grad_check([&](Graph& g, const Tensor& x) {
      return probe_sum(g, relu(g, concat_channels(g, x, other)), probe);
    }, detail::rand_off_zero(r, {1, 1, 4, 4}), h);
  });
  run("linear", [&](std::mt19937_64& r) {
    Tensor w = detail::rand_uniform(r, {3, 5}, -1, 1);
    Tensor b = detail::rand_uniform(r, {3}, -1, 1);
    Tensor probe = detail::rand_uniform(r, {2, 3}, -1, 1);
    return grad_check([&](Graph& g, const Tensor& x) {
      return probe_sum(g, linear(g, x, w, b), probe);
    }, detail::rand_uniform(r, {2, 5}, -1, 1), h);
  });
  run("sigmoid+bce", [&](std::mt19937_64& r) {
    Tensor target = detail::rand_hard_targets(r, {8});
    return grad_check([&](Graph& g, const Tensor& x) {
      return bce_loss(g, sigmoid(g, x), target);
    }, detail::rand_uniform(r, {8}, -2, 2), h);
  });
  run("add+mul+scale+mean", [&](std::mt19937_64& r) {
    Tensor other = detail::rand_uniform(r, {6}, -1, 1);
    return grad_check([&](Graph& g, const Tensor& x) {
      return mean(g, mul(g, add(g, x, other), scale(g, x, 0.7)));
    }, detail::rand_uniform(r, {6}, -1, 1), h);
  });
  run("refine_stack3", [&](std::mt19937_64& r) {
    Graph init(r());
    ChannelSchedule sched = make_schedule(4, ScheduleVariant::halving, 3);
    std::vector<RefinementModule> mods;
    std::vector<Tensor> feats;
    int side = 2;
    for (int i = 0; i < 3; ++i) {
      mods.push_back(make_refinement_module(init, i, 2, sched.k_m[static_cast<std::size_t>(i)],
                                            sched.k_s[static_cast<std::size_t>(i)],
                                            sched.out_channels(i), 3));
      feats.push_back(detail::rand_uniform(r, {1, 2, side, side}, 0, 1));
      side *= 2;
    }
    Tensor target = detail::rand_hard_targets(r, {1, 1, 16, 16});
    return grad_check([&](Graph& g, const Tensor& m1) {
      return bce_loss(g, stack_refine(g, m1, feats, mods), target);
    }, detail::rand_uniform(r, {1, 4, 2, 2}, -1, 1), h);
  });

  return reports;
}

struct EquivReport {
  double max_forward_diff = 0.0;
  double max_grad_diff = 0.0;
  int trials = 0;
};

/// Random (module, input) draws comparing refine against refine_refactored,
/// forward values and input gradients.
inline EquivReport equivalence_battery(int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  EquivReport rep;
  rep.trials = trials;
  for (int t = 0; t < trials; ++t) {
    Graph init(rng());
    const int k_f = 2 + static_cast<int>(rng() % 4);
    const int k_m = 1 + static_cast<int>(rng() % 4);
    const int k_s = 1 + static_cast<int>(rng() % 4);
    const int k_out = 1 + static_cast<int>(rng() % 4);
    const int side = 3 + static_cast<int>(rng() % 4);
    RefinementModule m = make_refinement_module(init, 0, k_f, k_m, k_s, k_out, 5);
    RefactoredRefinementModule r = refactor(m);

    Tensor feats = detail::rand_uniform(rng, {1, k_f, side, side}, -1, 1);
    Tensor enc_a = detail::rand_uniform(rng, {1, k_m, side, side}, -1, 1);
    enc_a.set_requires_grad(true);
    Tensor enc_b = Tensor::from_values(enc_a.shape(),
                                       {enc_a.values().begin(), enc_a.values().end()}, true);

    Graph ga;
    Tensor skip_a = make_skip(ga, feats, m);
    skip_a.set_requires_grad(true);
    Tensor out_a = refine(ga, enc_a, skip_a, m);
    ga.backward(sum(ga, out_a));

    Graph gb;
    Tensor skip_b = make_skip(gb, feats, r);
    skip_b.set_requires_grad(true);
    Tensor out_b = refine_refactored(gb, enc_b, skip_b, r);
    gb.backward(sum(gb, out_b));

    for (std::size_t i = 0; i < out_a.size(); ++i)
      rep.max_forward_diff = std::max(rep.max_forward_diff,
                                      std::abs(out_a.values()[i] - out_b.values()[i]));
    for (std::size_t i = 0; i < enc_a.size(); ++i)
      rep.max_grad_diff = std::max(rep.max_grad_diff,
                                   std::abs(enc_a.grad()[i] - enc_b.grad()[i]));
    for (std::size_t i = 0; i < skip_a.size(); ++i)
      rep.max_grad_diff = std::max(rep.max_grad_diff,
                                   std::abs(skip_a.grad()[i] - skip_b.grad()[i]));
  }
  return rep;
}

}  // namespace maskref
