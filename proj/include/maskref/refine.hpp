// SPDX-License-Identifier: Apache-2.0
//
// Top-down refinement: each stage merges the current mask encoding with
// channel-reduced skip features from the bottom-up pass and doubles the
// spatial resolution, until the map is back at input resolution.

#pragma once

#include <string>
#include <vector>

#include "maskref/tensor.hpp"

namespace maskref {

enum class ScheduleVariant { constant, halving };

/// Per-stage mask/skip channel widths for an n-stage refinement stack.
struct ChannelSchedule {
  int n = 0;
  std::vector<int> k_m;  // mask encoding width per stage, k_m[0] is the deepest
  std::vector<int> k_s;  // skip width per stage
  ScheduleVariant variant = ScheduleVariant::halving;

  /// Mask-encoding width consumed by stage i (0-based); the stage after the
  /// last one is the final single-channel map.
  int out_channels(int i) const { return i + 1 < n ? k_m[static_cast<std::size_t>(i) + 1] : 1; }
};

/// Schedules from a base width k: constant keeps every stage at k, halving
/// uses k, k/2, k/4, ... (k must be divisible by 2^(n-1)).
inline ChannelSchedule make_schedule(int k, ScheduleVariant variant, int n) {
  if (n < 0 || k < 1) throw ShapeError("make_schedule: need n >= 0 and k >= 1");
  ChannelSchedule s;
  s.n = n;
  s.variant = variant;
  int v = k;
  for (int i = 0; i < n; ++i) {
    if (variant == ScheduleVariant::halving) {
      if (i > 0 && v % 2 != 0)
        throw ShapeError("make_schedule: halving schedule needs 2^(n-1) | k");
      if (i > 0) v /= 2;
    }
    s.k_m.push_back(v);
    s.k_s.push_back(v);
  }
  return s;
}

/// Learnable parameters for one refinement stage. The skip path reduces
/// trunk features through two 3x3 convs (k_f -> mid -> k_s); the merge conv
/// maps the concatenated (k_m + k_s) channels to the next encoding width.
struct RefinementModule {
  int stage = 0;  // 0-based position in the stack
  Tensor skip_a_w, skip_a_b;  // [mid, k_f, 3, 3]
  Tensor skip_b_w, skip_b_b;  // [k_s, mid, 3, 3]
  Tensor merge_w, merge_b;    // [k_out, k_m + k_s, 3, 3]

  int k_f() const { return skip_a_w.dim(1); }
  int mid() const { return skip_a_w.dim(0); }
  int k_s() const { return skip_b_w.dim(0); }
  int k_out() const { return merge_w.dim(0); }
  int k_m() const { return merge_w.dim(1) - k_s(); }

  void validate() const {
    if (skip_b_w.dim(1) != mid())
      throw ShapeError("refinement module: skip conv widths disagree");
    if (merge_w.dim(1) <= k_s())
      throw ShapeError("refinement module: merge conv must take k_m + k_s channels");
  }

  std::vector<Tensor> parameters() const {
    return {skip_a_w, skip_a_b, skip_b_w, skip_b_b, merge_w, merge_b};
  }
};

inline RefinementModule make_refinement_module(Graph& g, int stage, int k_f, int k_m,
                                               int k_s, int k_out, int mid = 64) {
  if (k_f < 1 || k_m < 1 || k_s < 1 || k_out < 1 || mid < 1)
    throw ShapeError("refinement module: channel counts must be positive");
  RefinementModule m;
  m.stage = stage;
  m.skip_a_w = param_uniform(g, {mid, k_f, 3, 3}, k_f * 9);
  m.skip_a_b = param_uniform(g, {mid}, k_f * 9);
  m.skip_b_w = param_uniform(g, {k_s, mid, 3, 3}, mid * 9);
  m.skip_b_b = param_uniform(g, {k_s}, mid * 9);
  m.merge_w = param_uniform(g, {k_out, k_m + k_s, 3, 3}, (k_m + k_s) * 9);
  m.merge_b = param_uniform(g, {k_out}, (k_m + k_s) * 9);
  m.validate();
  return m;
}

/// Fig.-9-style factorization: concatenating along depth and convolving
/// equals two separate spatial convolutions followed by addition. The merge
/// bias rides on the mask branch.
struct RefactoredRefinementModule {
  int stage = 0;
  Tensor skip_a_w, skip_a_b, skip_b_w, skip_b_b;
  Tensor mask_w, mask_b;        // [k_out, k_m, 3, 3]
  Tensor skip_merge_w, skip_merge_b;  // [k_out, k_s, 3, 3]; bias kept zero by refactor()
};

/// Split a module's merge kernel along its input channels into the
/// equivalent (mask conv, skip conv) pair.
inline RefactoredRefinementModule refactor(const RefinementModule& m) {
  m.validate();
  const int k_out = m.k_out(), k_m = m.k_m(), k_s = m.k_s();
  RefactoredRefinementModule r;
  r.stage = m.stage;
  r.skip_a_w = m.skip_a_w;
  r.skip_a_b = m.skip_a_b;
  r.skip_b_w = m.skip_b_w;
  r.skip_b_b = m.skip_b_b;
  r.mask_w = Tensor::zeros({k_out, k_m, 3, 3}, true);
  r.skip_merge_w = Tensor::zeros({k_out, k_s, 3, 3}, true);
  r.mask_b = Tensor::from_values({k_out},
                                 std::vector<double>(m.merge_b.values().begin(),
                                                     m.merge_b.values().end()),
                                 true);
  r.skip_merge_b = Tensor::zeros({k_out}, true);
  const double* src = m.merge_w.data();
  double* dm = r.mask_w.data_mut();
  double* ds = r.skip_merge_w.data_mut();
  for (int co = 0; co < k_out; ++co)
    for (int ci = 0; ci < k_m + k_s; ++ci) {
      const double* from = src + (static_cast<std::size_t>(co) * (k_m + k_s) + ci) * 9;
      double* to = ci < k_m ? dm + (static_cast<std::size_t>(co) * k_m + ci) * 9
                            : ds + (static_cast<std::size_t>(co) * k_s + (ci - k_m)) * 9;
      std::copy_n(from, 9, to);
    }
  return r;
}

namespace detail {

/// Shape-preserving 3x3 convs use reflective padding wherever it is legal
/// (pad < extent); degenerate 1x1 maps fall back to zero padding.
inline PadMode pad1_mode(const Tensor& x) {
  return (x.dim(2) > 1 && x.dim(3) > 1) ? PadMode::reflective : PadMode::zero;
}

}  // namespace detail

/// Skip features S = relu(conv_b(relu(conv_a(F)))), same spatial dims as F.
inline Tensor make_skip(Graph& g, const Tensor& features, const RefinementModule& m) {
  if (features.dim(1) != m.k_f())
    throw ShapeError("make_skip: feature channels " + std::to_string(features.dim(1)) +
                     " do not match module (expects " + std::to_string(m.k_f()) + ")");
  const PadMode pm = detail::pad1_mode(features);
  Tensor h = relu(g, conv2d(g, features, m.skip_a_w, m.skip_a_b, 1, 1, pm));
  return relu(g, conv2d(g, h, m.skip_b_w, m.skip_b_b, 1, 1, pm));
}

inline Tensor make_skip(Graph& g, const Tensor& features, const RefactoredRefinementModule& m) {
  const PadMode pm = detail::pad1_mode(features);
  Tensor h = relu(g, conv2d(g, features, m.skip_a_w, m.skip_a_b, 1, 1, pm));
  return relu(g, conv2d(g, h, m.skip_b_w, m.skip_b_b, 1, 1, pm));
}

/// One refinement step: M' = up2(relu(merge(concat(M, S)))).
inline Tensor refine(Graph& g, const Tensor& mask_enc, const Tensor& skip,
                     const RefinementModule& m) {
  if (mask_enc.dim(2) != skip.dim(2) || mask_enc.dim(3) != skip.dim(3) ||
      mask_enc.dim(0) != skip.dim(0))
    throw ShapeError("refine: mask encoding " + shape_str(mask_enc.shape()) +
                     " and skip " + shape_str(skip.shape()) + " disagree");
  Tensor cat = concat_channels(g, mask_enc, skip);
  Tensor merged = conv2d(g, cat, m.merge_w, m.merge_b, 1, 1, detail::pad1_mode(cat));
  return bilinear_up2(g, relu(g, merged));
}

/// Refactored-equivalent step: M' = up2(relu(mask_conv(M) + skip_conv(S))).
inline Tensor refine_refactored(Graph& g, const Tensor& mask_enc, const Tensor& skip,
                                const RefactoredRefinementModule& m) {
  if (mask_enc.dim(2) != skip.dim(2) || mask_enc.dim(3) != skip.dim(3) ||
      mask_enc.dim(0) != skip.dim(0))
    throw ShapeError("refine_refactored: mask/skip spatial mismatch");
  const PadMode pm = detail::pad1_mode(mask_enc);
  Tensor a = conv2d(g, mask_enc, m.mask_w, m.mask_b, 1, 1, pm);
  Tensor b = conv2d(g, skip, m.skip_merge_w, m.skip_merge_b, 1, 1, pm);
  return bilinear_up2(g, relu(g, add(g, a, b)));
}

/// Apply the full stack: features come deepest (lowest resolution) first,
/// one per module; each stage doubles the resolution. The last stage must
/// produce a single channel, which is squashed through a sigmoid to give the
/// per-pixel object probability. n = 0 degenerates to sigmoid(M1).
inline Tensor stack_refine(Graph& g, Tensor mask_enc, std::span<const Tensor> features,
                           std::span<const RefinementModule> modules) {
  if (features.size() != modules.size())
    throw ShapeError("stack_refine: " + std::to_string(features.size()) + " features for " +
                     std::to_string(modules.size()) + " modules");
  if (!modules.empty() && modules.back().k_out() != 1)
    throw ShapeError("stack_refine: final stage must output a single channel");
  for (std::size_t i = 0; i < modules.size(); ++i) {
    Tensor skip = make_skip(g, features[i], modules[i]);
    mask_enc = refine(g, mask_enc, skip, modules[i]);
  }
  return sigmoid(g, mask_enc);
}

/// Skip-network ablation: no top-down path at all. Each stage turns its skip
/// features into a 1-channel logit map through the skip half of its merge
/// conv (the mask half sees a zero input, so only the horizontal weights
/// carry signal); maps are upsampled to full resolution, averaged, and
/// squashed. Modules must be built with k_m = k_s = 1 and k_out = 1.
inline Tensor ablation_skip_only(Graph& g, std::span<const Tensor> features,
                                 std::span<const RefinementModule> modules) {
  if (features.empty() || features.size() != modules.size())
    throw ShapeError("ablation_skip_only: need one (feature, module) pair per stage");
  const std::size_t n = features.size();
  Tensor acc;
  for (std::size_t i = 0; i < n; ++i) {
    if (modules[i].k_m() != 1 || modules[i].k_s() != 1 || modules[i].k_out() != 1)
      throw ShapeError("ablation_skip_only: modules must use k_m = k_s = k_out = 1");
    Tensor s = make_skip(g, features[i], modules[i]);
    Tensor zero_mask = Tensor::zeros({s.dim(0), 1, s.dim(2), s.dim(3)});
    Tensor cat = concat_channels(g, zero_mask, s);
    Tensor y = conv2d(g, cat, modules[i].merge_w, modules[i].merge_b, 1, 1,
                      detail::pad1_mode(cat));
    for (std::size_t j = i; j < n; ++j) y = bilinear_up2(g, y);
    acc = acc.defined() ? add(g, acc, y) : y;
  }
  return sigmoid(g, scale(g, acc, 1.0 / static_cast<double>(n)));
}

/// Deconv-network ablation: the top-down path runs as usual but every skip
/// contribution is zero, so only the mask-path convolutions carry signal.
inline Tensor ablation_no_horizontal(Graph& g, Tensor mask_enc,
                                     std::span<const Tensor> features,
                                     std::span<const RefinementModule> modules) {
  if (features.size() != modules.size())
    throw ShapeError("ablation_no_horizontal: feature/module count mismatch");
  for (std::size_t i = 0; i < modules.size(); ++i) {
    Tensor zero_skip = Tensor::zeros({mask_enc.dim(0), modules[i].k_s(),
                                      mask_enc.dim(2), mask_enc.dim(3)});
    mask_enc = refine(g, mask_enc, zero_skip, modules[i]);
  }
  return sigmoid(g, mask_enc);
}

}  // namespace maskref
