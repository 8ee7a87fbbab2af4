// SPDX-License-Identifier: Apache-2.0
//
// Trunk, head variants, and the combined feedforward + refinement model.
//
// Trunk geometry: P pooling stages split the 3x3 conv layers into P+1
// resolution levels (W, W/2, ..., W/2^P); a final 1x1 conv reduces the
// deepest level to F channels. The refinement stack consumes the last conv
// output of each level from the deepest (at W/2^P, matching the mask
// encoding M1) up to level 1 (at W/2), one feature map per pooling stage.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "maskref/metrics.hpp"
#include "maskref/refine.hpp"
#include "maskref/tensor.hpp"

namespace maskref {

struct TrunkConfig {
  int input_channels = 1;
  int width = 64;           // W: input patch side in pixels
  int pools = 3;            // P: number of 2x2 pooling stages
  int depth = 6;            // D: number of 3x3 conv layers
  int feature_channels = 64;  // F: channels after the final 1x1 reduction
  int base_channels = 8;
  int channel_cap = 64;

  int total_stride() const { return 1 << pools; }
  /// S = W / 2^P, the density of distinct window alignments.
  int stride_density() const { return width / total_stride(); }
  /// Side of the final trunk feature map (same as S).
  int final_side() const { return stride_density(); }

  void validate() const {
    if (width < 1 || pools < 0 || depth < 1 || feature_channels < 1 ||
        base_channels < 1 || input_channels < 1)
      throw ShapeError("trunk config: all extents must be positive");
    if (width % total_stride() != 0)
      throw ShapeError("trunk config: width " + std::to_string(width) +
                       " is not divisible by 2^" + std::to_string(pools));
    if (depth < pools + 1)
      throw ShapeError("trunk config: need at least one conv per resolution level");
  }

  /// Channel width at resolution level l (0 = full resolution).
  int level_channels(int l) const {
    long long c = static_cast<long long>(base_channels) << l;
    return static_cast<int>(std::min<long long>(c, channel_cap));
  }

  /// Conv layers per level: one each, extras assigned deepest-first.
  std::vector<int> level_conv_counts() const {
    std::vector<int> counts(static_cast<std::size_t>(pools) + 1, 1);
    const int extra = depth - (pools + 1);
    for (int e = 0; e < extra; ++e)
      counts[static_cast<std::size_t>(pools - e % (pools + 1))] += 1;
    return counts;
  }
};

struct TrunkLayer {
  int level = 0;
  int in_channels = 0, out_channels = 0;
};

/// Bottom-up feature extractor: per level, 3x3 reflective-pad convs + ReLU,
/// then a 2x2 max pool (except at the deepest level), then the 1x1
/// feature reduction.
struct Trunk {
  TrunkConfig cfg;
  std::vector<TrunkLayer> plan;
  std::vector<Tensor> conv_w, conv_b;
  Tensor reduce_w, reduce_b;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      ps.push_back(conv_w[i]);
      ps.push_back(conv_b[i]);
    }
    ps.push_back(reduce_w);
    ps.push_back(reduce_b);
    return ps;
  }
};

inline Trunk build_trunk(Graph& g, const TrunkConfig& cfg) {
  cfg.validate();
  Trunk t;
  t.cfg = cfg;
  const auto counts = cfg.level_conv_counts();
  int in_ch = cfg.input_channels;
  for (int level = 0; level <= cfg.pools; ++level) {
    const int out_ch = cfg.level_channels(level);
    for (int k = 0; k < counts[static_cast<std::size_t>(level)]; ++k) {
      t.plan.push_back({level, in_ch, out_ch});
      t.conv_w.push_back(param_uniform(g, {out_ch, in_ch, 3, 3}, in_ch * 9));
      t.conv_b.push_back(param_uniform(g, {out_ch}, in_ch * 9));
      in_ch = out_ch;
    }
  }
  t.reduce_w = param_uniform(g, {cfg.feature_channels, in_ch, 1, 1}, in_ch);
  t.reduce_b = param_uniform(g, {cfg.feature_channels}, in_ch);
  return t;
}

struct TrunkForward {
  Tensor reduced;                 // [N, F, s, s]
  std::vector<Tensor> features;   // deepest-first, one per pooling stage
};

inline TrunkForward trunk_forward(Graph& g, const Trunk& t, const Tensor& patch) {
  if (patch.ndim() != 4 || patch.dim(1) != t.cfg.input_channels ||
      patch.dim(2) != t.cfg.width || patch.dim(3) != t.cfg.width)
    throw ShapeError("trunk: expected patch [N," + std::to_string(t.cfg.input_channels) +
                     "," + std::to_string(t.cfg.width) + "," + std::to_string(t.cfg.width) +
                     "], got " + shape_str(patch.shape()));
  TrunkForward out;
  std::vector<Tensor> shallow_first;
  Tensor x = patch;
  std::size_t li = 0;
  for (int level = 0; level <= t.cfg.pools; ++level) {
    while (li < t.plan.size() && t.plan[li].level == level) {
      x = relu(g, conv2d(g, x, t.conv_w[li], t.conv_b[li], 1, 1, detail::pad1_mode(x)));
      ++li;
    }
    if (level < t.cfg.pools) {
      if (level >= 1) shallow_first.push_back(x);
      x = maxpool2(g, x);
    } else {
      out.features.push_back(x);  // deepest feature, at W/2^P
    }
  }
  for (auto it = shallow_first.rbegin(); it != shallow_first.rend(); ++it)
    out.features.push_back(*it);
  out.reduced = relu(g, conv2d(g, x, t.reduce_w, t.reduce_b, 1, 0, PadMode::zero));
  return out;
}

enum class HeadKind { A, B, C };

inline char head_kind_char(HeadKind k) { return k == HeadKind::A ? 'A' : k == HeadKind::B ? 'B' : 'C'; }

inline HeadKind head_kind_from_char(char c) {
  switch (c) {
    case 'A': case 'a': return HeadKind::A;
    case 'B': case 'b': return HeadKind::B;
    case 'C': case 'c': return HeadKind::C;
  }
  throw ShapeError("unknown head variant; expected A, B, or C");
}

struct HeadConfig {
  HeadKind kind = HeadKind::C;
  int hidden = 128;        // width of the reduced feature vector
  int score_hidden = 64;   // extra score-branch width for heads A and B
};

/// Mask/score head. All variants share an identical mask pathway (flatten ->
/// hidden vector -> mask outputs); the score branch shares progressively
/// more of it: A reduces the trunk features a second time for the score, B
/// reuses the mask branch's hidden vector, C reads the score directly off
/// that vector with a single linear map.
struct Head {
  HeadConfig cfg;
  Tensor reduce_w, reduce_b;              // [hidden, F*s*s]
  Tensor coarse_w, coarse_b;              // [s*s, hidden]: coarse mask logits
  Tensor score_reduce_w, score_reduce_b;  // A only
  Tensor score_hidden_w, score_hidden_b;  // A and B
  Tensor score_out_w, score_out_b;        // all variants

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps = {reduce_w, reduce_b, coarse_w, coarse_b};
    if (cfg.kind == HeadKind::A) {
      ps.push_back(score_reduce_w);
      ps.push_back(score_reduce_b);
    }
    if (cfg.kind != HeadKind::C) {
      ps.push_back(score_hidden_w);
      ps.push_back(score_hidden_b);
    }
    ps.push_back(score_out_w);
    ps.push_back(score_out_b);
    return ps;
  }
};

inline Head build_head(Graph& g, const HeadConfig& hc, const TrunkConfig& tc) {
  if (hc.hidden < 1 || hc.score_hidden < 1)
    throw ShapeError("head config: widths must be positive");
  const int s = tc.final_side();
  const int d = tc.feature_channels * s * s;
  Head h;
  h.cfg = hc;
  h.reduce_w = param_uniform(g, {hc.hidden, d}, d);
  h.reduce_b = param_uniform(g, {hc.hidden}, d);
  h.coarse_w = param_uniform(g, {s * s, hc.hidden}, hc.hidden);
  h.coarse_b = param_uniform(g, {s * s}, hc.hidden);
  if (hc.kind == HeadKind::A) {
    h.score_reduce_w = param_uniform(g, {hc.hidden, d}, d);
    h.score_reduce_b = param_uniform(g, {hc.hidden}, d);
  }
  if (hc.kind != HeadKind::C) {
    h.score_hidden_w = param_uniform(g, {hc.score_hidden, hc.hidden}, hc.hidden);
    h.score_hidden_b = param_uniform(g, {hc.score_hidden}, hc.hidden);
    h.score_out_w = param_uniform(g, {1, hc.score_hidden}, hc.score_hidden);
    h.score_out_b = param_uniform(g, {1}, hc.score_hidden);
  } else {
    h.score_out_w = param_uniform(g, {1, hc.hidden}, hc.hidden);
    h.score_out_b = param_uniform(g, {1}, hc.hidden);
  }
  return h;
}

struct HeadForward {
  Tensor reduced_vec;    // [N, hidden] mask-branch vector
  Tensor coarse_logits;  // [N, 1, s, s]
  Tensor score_logit;    // [N, 1]
};

/// Score branch alone. Head A reduces the flattened trunk features a second
/// time; B and C reuse the mask branch's reduced vector, C with nothing but
/// a single linear map.
inline Tensor forward_score_branch(Graph& g, const Head& h, const Tensor& flat,
                                   const Tensor& reduced_vec) {
  switch (h.cfg.kind) {
    case HeadKind::A: {
      Tensor vs = relu(g, linear(g, flat, h.score_reduce_w, h.score_reduce_b));
      Tensor sh = relu(g, linear(g, vs, h.score_hidden_w, h.score_hidden_b));
      return linear(g, sh, h.score_out_w, h.score_out_b);
    }
    case HeadKind::B: {
      Tensor sh = relu(g, linear(g, reduced_vec, h.score_hidden_w, h.score_hidden_b));
      return linear(g, sh, h.score_out_w, h.score_out_b);
    }
    case HeadKind::C:
      return linear(g, reduced_vec, h.score_out_w, h.score_out_b);
  }
  throw ShapeError("unknown head kind");
}

inline HeadForward forward_head(Graph& g, const Head& h, const Tensor& trunk_features) {
  const int n = trunk_features.dim(0);
  const int s = trunk_features.dim(2);
  const int d = trunk_features.dim(1) * s * trunk_features.dim(3);
  Tensor flat = reshape(g, trunk_features, {n, d});
  HeadForward out;
  out.reduced_vec = relu(g, linear(g, flat, h.reduce_w, h.reduce_b));
  out.coarse_logits =
      reshape(g, linear(g, out.reduced_vec, h.coarse_w, h.coarse_b), {n, 1, s, s});
  out.score_logit = forward_score_branch(g, h, flat, out.reduced_vec);
  return out;
}

enum class ModelMode { feedforward_only, refined };

struct ModelConfig {
  TrunkConfig trunk;
  HeadConfig head;
  int schedule_k = 16;
  ScheduleVariant schedule_variant = ScheduleVariant::halving;
  int skip_mid = 64;
  std::uint64_t seed = 0;
  ModelMode mode = ModelMode::feedforward_only;
};

/// Trunk + head + (in refined mode) the refinement stack. The mask-encoding
/// projection m1 always exists so both training stages draw identical
/// initializations from the same seed; it is trained in stage 2 only.
struct Model {
  ModelConfig cfg;
  Trunk trunk;
  Head head;
  Tensor m1_w, m1_b;  // [k_m[0]*s*s, hidden]
  ChannelSchedule schedule;
  std::vector<RefinementModule> stack;

  int patch_side() const { return cfg.trunk.width; }
};

inline Model build_model(const ModelConfig& cfg) {
  cfg.trunk.validate();
  Graph g(cfg.seed);
  Model m;
  m.cfg = cfg;
  m.trunk = build_trunk(g, cfg.trunk);
  m.head = build_head(g, cfg.head, cfg.trunk);
  m.schedule = make_schedule(cfg.schedule_k, cfg.schedule_variant, cfg.trunk.pools);
  const int s = cfg.trunk.final_side();
  const int m1_out = m.schedule.n > 0 ? m.schedule.k_m[0] : 1;
  m.m1_w = param_uniform(g, {m1_out * s * s, cfg.head.hidden}, cfg.head.hidden);
  m.m1_b = param_uniform(g, {m1_out * s * s}, cfg.head.hidden);
  if (cfg.mode == ModelMode::refined) {
    for (int i = 0; i < m.schedule.n; ++i) {
      // Stage i consumes the last conv output of trunk level P-i.
      const int k_f = cfg.trunk.level_channels(cfg.trunk.pools - i);
      m.stack.push_back(make_refinement_module(
          g, i, k_f, m.schedule.k_m[static_cast<std::size_t>(i)],
          m.schedule.k_s[static_cast<std::size_t>(i)], m.schedule.out_channels(i),
          cfg.skip_mid));
    }
  }
  return m;
}

struct NamedParam {
  std::string name;
  Tensor tensor;
};

/// Frozen across stage 2: every trunk and head parameter.
inline std::vector<NamedParam> trunk_head_parameters(const Model& m) {
  std::vector<NamedParam> ps;
  for (std::size_t i = 0; i < m.trunk.conv_w.size(); ++i) {
    ps.push_back({"trunk.conv" + std::to_string(i) + ".weight", m.trunk.conv_w[i]});
    ps.push_back({"trunk.conv" + std::to_string(i) + ".bias", m.trunk.conv_b[i]});
  }
  ps.push_back({"trunk.reduce.weight", m.trunk.reduce_w});
  ps.push_back({"trunk.reduce.bias", m.trunk.reduce_b});
  ps.push_back({"head.reduce.weight", m.head.reduce_w});
  ps.push_back({"head.reduce.bias", m.head.reduce_b});
  ps.push_back({"head.coarse.weight", m.head.coarse_w});
  ps.push_back({"head.coarse.bias", m.head.coarse_b});
  if (m.head.cfg.kind == HeadKind::A) {
    ps.push_back({"head.score_reduce.weight", m.head.score_reduce_w});
    ps.push_back({"head.score_reduce.bias", m.head.score_reduce_b});
  }
  if (m.head.cfg.kind != HeadKind::C) {
    ps.push_back({"head.score_hidden.weight", m.head.score_hidden_w});
    ps.push_back({"head.score_hidden.bias", m.head.score_hidden_b});
  }
  ps.push_back({"head.score_out.weight", m.head.score_out_w});
  ps.push_back({"head.score_out.bias", m.head.score_out_b});
  return ps;
}

/// Trainable in stage 2: the mask-encoding projection plus every refinement
/// module (checkpoint names refine.{i}.{skip_a|skip_b|merge}.{weight|bias},
/// with i counting stages from 1).
inline std::vector<NamedParam> stage2_parameters(const Model& m) {
  std::vector<NamedParam> ps;
  ps.push_back({"refine.m1.weight", m.m1_w});
  ps.push_back({"refine.m1.bias", m.m1_b});
  for (const auto& mod : m.stack) {
    const std::string p = "refine." + std::to_string(mod.stage + 1) + ".";
    ps.push_back({p + "skip_a.weight", mod.skip_a_w});
    ps.push_back({p + "skip_a.bias", mod.skip_a_b});
    ps.push_back({p + "skip_b.weight", mod.skip_b_w});
    ps.push_back({p + "skip_b.bias", mod.skip_b_b});
    ps.push_back({p + "merge.weight", mod.merge_w});
    ps.push_back({p + "merge.bias", mod.merge_b});
  }
  return ps;
}

inline std::vector<NamedParam> named_parameters(const Model& m) {
  std::vector<NamedParam> ps = trunk_head_parameters(m);
  auto s2 = stage2_parameters(m);
  ps.insert(ps.end(), s2.begin(), s2.end());
  return ps;
}

inline std::size_t parameter_count(const std::vector<NamedParam>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.tensor.size();
  return n;
}

struct FeedForward {
  Tensor reduced_vec;    // [N, hidden]
  Tensor m1;             // [N, k_m1, s, s]
  Tensor coarse_logits;  // [N, 1, s, s]
  Tensor score_logit;    // [N, 1]
  std::vector<Tensor> features;  // deepest-first, for stack_refine
};

/// Bottom-up pass: mask encoding M1, score logit, and the cached per-level
/// conv outputs. With frozen_trunk the gradient path is cut between the
/// trunk/head and everything downstream, so only stage-2 parameters can
/// receive gradients.
inline FeedForward forward_feedforward(Graph& g, const Model& m, const Tensor& patch,
                                       bool frozen_trunk = false) {
  TrunkForward tf = trunk_forward(g, m.trunk, patch);
  HeadForward hf = forward_head(g, m.head, tf.reduced);
  FeedForward out;
  out.features = std::move(tf.features);
  if (frozen_trunk)
    for (auto& f : out.features) f = detach(g, f);
  out.reduced_vec = frozen_trunk ? detach(g, hf.reduced_vec) : hf.reduced_vec;
  out.coarse_logits = hf.coarse_logits;
  out.score_logit = hf.score_logit;
  const int n = patch.dim(0);
  const int s = m.cfg.trunk.final_side();
  const int k_m1 = m.schedule.n > 0 ? m.schedule.k_m[0] : 1;
  out.m1 = reshape(g, linear(g, out.reduced_vec, m.m1_w, m.m1_b), {n, k_m1, s, s});
  return out;
}

/// Upsample trunk-resolution logits back to the patch resolution by P
/// doublings (the feedforward-only mask path).
inline Tensor upsample_to_patch(Graph& g, Tensor coarse, int pools) {
  for (int i = 0; i < pools; ++i) coarse = bilinear_up2(g, coarse);
  return coarse;
}

struct RefinedForward {
  Tensor mask_prob;   // [N, 1, W, W]
  Tensor score_prob;  // [N, 1]
  FeedForward ff;
};

inline RefinedForward forward_refined(Graph& g, const Model& m, const Tensor& patch,
                                      bool frozen_trunk = false) {
  if (m.cfg.mode != ModelMode::refined)
    throw ShapeError("forward_refined: model lacks a refinement stack");
  RefinedForward out;
  out.ff = forward_feedforward(g, m, patch, frozen_trunk);
  out.mask_prob = stack_refine(g, out.ff.m1, out.ff.features, m.stack);
  out.score_prob = sigmoid(g, out.ff.score_logit);
  return out;
}

struct InferenceConfig {
  int top_n = 10;
  int stride = 0;               // 0: use the trunk stride 2^P
  double score_threshold = 0.0; // pre-filter on the score probability
  int min_object_size = 8;      // smallest object side the proposer is meant to cover
};

/// Copy a W x W window at (x, y) from a [1,C,H,W] image into row `row` of a
/// batch tensor [B,C,side,side].
inline void copy_window(const Tensor& image, int x, int y, int side, Tensor& batch, int row) {
  const int c = image.dim(1), ih = image.dim(2), iw = image.dim(3);
  (void)ih;
  double* dst = batch.data_mut() +
                static_cast<std::size_t>(row) * c * side * side;
  for (int ch = 0; ch < c; ++ch) {
    const double* src = image.data() + static_cast<std::size_t>(ch) * ih * iw;
    for (int yy = 0; yy < side; ++yy)
      std::copy_n(src + static_cast<std::size_t>(y + yy) * iw + x, side,
                  dst + (static_cast<std::size_t>(ch) * side + yy) * side);
  }
}

/// Slide a W x W window over the image, score every window with the
/// feedforward path, then run the requested mask path on only the top-N
/// scoring windows as one batch. Proposals come back sorted by descending
/// score (ties broken by window index).
inline ProposalSet propose(const Model& m, const Tensor& image, const InferenceConfig& icfg,
                           bool refined = true) {
  if (image.ndim() != 4 || image.dim(0) != 1 || image.dim(1) != m.cfg.trunk.input_channels)
    throw ShapeError("propose: image must be [1,C,H,W]");
  const int wside = m.patch_side();
  const int ih = image.dim(2), iw = image.dim(3);
  if (ih < wside || iw < wside)
    throw ShapeError("propose: image smaller than the " + std::to_string(wside) + "px window");
  if (icfg.top_n < 1) throw ShapeError("propose: top_n must be >= 1");
  if (refined && m.cfg.mode != ModelMode::refined)
    throw ShapeError("propose: refined output requested from a feedforward-only model");
  const int stride = icfg.stride > 0 ? icfg.stride : m.cfg.trunk.total_stride();

  struct Win { int x, y; double score; int index; };
  std::vector<Win> wins;
  for (int y = 0; y + wside <= ih; y += stride)
    for (int x = 0; x + wside <= iw; x += stride)
      wins.push_back({x, y, 0.0, static_cast<int>(wins.size())});

  const int chunk = 32;
  Graph g;
  for (std::size_t at = 0; at < wins.size(); at += chunk) {
    const int b = static_cast<int>(std::min<std::size_t>(chunk, wins.size() - at));
    Tensor batch = Tensor::zeros({b, m.cfg.trunk.input_channels, wside, wside});
    for (int i = 0; i < b; ++i)
      copy_window(image, wins[at + i].x, wins[at + i].y, wside, batch, i);
    g.reset();
    FeedForward ff = forward_feedforward(g, m, batch);
    Tensor score = sigmoid(g, ff.score_logit);
    for (int i = 0; i < b; ++i) wins[at + i].score = score.values()[static_cast<std::size_t>(i)];
  }

  std::vector<Win> kept;
  for (const auto& w : wins)
    if (w.score >= icfg.score_threshold) kept.push_back(w);
  std::sort(kept.begin(), kept.end(), [](const Win& a, const Win& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  if (kept.size() > static_cast<std::size_t>(icfg.top_n))
    kept.resize(static_cast<std::size_t>(icfg.top_n));

  ProposalSet out;
  out.frame_h = ih;
  out.frame_w = iw;
  if (kept.empty()) return out;

  Tensor batch = Tensor::zeros({static_cast<int>(kept.size()), m.cfg.trunk.input_channels,
                                wside, wside});
  for (std::size_t i = 0; i < kept.size(); ++i)
    copy_window(image, kept[i].x, kept[i].y, wside, batch, static_cast<int>(i));
  g.reset();
  Tensor masks;
  if (refined) {
    RefinedForward rf = forward_refined(g, m, batch);
    masks = rf.mask_prob;
  } else {
    FeedForward ff = forward_feedforward(g, m, batch);
    masks = sigmoid(g, upsample_to_patch(g, ff.coarse_logits, m.cfg.trunk.pools));
  }
  for (std::size_t i = 0; i < kept.size(); ++i) {
    Proposal p;
    p.x = kept[i].x;
    p.y = kept[i].y;
    p.score = kept[i].score;
    p.mask_h = wside;
    p.mask_w = wside;
    const double* src = masks.data() + i * static_cast<std::size_t>(wside) * wside;
    p.mask.assign(src, src + static_cast<std::size_t>(wside) * wside);
    out.items.push_back(std::move(p));
  }
  return out;
}

inline void to_json(nlohmann::json& j, const TrunkConfig& c) {
  j = {{"input_channels", c.input_channels}, {"width", c.width},
       {"pools", c.pools},                   {"depth", c.depth},
       {"feature_channels", c.feature_channels},
       {"base_channels", c.base_channels},   {"channel_cap", c.channel_cap}};
}

inline void from_json(const nlohmann::json& j, TrunkConfig& c) {
  c.input_channels = j.value("input_channels", c.input_channels);
  c.width = j.value("width", c.width);
  c.pools = j.value("pools", c.pools);
  c.depth = j.value("depth", c.depth);
  c.feature_channels = j.value("feature_channels", c.feature_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_cap = j.value("channel_cap", c.channel_cap);
}

inline void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = {{"kind", std::string(1, head_kind_char(c.kind))},
       {"hidden", c.hidden},
       {"score_hidden", c.score_hidden}};
}

inline void from_json(const nlohmann::json& j, HeadConfig& c) {
  const std::string k = j.value("kind", std::string(1, head_kind_char(c.kind)));
  if (k.empty()) throw ShapeError("head config: empty kind");
  c.kind = head_kind_from_char(k[0]);
  c.hidden = j.value("hidden", c.hidden);
  c.score_hidden = j.value("score_hidden", c.score_hidden);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"trunk", c.trunk},
       {"head", c.head},
       {"schedule_k", c.schedule_k},
       {"schedule_variant", c.schedule_variant == ScheduleVariant::halving ? "halving" : "constant"},
       {"skip_mid", c.skip_mid},
       {"seed", c.seed},
       {"mode", c.mode == ModelMode::refined ? "refined" : "feedforward_only"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("trunk")) j.at("trunk").get_to(c.trunk);
  if (j.contains("head")) j.at("head").get_to(c.head);
  c.schedule_k = j.value("schedule_k", c.schedule_k);
  const std::string v = j.value("schedule_variant", "halving");
  if (v == "halving") c.schedule_variant = ScheduleVariant::halving;
  else if (v == "constant") c.schedule_variant = ScheduleVariant::constant;
  else throw ShapeError("model config: unknown schedule variant '" + v + "'");
  c.skip_mid = j.value("skip_mid", c.skip_mid);
  c.seed = j.value("seed", c.seed);
  const std::string m = j.value("mode", "feedforward_only");
  if (m == "refined") c.mode = ModelMode::refined;
  else if (m == "feedforward_only") c.mode = ModelMode::feedforward_only;
  else throw ShapeError("model config: unknown mode '" + m + "'");
}

inline void to_json(nlohmann::json& j, const InferenceConfig& c) {
  j = {{"top_n", c.top_n},
       {"stride", c.stride},
       {"score_threshold", c.score_threshold},
       {"min_object_size", c.min_object_size}};
}

inline void from_json(const nlohmann::json& j, InferenceConfig& c) {
  c.top_n = j.value("top_n", c.top_n);
  c.stride = j.value("stride", c.stride);
  c.score_threshold = j.value("score_threshold", c.score_threshold);
  c.min_object_size = j.value("min_object_size", c.min_object_size);
}

}  // namespace maskref
