// SPDX-License-Identifier: Apache-2.0
//
// Two-stage optimization: stage 1 trains trunk + head jointly on the coarse
// mask and the objectness score; stage 2 freezes the feedforward path and
// trains only the mask-encoding projection and the refinement modules.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskref/network.hpp"
#include "maskref/refine.hpp"
#include "maskref/synthdata.hpp"

namespace maskref {

struct TrainConfig {
  double lr_stage1 = 1e-3;
  double lr_stage2 = 1e-3;
  double momentum = 0.9;
  int batch_size = 16;
  int epochs_stage1 = 4;
  int epochs_stage2 = 4;
  double score_loss_weight = 1.0 / 32.0;  // lambda
  std::uint64_t seed = 0;

  void validate() const {
    if (lr_stage1 <= 0.0 || lr_stage2 <= 0.0)
      throw ShapeError("train config: learning rates must be positive");
    if (score_loss_weight <= 0.0)
      throw ShapeError("train config: score loss weight must be positive");
    if (batch_size < 1 || epochs_stage1 < 1 || epochs_stage2 < 1)
      throw ShapeError("train config: batch size and epochs must be at least 1");
    if (momentum < 0.0 || momentum >= 1.0)
      throw ShapeError("train config: momentum must lie in [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr_stage1", c.lr_stage1},
       {"lr_stage2", c.lr_stage2},
       {"momentum", c.momentum},
       {"batch_size", c.batch_size},
       {"epochs_stage1", c.epochs_stage1},
       {"epochs_stage2", c.epochs_stage2},
       {"score_loss_weight", c.score_loss_weight},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr_stage1 = j.value("lr_stage1", c.lr_stage1);
  c.lr_stage2 = j.value("lr_stage2", c.lr_stage2);
  c.momentum = j.value("momentum", c.momentum);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs_stage1 = j.value("epochs_stage1", c.epochs_stage1);
  c.epochs_stage2 = j.value("epochs_stage2", c.epochs_stage2);
  c.score_loss_weight = j.value("score_loss_weight", c.score_loss_weight);
  c.seed = j.value("seed", c.seed);
}

/// One training-log record; serialized as JSON lines by the CLI.
struct EpochLog {
  int stage = 0;
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double mean_iou = -1.0;  // -1 when not measured for this split
};

using LogSink = std::function<void(const EpochLog&)>;

/// Plain SGD with classical momentum over an explicit parameter set.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(std::vector<Tensor> params) : params_(std::move(params)) {
    for (auto& p : params_) velocity_.emplace_back(p.size(), 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr, double momentum) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto g = params_[i].grad();
      auto v = std::span<double>(velocity_[i]);
      auto p = params_[i].values_mut();
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = momentum * v[k] - lr * g[k];
        p[k] += v[k];
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
};

namespace detail {

/// In-place Fisher-Yates with our own uniform draw, so shuffles do not
/// depend on the standard library's std::shuffle implementation.
inline void shuffle_indices(std::vector<int>& idx, std::mt19937_64& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
}

struct Batch {
  Tensor patches;       // [B, C, W, W]
  Tensor labels01;      // [B, 1]
  std::vector<int> positive_rows;
  Tensor masks_pos;     // [P, 1, W, W] ground truth for the positive rows
};

inline Batch assemble_batch(const Dataset& ds, std::span<const int> indices) {
  const int b = static_cast<int>(indices.size());
  const auto& first = ds.samples.at(static_cast<std::size_t>(indices[0]));
  const int c = first.patch.dim(0);
  const int w = first.patch.dim(1);
  Batch out;
  out.patches = Tensor::zeros({b, c, w, w});
  out.labels01 = Tensor::zeros({b, 1});
  for (int i = 0; i < b; ++i) {
    const auto& s = ds.samples.at(static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]));
    std::copy(s.patch.values().begin(), s.patch.values().end(),
              out.patches.values_mut().begin() + static_cast<std::size_t>(i) * c * w * w);
    out.labels01.values_mut()[static_cast<std::size_t>(i)] = s.label > 0 ? 1.0 : 0.0;
    if (s.label > 0) out.positive_rows.push_back(i);
  }
  if (!out.positive_rows.empty()) {
    out.masks_pos = Tensor::zeros({static_cast<int>(out.positive_rows.size()), 1, w, w});
    double* d = out.masks_pos.data_mut();
    for (std::size_t pi = 0; pi < out.positive_rows.size(); ++pi) {
      const auto& s = ds.samples.at(static_cast<std::size_t>(
          indices[static_cast<std::size_t>(out.positive_rows[pi])]));
      for (std::size_t k = 0; k < s.mask.v.size(); ++k)
        d[pi * s.mask.v.size() + k] = s.mask.v[k] ? 1.0 : 0.0;
    }
  }
  return out;
}

}  // namespace detail

/// Joint loss: mean per-pixel BCE on the mask over positive samples only,
/// plus lambda times the BCE of the objectness score over all samples.
/// mask_prob_pos may be undefined when the batch holds no positives.
inline Tensor loss_joint(Graph& g, const Tensor& mask_prob_pos, const Tensor& mask_gt_pos,
                         const Tensor& score_logit, const Tensor& label01, double lambda) {
  Tensor score_term = bce_loss(g, sigmoid(g, score_logit), label01);
  Tensor total = scale(g, score_term, lambda);
  if (mask_prob_pos.defined() && mask_prob_pos.size() > 0)
    total = add(g, total, bce_loss(g, mask_prob_pos, mask_gt_pos));
  return total;
}

/// Mean IoU of the requested mask path against ground truth over the val
/// positives, with the standard 0.2 binarization.
inline double mean_patch_iou(const Model& model, const Dataset& ds, bool refined,
                             double thr = 0.2, int chunk = 32) {
  const auto pos = ds.positives();
  if (pos.empty()) throw ShapeError("mean_patch_iou: dataset has no positives");
  const int w = model.patch_side();
  double acc = 0.0;
  Graph g;
  for (std::size_t at = 0; at < pos.size(); at += static_cast<std::size_t>(chunk)) {
    std::span<const int> rows(pos.data() + at,
                              std::min<std::size_t>(static_cast<std::size_t>(chunk),
                                                    pos.size() - at));
    auto batch = detail::assemble_batch(ds, rows);
    g.reset();
    Tensor prob;
    if (refined) {
      prob = forward_refined(g, model, batch.patches).mask_prob;
    } else {
      FeedForward ff = forward_feedforward(g, model, batch.patches);
      prob = sigmoid(g, upsample_to_patch(g, ff.coarse_logits, model.cfg.trunk.pools));
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::vector<double> m(prob.values().begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(w) * w),
                            prob.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * static_cast<std::size_t>(w) * w));
      const auto& s = ds.samples.at(static_cast<std::size_t>(rows[i]));
      acc += iou(binarize(m, w, w, thr), s.mask);
    }
  }
  return acc / static_cast<double>(pos.size());
}

/// Fraction of val samples whose score crosses 0.5 on the correct side.
inline double score_accuracy(const Model& model, const Dataset& ds, int chunk = 32) {
  if (ds.samples.empty()) throw ShapeError("score_accuracy: empty dataset");
  std::vector<int> all(ds.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  std::size_t correct = 0;
  Graph g;
  for (std::size_t at = 0; at < all.size(); at += static_cast<std::size_t>(chunk)) {
    std::span<const int> rows(all.data() + at,
                              std::min<std::size_t>(static_cast<std::size_t>(chunk),
                                                    all.size() - at));
    auto batch = detail::assemble_batch(ds, rows);
    g.reset();
    FeedForward ff = forward_feedforward(g, model, batch.patches);
    Tensor prob = sigmoid(g, ff.score_logit);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const bool said_yes = prob.values()[i] >= 0.5;
      const bool is_pos = ds.samples.at(static_cast<std::size_t>(rows[i])).label > 0;
      correct += said_yes == is_pos;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

/// Stage 1: joint coarse-mask + score training of trunk and head. The coarse
/// logits are upsampled to patch resolution before the mask BCE so the loss
/// matches the evaluation path. Throws NumericError on divergence.
inline void train_stage1(Model& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& cfg, const LogSink& log = {}) {
  cfg.validate();
  std::vector<Tensor> params;
  for (auto& p : trunk_head_parameters(model)) params.push_back(p.tensor);
  SgdOptimizer opt(params);
  std::vector<int> order(train.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 100, static_cast<std::uint64_t>(epoch)));
    detail::shuffle_indices(order, shuffle_rng);
    double loss_acc = 0.0;
    std::size_t seen = 0;
    Graph g;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      std::span<const int> rows(order.data() + at,
                                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                                      order.size() - at));
      auto batch = detail::assemble_batch(train, rows);
      g.reset();
      opt.zero_grad();
      FeedForward ff = forward_feedforward(g, model, batch.patches);
      Tensor coarse_full = sigmoid(g, upsample_to_patch(g, ff.coarse_logits,
                                                        model.cfg.trunk.pools));
      Tensor mask_pos;
      if (!batch.positive_rows.empty())
        mask_pos = select_rows(g, coarse_full, batch.positive_rows);
      Tensor loss = loss_joint(g, mask_pos, batch.masks_pos, ff.score_logit,
                               batch.labels01, cfg.score_loss_weight);
      if (!std::isfinite(loss.item()))
        throw NumericError("stage-1 training diverged (non-finite loss)");
      g.backward(loss);
      opt.step(cfg.lr_stage1, cfg.momentum);
      loss_acc += loss.item() * static_cast<double>(rows.size());
      seen += rows.size();
    }
    if (log) {
      log({1, epoch, "train", loss_acc / static_cast<double>(seen), -1.0});
      if (!val.samples.empty())
        log({1, epoch, "val", -1.0, mean_patch_iou(model, val, /*refined=*/false)});
    }
  }
}

/// Stage 2: the feedforward path is frozen (its tensors never receive
/// gradients thanks to the detach in forward_feedforward) and only the
/// mask-encoding projection plus the refinement convolutions are updated.
/// Only positive samples carry a mask loss, so negatives are skipped.
inline void train_stage2(Model& model, const Dataset& train, const Dataset& val,
                         const TrainConfig& cfg, const LogSink& log = {}) {
  cfg.validate();
  if (model.cfg.mode != ModelMode::refined || model.stack.empty())
    throw ShapeError("train_stage2: model has no refinement stack");
  std::vector<Tensor> params;
  for (auto& p : stage2_parameters(model)) params.push_back(p.tensor);
  SgdOptimizer opt(params);
  std::vector<int> order = train.positives();
  if (order.empty()) throw ShapeError("train_stage2: no positive samples");

  for (int epoch = 0; epoch < cfg.epochs_stage2; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 200, static_cast<std::uint64_t>(epoch)));
    detail::shuffle_indices(order, shuffle_rng);
    double loss_acc = 0.0;
    std::size_t seen = 0;
    Graph g;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      std::span<const int> rows(order.data() + at,
                                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                                      order.size() - at));
      auto batch = detail::assemble_batch(train, rows);
      g.reset();
      opt.zero_grad();
      RefinedForward rf = forward_refined(g, model, batch.patches, /*frozen_trunk=*/true);
      Tensor loss = bce_loss(g, rf.mask_prob, batch.masks_pos);
      if (!std::isfinite(loss.item()))
        throw NumericError("stage-2 training diverged (non-finite loss)");
      g.backward(loss);
      opt.step(cfg.lr_stage2, cfg.momentum);
      loss_acc += loss.item() * static_cast<double>(rows.size());
      seen += rows.size();
    }
    if (log) {
      log({2, epoch, "train", loss_acc / static_cast<double>(seen), -1.0});
      if (!val.samples.empty())
        log({2, epoch, "val", -1.0, mean_patch_iou(model, val, /*refined=*/true)});
    }
  }
}

struct DualInference {
  Tensor coarse_prob;   // [N, 1, W, W]: legacy coarse layer, upsampled
  Tensor refined_prob;  // [N, 1, W, W]: refinement stack output
  Tensor score_prob;    // [N, 1]
};

/// One trunk evaluation yields both the coarse and the sharp mask plus the
/// score; the coarse layer is kept read-only after stage 2 exactly for this.
inline DualInference dual_inference(Graph& g, const Model& model, const Tensor& patch) {
  if (model.cfg.mode != ModelMode::refined || model.stack.empty())
    throw ShapeError("dual_inference: model lacks stage-2 parameters");
  FeedForward ff = forward_feedforward(g, model, patch);
  DualInference out;
  out.coarse_prob = sigmoid(g, upsample_to_patch(g, ff.coarse_logits, model.cfg.trunk.pools));
  out.refined_prob = stack_refine(g, ff.m1, ff.features, model.stack);
  out.score_prob = sigmoid(g, ff.score_logit);
  return out;
}

enum class AblationKind { skip_only, no_horizontal };

/// Stage-2-style ablation heads trained on top of a frozen stage-1 model.
struct AblationModel {
  AblationKind kind = AblationKind::skip_only;
  Tensor m1_w, m1_b;  // used by no_horizontal only
  std::vector<RefinementModule> modules;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    if (kind == AblationKind::no_horizontal) {
      ps.push_back(m1_w);
      ps.push_back(m1_b);
    }
    for (const auto& m : modules)
      for (auto& t : m.parameters()) ps.push_back(t);
    return ps;
  }
};

inline AblationModel build_ablation(const Model& base, AblationKind kind, std::uint64_t seed) {
  Graph g(seed);
  AblationModel a;
  a.kind = kind;
  const auto& tc = base.cfg.trunk;
  const int s = tc.final_side();
  ChannelSchedule sched = make_schedule(base.cfg.schedule_k, base.cfg.schedule_variant, tc.pools);
  if (kind == AblationKind::no_horizontal) {
    a.m1_w = param_uniform(g, {sched.k_m[0] * s * s, base.cfg.head.hidden}, base.cfg.head.hidden);
    a.m1_b = param_uniform(g, {sched.k_m[0] * s * s}, base.cfg.head.hidden);
  }
  for (int i = 0; i < sched.n; ++i) {
    const int k_f = tc.level_channels(tc.pools - i);
    if (kind == AblationKind::skip_only) {
      a.modules.push_back(make_refinement_module(g, i, k_f, 1, 1, 1, base.cfg.skip_mid));
    } else {
      a.modules.push_back(make_refinement_module(g, i, k_f, sched.k_m[static_cast<std::size_t>(i)],
                                                 sched.k_s[static_cast<std::size_t>(i)],
                                                 sched.out_channels(i), base.cfg.skip_mid));
    }
  }
  return a;
}

inline Tensor ablation_forward(Graph& g, const Model& base, const AblationModel& abl,
                               const Tensor& patches) {
  FeedForward ff = forward_feedforward(g, base, patches, /*frozen_trunk=*/true);
  if (abl.kind == AblationKind::skip_only)
    return ablation_skip_only(g, ff.features, abl.modules);
  const int n = patches.dim(0);
  const int s = base.cfg.trunk.final_side();
  const int k_m1 = abl.modules.front().k_m();
  Tensor m1 = reshape(g, linear(g, ff.reduced_vec, abl.m1_w, abl.m1_b), {n, k_m1, s, s});
  return ablation_no_horizontal(g, m1, ff.features, abl.modules);
}

/// Train an ablation variant with the stage-2 recipe; returns nothing; query
/// quality with ablation_mean_iou afterwards.
inline void train_ablation(const Model& base, AblationModel& abl, const Dataset& train,
                           const TrainConfig& cfg, const LogSink& log = {}) {
  cfg.validate();
  SgdOptimizer opt(abl.parameters());
  std::vector<int> order = train.positives();
  if (order.empty()) throw ShapeError("train_ablation: no positive samples");
  for (int epoch = 0; epoch < cfg.epochs_stage2; ++epoch) {
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 300, static_cast<std::uint64_t>(epoch)));
    detail::shuffle_indices(order, shuffle_rng);
    double loss_acc = 0.0;
    std::size_t seen = 0;
    Graph g;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      std::span<const int> rows(order.data() + at,
                                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                                      order.size() - at));
      auto batch = detail::assemble_batch(train, rows);
      g.reset();
      opt.zero_grad();
      Tensor prob = ablation_forward(g, base, abl, batch.patches);
      Tensor loss = bce_loss(g, prob, batch.masks_pos);
      if (!std::isfinite(loss.item()))
        throw NumericError("ablation training diverged (non-finite loss)");
      g.backward(loss);
      opt.step(cfg.lr_stage2, cfg.momentum);
      loss_acc += loss.item() * static_cast<double>(rows.size());
      seen += rows.size();
    }
    if (log) log({2, epoch, "train", loss_acc / static_cast<double>(seen), -1.0});
  }
}

inline double ablation_mean_iou(const Model& base, const AblationModel& abl, const Dataset& ds,
                                double thr = 0.2, int chunk = 32) {
  const auto pos = ds.positives();
  if (pos.empty()) throw ShapeError("ablation_mean_iou: dataset has no positives");
  const int w = base.patch_side();
  double acc = 0.0;
  Graph g;
  for (std::size_t at = 0; at < pos.size(); at += static_cast<std::size_t>(chunk)) {
    std::span<const int> rows(pos.data() + at,
                              std::min<std::size_t>(static_cast<std::size_t>(chunk),
                                                    pos.size() - at));
    auto batch = detail::assemble_batch(ds, rows);
    g.reset();
    Tensor prob = ablation_forward(g, base, abl, batch.patches);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::vector<double> m(prob.values().begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(w) * w),
                            prob.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * static_cast<std::size_t>(w) * w));
      acc += iou(binarize(m, w, w, thr), ds.samples.at(static_cast<std::size_t>(rows[i])).mask);
    }
  }
  return acc / static_cast<double>(pos.size());
}

}  // namespace maskref
