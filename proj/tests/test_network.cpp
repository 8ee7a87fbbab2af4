// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "maskref/network.hpp"
#include "test_support.hpp"

using namespace maskref;
using Catch::Approx;
namespace ts = testsupport;

namespace {

ModelConfig desk_config(ModelMode mode = ModelMode::refined) {
  ModelConfig cfg;
  cfg.trunk = {.input_channels = 1, .width = 64, .pools = 3, .depth = 6,
               .feature_channels = 64, .base_channels = 8, .channel_cap = 64};
  cfg.head = {.kind = HeadKind::C, .hidden = 128, .score_hidden = 64};
  cfg.schedule_k = 16;
  cfg.schedule_variant = ScheduleVariant::halving;
  cfg.seed = 7;
  cfg.mode = mode;
  return cfg;
}

ModelConfig tiny_config(int width, int pools, ModelMode mode = ModelMode::refined) {
  ModelConfig cfg;
  cfg.trunk = {.input_channels = 1, .width = width, .pools = pools, .depth = pools + 2,
               .feature_channels = 8, .base_channels = 4, .channel_cap = 16};
  cfg.head = {.kind = HeadKind::C, .hidden = 16, .score_hidden = 8};
  cfg.schedule_k = 1 << std::max(0, pools - 1);
  cfg.schedule_variant = ScheduleVariant::halving;
  cfg.seed = 3;
  cfg.mode = mode;
  return cfg;
}

}  // namespace

TEST_CASE("trunk knob arithmetic follows the stride-density definition") {
  TrunkConfig t;
  t.width = 160;
  t.pools = 4;
  t.depth = 8;
  REQUIRE(t.stride_density() == 10);
  REQUIRE(t.final_side() == 10);

  t.width = 112;
  t.pools = 3;
  REQUIRE(t.stride_density() == 14);

  t.width = 64;
  t.pools = 3;
  REQUIRE(t.final_side() == 8);

  t.width = 100;
  REQUIRE_THROWS_AS(t.validate(), ShapeError);

  t.width = 64;
  t.depth = 3;  // fewer convs than levels
  REQUIRE_THROWS_AS(t.validate(), ShapeError);
}

TEST_CASE("conv layers spread over levels, extras deepest-first") {
  TrunkConfig t;
  t.pools = 3;
  t.depth = 6;
  REQUIRE(t.level_conv_counts() == std::vector<int>{1, 1, 2, 2});
  t.depth = 4;
  REQUIRE(t.level_conv_counts() == std::vector<int>{1, 1, 1, 1});
  t.depth = 9;
  REQUIRE(t.level_conv_counts() == std::vector<int>{2, 2, 2, 3});
}

TEST_CASE("feedforward pass produces the documented geometry") {
  auto cfg = desk_config(ModelMode::feedforward_only);
  Model m = build_model(cfg);
  std::mt19937_64 rng(5);
  Tensor patch = ts::random_tensor(rng, {2, 1, 64, 64}, 0.0, 1.0);
  Graph g;
  FeedForward ff = forward_feedforward(g, m, patch);

  SECTION("mask encoding sits at the trunk resolution") {
    REQUIRE(ff.m1.shape() == Shape{2, 16, 8, 8});
    REQUIRE(ff.coarse_logits.shape() == Shape{2, 1, 8, 8});
    REQUIRE(ff.score_logit.shape() == Shape{2, 1});
  }
  SECTION("one cached feature map per pooling stage, deepest first") {
    REQUIRE(ff.features.size() == 3);
    // deepest-first:..., shallowest feature halves the input once
    REQUIRE(ff.features[0].dim(2) == 8);
    REQUIRE(ff.features[1].dim(2) == 16);
    REQUIRE(ff.features[2].dim(2) == 32);
    REQUIRE(ff.features[0].dim(1) == 64);
    REQUIRE(ff.features[1].dim(1) == 32);
    REQUIRE(ff.features[2].dim(1) == 16);
  }
  SECTION("wrong patch size is rejected") {
    Tensor bad = Tensor::zeros({1, 1, 32, 32});
    Graph g2;
    REQUIRE_THROWS_AS(forward_feedforward(g2, m, bad), ShapeError);
  }
}

TEST_CASE("head variants share the mask pathway and differ in score wiring") {
  const TrunkConfig tc = desk_config().trunk;
  std::mt19937_64 rng(11);
  Tensor feats = ts::random_tensor(rng, {2, 64, 8, 8});

  Graph ga(1), gb(1), gc(1);
  Head a = build_head(ga, {.kind = HeadKind::A, .hidden = 128, .score_hidden = 64}, tc);
  Head b = build_head(gb, {.kind = HeadKind::B, .hidden = 128, .score_hidden = 64}, tc);
  Head c = build_head(gc, {.kind = HeadKind::C, .hidden = 128, .score_hidden = 64}, tc);

  SECTION("identical output shapes across variants") {
    Graph g;
    for (const Head* h : {&a, &b, &c}) {
      HeadForward hf = forward_head(g, *h, feats);
      REQUIRE(hf.coarse_logits.shape() == Shape{2, 1, 8, 8});
      REQUIRE(hf.score_logit.shape() == Shape{2, 1});
    }
  }

  SECTION("zero features and zero biases give a zero score logit") {
    Graph g;
    Tensor zero = Tensor::zeros({1, 64, 8, 8});
    for (Head* h : {&a, &b, &c}) {
      for (Tensor& t : h->parameters())
        if (t.ndim() == 1)
          std::fill(t.values_mut().begin(), t.values_mut().end(), 0.0);
      HeadForward hf = forward_head(g, *h, zero);
      REQUIRE(hf.score_logit.values()[0] == 0.0);
    }
  }

  SECTION("parameter counts are strictly ordered C < B < A") {
    auto count = [](const Head& h) {
      std::size_t n = 0;
      for (const auto& t : h.parameters()) n += t.size();
      return n;
    };
    REQUIRE(count(c) < count(b));
    REQUIRE(count(b) < count(a));
  }

  SECTION("head C derives the score from the mask branch's reduced vector") {
    // Perturbing the score-only path of head C is impossible: it has no
    // score_reduce / score_hidden parameters at all.
    REQUIRE_FALSE(c.score_reduce_w.defined());
    REQUIRE_FALSE(c.score_hidden_w.defined());
    REQUIRE(c.score_out_w.dim(1) == 128);
  }
}

TEST_CASE("forward_refined restores the patch resolution") {
  SECTION("desk configuration") {
    Model m = build_model(desk_config());
    std::mt19937_64 rng(13);
    Tensor patch = ts::random_tensor(rng, {1, 1, 64, 64}, 0.0, 1.0);
    Graph g;
    RefinedForward rf = forward_refined(g, m, patch);
    REQUIRE(rf.mask_prob.shape() == Shape{1, 1, 64, 64});
    for (double v : rf.mask_prob.values()) {
      REQUIRE(v > 0.0);
      REQUIRE(v < 1.0);
    }
    REQUIRE(rf.score_prob.values()[0] > 0.0);
    REQUIRE(rf.score_prob.values()[0] < 1.0);
  }
  SECTION("shape pipeline holds across (W, P) combinations") {
    std::mt19937_64 rng(17);
    for (int width : {32, 64}) {
      for (int pools : {3, 4}) {
        if (width % (1 << pools) != 0) continue;
        Model m = build_model(tiny_config(width, pools));
        Tensor patch = ts::random_tensor(rng, {1, 1, width, width}, 0.0, 1.0);
        Graph g;
        RefinedForward rf = forward_refined(g, m, patch);
        REQUIRE(rf.mask_prob.shape() == Shape{1, 1, width, width});
      }
    }
  }
  SECTION("feedforward-only models refuse the refined path") {
    Model m = build_model(desk_config(ModelMode::feedforward_only));
    Graph g;
    REQUIRE_THROWS_AS(forward_refined(g, m, Tensor::zeros({1, 1, 64, 64})), ShapeError);
  }
}

TEST_CASE("checkpoint name enumeration is stable and complete") {
  Model m = build_model(desk_config());
  auto frozen = trunk_head_parameters(m);
  auto s2 = stage2_parameters(m);
  REQUIRE(frozen.size() == 2 * 6 + 2 + 2 + 2 + 2);  // convs, reduce, head reduce/coarse/score_out
  REQUIRE(s2.size() == 2 + 3 * 6);                  // m1 + 3 stages x 3 convs x (w,b)
  REQUIRE(s2[0].name == "refine.m1.weight");
  REQUIRE(s2[2].name == "refine.1.skip_a.weight");
  REQUIRE(s2.back().name == "refine.3.merge.bias");
  // disjoint and non-aliased
  for (const auto& f : frozen)
    for (const auto& p : s2) REQUIRE_FALSE(f.tensor.same_payload(p.tensor));
}

TEST_CASE("propose slides, scores, and refines the top windows") {
  Model m = build_model(tiny_config(32, 3));
  std::mt19937_64 rng(19);

  SECTION("an image exactly the window size yields one proposal") {
    Tensor img = ts::random_tensor(rng, {1, 1, 32, 32}, 0.0, 1.0);
    InferenceConfig icfg;
    icfg.top_n = 7;
    ProposalSet ps = propose(m, img, icfg);
    REQUIRE(ps.items.size() == 1);
    REQUIRE(ps.items[0].x == 0);
    REQUIRE(ps.items[0].y == 0);
    REQUIRE(ps.items[0].mask.size() == 32 * 32);
  }

  SECTION("refined count is min(top_n, window count)") {
    Tensor img = ts::random_tensor(rng, {1, 1, 48, 56}, 0.0, 1.0);
    // stride defaults to 2^P = 8: windows = ((48-32)/8+1) * ((56-32)/8+1) = 3*4
    InferenceConfig icfg;
    icfg.top_n = 5;
    ProposalSet ps = propose(m, img, icfg);
    REQUIRE(ps.items.size() == 5);
    icfg.top_n = 100;
    ps = propose(m, img, icfg);
    REQUIRE(ps.items.size() == 12);
    for (std::size_t i = 1; i < ps.items.size(); ++i)
      REQUIRE(ps.items[i].score <= ps.items[i - 1].score);
  }

  SECTION("ties break by window index") {
    // zero every score parameter: all windows score exactly 0.5
    Model flat = build_model(tiny_config(32, 3));
    std::fill(flat.head.score_out_w.values_mut().begin(),
              flat.head.score_out_w.values_mut().end(), 0.0);
    std::fill(flat.head.score_out_b.values_mut().begin(),
              flat.head.score_out_b.values_mut().end(), 0.0);
    Tensor img = ts::random_tensor(rng, {1, 1, 48, 48}, 0.0, 1.0);
    InferenceConfig icfg;
    icfg.top_n = 3;
    ProposalSet ps = propose(flat, img, icfg);
    REQUIRE(ps.items.size() == 3);
    // windows enumerate row-major from the origin
    REQUIRE(ps.items[0].x == 0);
    REQUIRE(ps.items[0].y == 0);
    REQUIRE(ps.items[1].x == 8);
    REQUIRE(ps.items[1].y == 0);
    REQUIRE(ps.items[2].x == 16);
    REQUIRE(ps.items[2].y == 0);
  }

  SECTION("images smaller than the window are rejected") {
    REQUIRE_THROWS_AS(propose(m, Tensor::zeros({1, 1, 16, 16}), InferenceConfig{}),
                      ShapeError);
  }
}

TEST_CASE("overlapping windows share trunk features on aligned offsets") {
  // W=32, P=2, one conv per level: receptive radius 1/3/7 input pixels at
  // levels 0/1/2, so cells far enough from both windows' borders must agree.
  ModelConfig cfg = tiny_config(32, 2);
  cfg.trunk.depth = 3;
  Model m = build_model(cfg);
  std::mt19937_64 rng(23);
  Tensor img = ts::random_tensor(rng, {1, 1, 40, 64}, 0.0, 1.0);

  Tensor w0 = Tensor::zeros({1, 1, 32, 32});
  Tensor w1 = Tensor::zeros({1, 1, 32, 32});
  copy_window(img, 0, 0, 32, w0, 0);
  copy_window(img, 4, 0, 32, w1, 0);  // offset by the total stride 2^P = 4

  Graph g;
  FeedForward f0 = forward_feedforward(g, m, w0);
  FeedForward f1 = forward_feedforward(g, m, w1);

  struct Level { int feature_index, scale, radius; };
  // features deepest-first: level2 (scale 4, radius 7), level1 (scale 2, radius 3)
  for (Level lv : {Level{0, 4, 7}, Level{1, 2, 3}}) {
    const Tensor& a = f0.features[static_cast<std::size_t>(lv.feature_index)];
    const Tensor& b = f1.features[static_cast<std::size_t>(lv.feature_index)];
    const int side = a.dim(2);
    const int shift = 4 / lv.scale;
    const int ch = a.dim(1);
    bool compared_any = false;
    for (int cy = 0; cy < side; ++cy)
      for (int cx = 0; cx < side; ++cx) {
        auto clean = [&](int c) {
          return c * lv.scale >= lv.radius && (c + 1) * lv.scale <= 32 - lv.radius;
        };
        if (!clean(cy) || !clean(cx) || !clean(cx - shift)) continue;
        // w0 cell (cy, cx) covers the same input pixels as w1 cell (cy, cx - shift)
        for (int c = 0; c < ch; ++c) {
          const double va = a.values()[(static_cast<std::size_t>(c) * side + cy) * side + cx];
          const double vb = b.values()[(static_cast<std::size_t>(c) * side + cy) * side +
                                       (cx - shift)];
          REQUIRE(va == Approx(vb).margin(1e-12));
          compared_any = true;
        }
      }
    REQUIRE(compared_any);
  }
}

TEST_CASE("model config survives a JSON round trip") {
  ModelConfig cfg = desk_config();
  cfg.head.kind = HeadKind::B;
  cfg.schedule_variant = ScheduleVariant::constant;
  nlohmann::json j = cfg;
  ModelConfig back = j.get<ModelConfig>();
  REQUIRE(back.trunk.width == cfg.trunk.width);
  REQUIRE(back.trunk.pools == cfg.trunk.pools);
  REQUIRE(back.head.kind == HeadKind::B);
  REQUIRE(back.schedule_variant == ScheduleVariant::constant);
  REQUIRE(back.mode == ModelMode::refined);
  REQUIRE(back.seed == cfg.seed);

  InferenceConfig icfg;
  icfg.top_n = 33;
  nlohmann::json ji = icfg;
  REQUIRE(ji.get<InferenceConfig>().top_n == 33);
}

TEST_CASE("refined mode requires a schedule matching the pool count") {
  ModelConfig cfg = desk_config();
  cfg.schedule_k = 2;  // halving over 3 stages needs 4 | k
  REQUIRE_THROWS_AS(build_model(cfg), ShapeError);
}
