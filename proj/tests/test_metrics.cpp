// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "maskref/metrics.hpp"

using namespace maskref;
using Catch::Approx;

namespace {

BinaryMask mask_from(std::initializer_list<int> bits, int h, int w) {
  BinaryMask m;
  m.h = h;
  m.w = w;
  for (int b : bits) m.v.push_back(static_cast<std::uint8_t>(b));
  return m;
}

/// Rectangle mask helper on an h x w grid.
BinaryMask rect_mask(int h, int w, int y0, int x0, int bh, int bw) {
  BinaryMask m;
  m.h = h;
  m.w = w;
  m.v.assign(static_cast<std::size_t>(h) * w, 0);
  for (int y = y0; y < y0 + bh; ++y)
    for (int x = x0; x < x0 + bw; ++x) m.v[static_cast<std::size_t>(y) * w + x] = 1;
  return m;
}

/// Exhaustive oracle: the best one-to-one assignment of ground truths to
/// proposals, counting pairs with IoU >= t. Independent of the library's
/// augmenting-path matcher.
std::size_t oracle_best_assignment(const std::vector<std::vector<double>>& iou_matrix,
                                   std::size_t n_props, double t) {
  const std::size_t n_gts = iou_matrix.size();
  std::vector<int> assignment(n_gts, -1);
  std::vector<char> used(n_props, 0);
  std::function<std::size_t(std::size_t)> best = [&](std::size_t gi) -> std::size_t {
    if (gi == n_gts) return 0;
    std::size_t top = best(gi + 1);  // leave this gt unmatched
    for (std::size_t j = 0; j < n_props; ++j) {
      if (used[j] || iou_matrix[gi][j] < t) continue;
      used[j] = 1;
      top = std::max(top, 1 + best(gi + 1));
      used[j] = 0;
    }
    return top;
  };
  return best(0);
}

MatchTable table_from_matrix(std::vector<std::vector<double>> iou_matrix,
                             std::size_t n_props) {
  MatchTable t;
  t.n_proposals = n_props;
  t.iou = std::move(iou_matrix);
  t.gt_areas.assign(t.iou.size(), 100);
  return t;
}

ProposalSet single_proposal_with_iou(double target_iou, BinaryMask& gt_out) {
  // 1x20 strip, gt covers [0,10), proposal covers [0,m): IoU = m/10 exactly.
  gt_out = rect_mask(1, 20, 0, 0, 1, 10);
  const int m = static_cast<int>(std::lround(target_iou * 10.0));
  ProposalSet ps;
  ps.frame_h = 1;
  ps.frame_w = 20;
  Proposal p;
  p.x = 0;
  p.y = 0;
  p.mask_h = 1;
  p.mask_w = 20;
  p.mask.assign(20, 0.0);
  for (int i = 0; i < m; ++i) p.mask[static_cast<std::size_t>(i)] = 1.0;
  p.score = 0.9;
  ps.items.push_back(p);
  return ps;
}

}  // namespace

TEST_CASE("iou basics") {
  SECTION("identical nonempty masks") {
    auto a = mask_from({1, 0, 1, 1}, 2, 2);
    REQUIRE(iou(a, a) == 1.0);
  }
  SECTION("disjoint masks") {
    auto a = mask_from({1, 0, 0, 0}, 2, 2);
    auto b = mask_from({0, 0, 0, 1}, 2, 2);
    REQUIRE(iou(a, b) == 0.0);
  }
  SECTION("2x2 blocks offset by one on a 3x3 grid overlap 1/7") {
    auto a = rect_mask(3, 3, 0, 0, 2, 2);
    auto b = rect_mask(3, 3, 1, 1, 2, 2);
    REQUIRE(iou(a, b) == Approx(1.0 / 7.0));
  }
  SECTION("empty union is 0 by convention") {
    auto a = mask_from({0, 0, 0, 0}, 2, 2);
    REQUIRE(iou(a, a) == 0.0);
  }
  SECTION("symmetry on random masks") {
    std::mt19937_64 rng(79);
    for (int t = 0; t < 50; ++t) {
      BinaryMask a, b;
      a.h = b.h = 4;
      a.w = b.w = 4;
      for (int i = 0; i < 16; ++i) {
        a.v.push_back(rng() & 1);
        b.v.push_back(rng() & 1);
      }
      REQUIRE(iou(a, b) == iou(b, a));
    }
  }
  SECTION("dimension mismatch is an error") {
    REQUIRE_THROWS_AS(iou(rect_mask(2, 2, 0, 0, 1, 1), rect_mask(2, 3, 0, 0, 1, 1)),
                      MetricError);
  }
}

TEST_CASE("binarize thresholding") {
  SECTION("all 0.5 against 0.2 is all ones") {
    auto m = binarize(std::vector<double>(6, 0.5), 2, 3, 0.2);
    for (auto b : m.v) REQUIRE(b == 1);
  }
  SECTION("threshold boundary is inclusive") {
    auto m = binarize({0.1, 0.2, 0.3}, 1, 3, 0.2);
    REQUIRE(m.v == std::vector<std::uint8_t>{0, 1, 1});
  }
  SECTION("foreground count is non-increasing in the threshold") {
    std::mt19937_64 rng(83);
    std::vector<double> vals(64);
    for (auto& v : vals) v = static_cast<double>(rng() % 1000) / 1000.0;
    std::size_t prev = 65;
    for (double thr = 0.05; thr < 1.0; thr += 0.05) {
      const auto area = binarize(vals, 8, 8, thr).area();
      REQUIRE(area <= prev);
      prev = area;
    }
  }
}

TEST_CASE("match_and_recall hand cases") {
  SECTION("one gt, one proposal at IoU 0.7, threshold 0.5") {
    BinaryMask gt;
    auto ps = single_proposal_with_iou(0.7, gt);
    auto r = match_and_recall(ps, {gt}, 1, 0.5);
    REQUIRE(r.has_value());
    REQUIRE(*r == 1.0);
  }
  SECTION("two gts sharing one good proposal: one-to-one gives 0.5") {
    MatchTable t = table_from_matrix({{0.9}, {0.9}}, 1);
    auto r = match_and_recall(t, 5, 0.5);
    REQUIRE(*r == Approx(0.5));
  }
  SECTION("empty ground truth reports a skip") {
    MatchTable t = table_from_matrix({}, 3);
    REQUIRE_FALSE(match_and_recall(t, 3, 0.5).has_value());
  }
  SECTION("a conflicted assignment is solved optimally") {
    // gt0 matches both proposals, gt1 only proposal 0: optimal pairs gt0-p1.
    MatchTable t = table_from_matrix({{0.8, 0.6}, {0.55, 0.0}}, 2);
    REQUIRE(*match_and_recall(t, 2, 0.5) == 1.0);
  }
}

TEST_CASE("matching equals exhaustive optimal assignment on random instances",
          "[oracle]") {
  std::mt19937_64 rng(89);
  for (int trial = 0; trial < 1200; ++trial) {
    const std::size_t n_gts = 1 + rng() % 5;
    const std::size_t n_props = 1 + rng() % 5;
    std::vector<std::vector<double>> m(n_gts, std::vector<double>(n_props));
    for (auto& row : m)
      for (auto& v : row) v = static_cast<double>(rng() % 100) / 100.0;
    const double t = 0.5 + 0.05 * static_cast<double>(rng() % 10);
    MatchTable table = table_from_matrix(m, n_props);
    const double got = *match_and_recall(table, n_props, t);
    const double want = static_cast<double>(oracle_best_assignment(m, n_props, t)) /
                        static_cast<double>(n_gts);
    REQUIRE(got == Approx(want).margin(1e-12));
  }
}

TEST_CASE("average_recall over the threshold grid") {
  SECTION("IoU 0.70 passes exactly half the thresholds") {
    BinaryMask gt;
    auto ps = single_proposal_with_iou(0.7, gt);
    auto ar = average_recall(ps, {gt}, 1);
    REQUIRE(*ar == Approx(0.5).margin(1e-12));
  }
  SECTION("perfect proposal has AR 1") {
    BinaryMask gt;
    auto ps = single_proposal_with_iou(1.0, gt);
    REQUIRE(*average_recall(ps, {gt}, 1) == 1.0);
  }
  SECTION("IoU below 0.5 has AR 0") {
    BinaryMask gt;
    auto ps = single_proposal_with_iou(0.4, gt);
    REQUIRE(*average_recall(ps, {gt}, 1) == 0.0);
  }
}

TEST_CASE("AR monotonicity properties") {
  std::mt19937_64 rng(97);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n_gts = 1 + rng() % 4;
    const std::size_t n_props = 1 + rng() % 8;
    std::vector<std::vector<double>> m(n_gts, std::vector<double>(n_props));
    for (auto& row : m)
      for (auto& v : row) v = static_cast<double>(rng() % 100) / 100.0;
    MatchTable table = table_from_matrix(m, n_props);

    double prev_ar = 0.0;
    for (std::size_t n = 1; n <= n_props; ++n) {
      const double ar = *average_recall(table, n);
      REQUIRE(ar >= prev_ar - 1e-12);
      prev_ar = ar;
    }
    double prev_rec = 1.0;
    for (double t : ar_thresholds()) {
      const double rec = *match_and_recall(table, n_props, t);
      REQUIRE(rec <= prev_rec + 1e-12);
      prev_rec = rec;
    }
  }
}

TEST_CASE("AUC aggregation and scale buckets") {
  SECTION("equal AR at all counts collapses to that value") {
    MatchTable t = table_from_matrix({{0.7}}, 1);
    ArAccumulator acc;
    acc.add_image(t);
    ARReport r = acc.report();
    REQUIRE(*r.ar10 == Approx(0.5));
    REQUIRE(*r.ar100 == Approx(0.5));
    REQUIRE(*r.ar1k == Approx(0.5));
    REQUIRE(*r.auc == Approx(0.5));
  }
  SECTION("hand-computed three-count mean") {
    // two gts; proposal 1 (score order) hits gt0 at 0.9; a later proposal
    // hits gt1 at 0.6 but only enters at n=100.
    std::vector<std::vector<double>> m(2, std::vector<double>(12, 0.0));
    m[0][0] = 0.9;
    m[1][11] = 0.6;
    ArAccumulator acc;
    acc.add_image(table_from_matrix(m, 12));
    ARReport r = acc.report();
    // n=10: only gt0 reachable; recall 1/2 at the 9 thresholds <= 0.9
    const double ar10 = 9.0 * 0.5 / 10.0;
    // n=100: gt0 passes 9 thresholds, gt1 passes 3 (<= 0.6)
    const double ar100 = (9.0 + 3.0) * 0.5 / 10.0;
    REQUIRE(*r.ar10 == Approx(ar10));
    REQUIRE(*r.ar100 == Approx(ar100));
    REQUIRE(*r.ar1k == Approx(ar100));
    REQUIRE(*r.auc == Approx((ar10 + ar100 + ar100) / 3.0));
  }
  SECTION("missing scale buckets are skips, not zeros") {
    MatchTable t = table_from_matrix({{0.8}}, 1);
    t.gt_areas = {500};  // medium for the default thresholds scaled at 64px
    ArAccumulator acc(scale_thresholds_for_patch(64));
    acc.add_image(t);
    ARReport r = acc.report();
    REQUIRE_FALSE(r.auc_small.has_value());
    REQUIRE(r.auc_medium.has_value());
    REQUIRE_FALSE(r.auc_large.has_value());
    auto j = ar_report_to_json(r);
    REQUIRE(j.at("AUC_S").is_null());
    REQUIRE_FALSE(j.at("AUC_M").is_null());
  }
  SECTION("desk-scale area thresholds rescale with the patch side") {
    auto th = scale_thresholds_for_patch(64);
    REQUIRE(th.small_max == Approx(32.0 * 32.0 * (64.0 / 224.0) * (64.0 / 224.0)));
    REQUIRE(th.large_min == Approx(96.0 * 96.0 * (64.0 / 224.0) * (64.0 / 224.0)));
  }
}

TEST_CASE("iou_in_frame respects window placement") {
  BinaryMask gt = rect_mask(10, 10, 2, 2, 4, 4);  // 16 px at (2,2)
  BinaryMask prop = rect_mask(4, 4, 0, 0, 4, 4);  // full 4x4 window
  REQUIRE(iou_in_frame(prop, 2, 2, gt) == 1.0);
  REQUIRE(iou_in_frame(prop, 0, 0, gt) == Approx(4.0 / 28.0));
  REQUIRE_THROWS_AS(iou_in_frame(prop, 8, 8, gt), MetricError);
}

TEST_CASE("proposal sets must arrive sorted") {
  ProposalSet ps;
  ps.frame_h = 4;
  ps.frame_w = 4;
  Proposal a;
  a.score = 0.2;
  a.mask_h = a.mask_w = 4;
  a.mask.assign(16, 1.0);
  Proposal b = a;
  b.score = 0.9;
  ps.items = {a, b};
  REQUIRE_THROWS_AS(ps.check_sorted(), MetricError);
}

TEST_CASE("tight_box helper") {
  auto m = rect_mask(6, 7, 2, 3, 2, 3);
  auto b = tight_box(m);
  REQUIRE(b.has_value());
  REQUIRE(b->x0 == 3);
  REQUIRE(b->y0 == 2);
  REQUIRE(b->x1 == 5);
  REQUIRE(b->y1 == 3);
  BinaryMask empty;
  empty.h = empty.w = 3;
  empty.v.assign(9, 0);
  REQUIRE_FALSE(tight_box(empty).has_value());
}
