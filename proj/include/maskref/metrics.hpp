// SPDX-License-Identifier: Apache-2.0
//
// Proposal-quality evaluation: IoU, binarization, one-to-one mask matching,
// and average recall / AUC summaries in the COCO style.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace maskref {

struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BinaryMask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;  // 0 or 1

  std::size_t area() const {
    std::size_t a = 0;
    for (auto b : v) a += b;
    return a;
  }
};

/// Pixels >= thr become foreground.
inline BinaryMask binarize(const std::vector<double>& values, int h, int w, double thr = 0.2) {
  if (values.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
    throw MetricError("binarize: value count does not match dimensions");
  BinaryMask m;
  m.h = h;
  m.w = w;
  m.v.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) m.v[i] = values[i] >= thr ? 1 : 0;
  return m;
}

/// |a n b| / |a u b|; two empty masks have IoU 0 by convention.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.h != b.h || a.w != b.w) throw MetricError("iou: mask dimensions differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    inter += a.v[i] & b.v[i];
    uni += a.v[i] | b.v[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// A scored mask predicted for the window whose top-left corner is (x, y)
/// in the evaluated frame. The mask is continuous until binarized.
struct Proposal {
  int x = 0, y = 0;
  double score = 0.0;
  int mask_h = 0, mask_w = 0;
  std::vector<double> mask;
};

struct ProposalSet {
  int frame_h = 0, frame_w = 0;
  std::vector<Proposal> items;  // descending score

  void check_sorted() const {
    for (std::size_t i = 1; i < items.size(); ++i)
      if (items[i].score > items[i - 1].score)
        throw MetricError("proposal set is not sorted by descending score");
  }
};

/// IoU between a window-local binary mask placed at (x, y) and a full-frame
/// ground-truth mask; proposal pixels outside the window count as background.
inline double iou_in_frame(const BinaryMask& prop, int x, int y, const BinaryMask& gt) {
  if (x < 0 || y < 0 || x + prop.w > gt.w || y + prop.h > gt.h)
    throw MetricError("iou_in_frame: window exceeds the frame");
  std::size_t inter = 0, prop_area = 0;
  for (int yy = 0; yy < prop.h; ++yy)
    for (int xx = 0; xx < prop.w; ++xx) {
      const std::uint8_t p = prop.v[static_cast<std::size_t>(yy) * prop.w + xx];
      if (!p) continue;
      ++prop_area;
      inter += gt.v[static_cast<std::size_t>(y + yy) * gt.w + (x + xx)];
    }
  const std::size_t uni = prop_area + gt.area() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// The IoU thresholds 0.50, 0.55, ..., 0.95 as exact vulgar fractions so a
/// mask pair with IoU exactly 0.70 passes the 0.70 threshold.
inline std::vector<double> ar_thresholds() {
  std::vector<double> ts;
  for (int k = 10; k <= 19; ++k) ts.push_back(static_cast<double>(k) / 20.0);
  return ts;
}

/// IoU of every ground truth against every proposal (proposals in score
/// order), computed once and reused across counts and thresholds.
struct MatchTable {
  std::size_t n_proposals = 0;
  std::vector<std::size_t> gt_areas;
  std::vector<std::vector<double>> iou;  // [gt][proposal]
};

inline MatchTable build_match_table(const ProposalSet& props,
                                    const std::vector<BinaryMask>& gts,
                                    double binarize_thr = 0.2) {
  props.check_sorted();
  MatchTable t;
  t.n_proposals = props.items.size();
  std::vector<BinaryMask> bin;
  bin.reserve(props.items.size());
  for (const auto& p : props.items) bin.push_back(binarize(p.mask, p.mask_h, p.mask_w, binarize_thr));
  for (const auto& gt : gts) {
    t.gt_areas.push_back(gt.area());
    std::vector<double> row;
    row.reserve(props.items.size());
    for (std::size_t j = 0; j < props.items.size(); ++j)
      row.push_back(iou_in_frame(bin[j], props.items[j].x, props.items[j].y, gt));
    t.iou.push_back(std::move(row));
  }
  return t;
}

namespace detail {

/// Maximum bipartite matching (augmenting paths) between ground truths and
/// the first n proposals, with an edge where IoU >= t. Returns the number of
/// ground truths covered under the best one-to-one assignment.
inline std::size_t max_covered(const MatchTable& table, const std::vector<std::size_t>& gt_rows,
                               std::size_t n, double t) {
  const std::size_t np = std::min(n, table.n_proposals);
  std::vector<int> owner(np, -1);  // proposal -> gt row position
  std::size_t covered = 0;
  std::vector<char> visited(np);
  std::function<bool(std::size_t)> augment = [&](std::size_t gi) -> bool {
    const auto& row = table.iou[gt_rows[gi]];
    for (std::size_t j = 0; j < np; ++j) {
      if (visited[j] || row[j] < t) continue;
      visited[j] = 1;
      if (owner[j] < 0 || augment(static_cast<std::size_t>(owner[j]))) {
        owner[j] = static_cast<int>(gi);
        return true;
      }
    }
    return false;
  };
  for (std::size_t gi = 0; gi < gt_rows.size(); ++gi) {
    std::fill(visited.begin(), visited.end(), 0);
    if (augment(gi)) ++covered;
  }
  return covered;
}

}  // namespace detail

/// Recall of the ground truths using the top-n proposals at IoU threshold t,
/// under one-to-one matching. Empty ground-truth lists are skips, not zeros.
inline std::optional<double> match_and_recall(const MatchTable& table, std::size_t n, double t) {
  if (n < 1) throw MetricError("match_and_recall: n must be >= 1");
  if (table.iou.empty()) return std::nullopt;
  std::vector<std::size_t> all(table.iou.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return static_cast<double>(detail::max_covered(table, all, n, t)) /
         static_cast<double>(table.iou.size());
}

inline std::optional<double> match_and_recall(const ProposalSet& props,
                                              const std::vector<BinaryMask>& gts,
                                              std::size_t n, double t,
                                              double binarize_thr = 0.2) {
  return match_and_recall(build_match_table(props, gts, binarize_thr), n, t);
}

/// Mean recall over the ten IoU thresholds at a fixed proposal budget.
inline std::optional<double> average_recall(const MatchTable& table, std::size_t n) {
  if (table.iou.empty()) return std::nullopt;
  double acc = 0.0;
  const auto ts = ar_thresholds();
  for (double t : ts) acc += *match_and_recall(table, n, t);
  return acc / static_cast<double>(ts.size());
}

inline std::optional<double> average_recall(const ProposalSet& props,
                                            const std::vector<BinaryMask>& gts, std::size_t n,
                                            double binarize_thr = 0.2) {
  return average_recall(build_match_table(props, gts, binarize_thr), n);
}

/// Object-area buckets. The COCO cutoffs 32^2 / 96^2 are defined for 224px
/// inputs; at other patch sizes they rescale proportionally to (W/224)^2.
struct ScaleThresholds {
  double small_max = 32.0 * 32.0;   // a < small_max       -> small
  double large_min = 96.0 * 96.0;   // a > large_min       -> large
};

inline ScaleThresholds scale_thresholds_for_patch(int patch_side) {
  const double f = static_cast<double>(patch_side) / 224.0;
  return {32.0 * 32.0 * f * f, 96.0 * 96.0 * f * f};
}

struct ARReport {
  std::optional<double> ar10, ar100, ar1k;
  std::optional<double> auc, auc_small, auc_medium, auc_large;
  std::vector<std::size_t> counts{10, 100, 1000};
  // recall_vs_iou[c][k]: recall at counts[c], threshold ar_thresholds()[k]
  std::vector<std::vector<double>> recall_vs_iou;
  ScaleThresholds scales;
  std::size_t n_images = 0, n_gts = 0;
};

inline nlohmann::json ar_report_to_json(const ARReport& r) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json j;
  j["AR10"] = opt(r.ar10);
  j["AR100"] = opt(r.ar100);
  j["AR1K"] = opt(r.ar1k);
  j["AUC"] = opt(r.auc);
  j["AUC_S"] = opt(r.auc_small);
  j["AUC_M"] = opt(r.auc_medium);
  j["AUC_L"] = opt(r.auc_large);
  j["counts"] = r.counts;
  j["iou_thresholds"] = ar_thresholds();
  j["recall_vs_iou"] = r.recall_vs_iou;
  j["scale_small_max_area"] = r.scales.small_max;
  j["scale_large_min_area"] = r.scales.large_min;
  j["n_images"] = r.n_images;
  j["n_gts"] = r.n_gts;
  return j;
}

/// Dataset-level AR: recall counts pooled over images before averaging over
/// thresholds, then over proposal budgets for the AUC.
class ArAccumulator {
 public:
  explicit ArAccumulator(ScaleThresholds scales = {}) : scales_(scales) {}

  void add_image(MatchTable table) {
    tables_.push_back(std::move(table));
  }

  ARReport report(std::vector<std::size_t> counts = {10, 100, 1000}) const {
    ARReport r;
    r.counts = counts;
    r.scales = scales_;
    r.n_images = tables_.size();
    for (const auto& t : tables_) r.n_gts += t.iou.size();

    enum Bucket { all = 0, small, medium, large, n_buckets };
    auto bucket_rows = [&](const MatchTable& t, Bucket b) {
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < t.iou.size(); ++i) {
        const double a = static_cast<double>(t.gt_areas[i]);
        const bool keep = b == all || (b == small && a < scales_.small_max) ||
                          (b == medium && a >= scales_.small_max && a <= scales_.large_min) ||
                          (b == large && a > scales_.large_min);
        if (keep) rows.push_back(i);
      }
      return rows;
    };

    const auto ts = ar_thresholds();
    std::vector<std::optional<double>> ar_by_count_bucket(counts.size() * n_buckets);
    for (std::size_t ci = 0; ci < counts.size(); ++ci) {
      for (int b = 0; b < n_buckets; ++b) {
        std::size_t total = 0;
        std::vector<std::size_t> covered(ts.size(), 0);
        for (const auto& t : tables_) {
          const auto rows = bucket_rows(t, static_cast<Bucket>(b));
          total += rows.size();
          for (std::size_t k = 0; k < ts.size(); ++k)
            covered[k] += detail::max_covered(t, rows, counts[ci], ts[k]);
        }
        if (total == 0) continue;  // reported as a skip, not 0
        double acc = 0.0;
        std::vector<double> recalls;
        for (std::size_t k = 0; k < ts.size(); ++k) {
          const double rec = static_cast<double>(covered[k]) / static_cast<double>(total);
          recalls.push_back(rec);
          acc += rec;
        }
        ar_by_count_bucket[ci * n_buckets + static_cast<std::size_t>(b)] =
            acc / static_cast<double>(ts.size());
        if (b == all) r.recall_vs_iou.push_back(std::move(recalls));
      }
    }

    auto ar_at = [&](std::size_t count, Bucket b) -> std::optional<double> {
      for (std::size_t ci = 0; ci < counts.size(); ++ci)
        if (counts[ci] == count) return ar_by_count_bucket[ci * n_buckets + static_cast<std::size_t>(b)];
      return std::nullopt;
    };
    r.ar10 = ar_at(10, all);
    r.ar100 = ar_at(100, all);
    r.ar1k = ar_at(1000, all);
    auto mean_over_counts = [&](Bucket b) -> std::optional<double> {
      double acc = 0.0;
      std::size_t n = 0;
      for (std::size_t ci = 0; ci < counts.size(); ++ci)
        if (auto v = ar_by_count_bucket[ci * n_buckets + static_cast<std::size_t>(b)]) {
          acc += *v;
          ++n;
        }
      if (n == 0) return std::nullopt;
      return acc / static_cast<double>(n);
    };
    r.auc = mean_over_counts(all);
    r.auc_small = mean_over_counts(small);
    r.auc_medium = mean_over_counts(medium);
    r.auc_large = mean_over_counts(large);
    return r;
  }

 private:
  ScaleThresholds scales_;
  std::vector<MatchTable> tables_;
};

/// Tight bounding box around a mask's foreground (helper for box-style
/// summaries); nullopt for an empty mask.
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive corners
};

inline std::optional<Box> tight_box(const BinaryMask& m) {
  Box b{m.w, m.h, -1, -1};
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.v[static_cast<std::size_t>(y) * m.w + x]) {
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x);
        b.y1 = std::max(b.y1, y);
      }
  if (b.x1 < 0) return std::nullopt;
  return b;
}

}  // namespace maskref
