// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic shape scenes and the (patch, label, mask)
// training triplets cropped from them. Everything is a pure function of
// (config, seed), so datasets are reproducible byte for byte.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskref/io.hpp"
#include "maskref/metrics.hpp"
#include "maskref/tensor.hpp"

namespace maskref {

struct SynthConfig {
  int canvas = 128;
  int patch = 64;  // W
  int objects_min = 1, objects_max = 3;
  double canonical_radius = 12.0;  // radius of a correctly scaled object, in pixels
  double centering_tol = 4.0;      // W/16 for the default patch
  double scale_band_lo = 0.8, scale_band_hi = 1.2;
  int context_pad = 8;        // visible context around a canonically sized object
  double contrast_min = 0.25;  // object-vs-background mean intensity gap
  double positive_fraction = 0.5;
  bool visible_masks = false;  // default: amodal (full shape) ground truth
  double in_band_prob = 0.75;  // chance an object is drawn at canonical scale

  void validate() const {
    if (canvas < patch) throw ShapeError("synth config: canvas must be at least the patch side");
    if (patch < 8) throw ShapeError("synth config: patch side too small");
    if (objects_min < 1 || objects_max < objects_min)
      throw ShapeError("synth config: bad object count range");
    if (positive_fraction < 0.0 || positive_fraction > 1.0)
      throw ShapeError("synth config: positive_fraction must be in [0,1]");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"canvas", c.canvas},
       {"patch", c.patch},
       {"objects_min", c.objects_min},
       {"objects_max", c.objects_max},
       {"canonical_radius", c.canonical_radius},
       {"centering_tol", c.centering_tol},
       {"scale_band", {c.scale_band_lo, c.scale_band_hi}},
       {"context_pad", c.context_pad},
       {"contrast_min", c.contrast_min},
       {"positive_fraction", c.positive_fraction},
       {"visible_masks", c.visible_masks},
       {"in_band_prob", c.in_band_prob}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.canvas = j.value("canvas", c.canvas);
  c.patch = j.value("patch", c.patch);
  c.objects_min = j.value("objects_min", c.objects_min);
  c.objects_max = j.value("objects_max", c.objects_max);
  c.canonical_radius = j.value("canonical_radius", c.canonical_radius);
  c.centering_tol = j.value("centering_tol", c.centering_tol);
  if (j.contains("scale_band")) {
    c.scale_band_lo = j.at("scale_band").at(0).get<double>();
    c.scale_band_hi = j.at("scale_band").at(1).get<double>();
  }
  c.context_pad = j.value("context_pad", c.context_pad);
  c.contrast_min = j.value("contrast_min", c.contrast_min);
  c.positive_fraction = j.value("positive_fraction", c.positive_fraction);
  c.visible_masks = j.value("visible_masks", c.visible_masks);
  c.in_band_prob = j.value("in_band_prob", c.in_band_prob);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derive an independent seed stream member.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ splitmix64(stream)) + index);
}

enum class ShapeKind { ellipse, rectangle, triangle, blob };

inline const char* shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::ellipse: return "ellipse";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::blob: return "blob";
  }
  return "?";
}

struct SceneObject {
  ShapeKind kind = ShapeKind::ellipse;
  double cx = 0, cy = 0;      // integer-valued centers keep zero-jitter crops exact
  double scale = 0;           // characteristic radius in pixels
  double rotation = 0;
  double aspect = 1.0;        // minor/major ratio for ellipse and rectangle
  double fill = 0.8;
  std::vector<double> blob_radii;  // per-vertex radial factors for blobs

  bool contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double c = std::cos(rotation), s = std::sin(rotation);
    const double rx = c * dx + s * dy, ry = -s * dx + c * dy;
    switch (kind) {
      case ShapeKind::ellipse: {
        const double a = scale, b = scale * aspect;
        return (rx * rx) / (a * a) + (ry * ry) / (b * b) <= 1.0;
      }
      case ShapeKind::rectangle:
        return std::abs(rx) <= scale && std::abs(ry) <= scale * aspect;
      case ShapeKind::triangle: {
        double vx[3], vy[3];
        for (int k = 0; k < 3; ++k) {
          const double ang = 2.0 * std::numbers::pi * k / 3.0;
          vx[k] = scale * std::cos(ang);
          vy[k] = scale * std::sin(ang);
        }
        bool neg = false, pos = false;
        for (int k = 0; k < 3; ++k) {
          const int j = (k + 1) % 3;
          const double cr = (vx[j] - vx[k]) * (ry - vy[k]) - (vy[j] - vy[k]) * (rx - vx[k]);
          neg |= cr < 0;
          pos |= cr > 0;
        }
        return !(neg && pos);
      }
      case ShapeKind::blob: {
        // even-odd crossing test against the star polygon
        const int n = static_cast<int>(blob_radii.size());
        bool inside = false;
        for (int k = 0; k < n; ++k) {
          const int j = (k + 1) % n;
          const double ak = 2.0 * std::numbers::pi * k / n;
          const double aj = 2.0 * std::numbers::pi * j / n;
          const double x0 = scale * blob_radii[static_cast<std::size_t>(k)] * std::cos(ak);
          const double y0 = scale * blob_radii[static_cast<std::size_t>(k)] * std::sin(ak);
          const double x1 = scale * blob_radii[static_cast<std::size_t>(j)] * std::cos(aj);
          const double y1 = scale * blob_radii[static_cast<std::size_t>(j)] * std::sin(aj);
          if ((y0 > ry) != (y1 > ry)) {
            const double xi = x0 + (ry - y0) / (y1 - y0) * (x1 - x0);
            if (rx < xi) inside = !inside;
          }
        }
        return inside;
      }
    }
    return false;
  }
};

struct Scene {
  int canvas = 0;
  std::uint64_t seed = 0;
  std::vector<SceneObject> objects;
  std::vector<double> image;       // canvas^2 values in [0,1]
  std::vector<BinaryMask> masks;   // one per object
  double background_base = 0.0;
};

inline bool scale_in_band(const SynthConfig& cfg, double scale, double widen = 1.0) {
  return scale >= cfg.scale_band_lo / widen * cfg.canonical_radius &&
         scale <= cfg.scale_band_hi * widen * cfg.canonical_radius;
}

/// Deterministic scene synthesis. Object centers stay far enough from the
/// canvas border that any jittered patch crop around them fits.
inline Scene generate_scene(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto u = [&rng]() { return detail::uniform01(rng); };

  Scene scene;
  scene.canvas = cfg.canvas;
  scene.seed = seed;

  const int n_obj = cfg.objects_min +
                    static_cast<int>(u() * (cfg.objects_max - cfg.objects_min + 1));
  const double margin = cfg.patch / 2.0 + cfg.centering_tol + 1.0;
  scene.background_base = 0.15 + 0.25 * u();
  const double gx = (2.0 * u() - 1.0) * 0.10, gy = (2.0 * u() - 1.0) * 0.10;

  for (int i = 0; i < n_obj; ++i) {
    SceneObject o;
    o.kind = static_cast<ShapeKind>(static_cast<int>(u() * 4.0) % 4);
    o.cx = std::floor(margin + u() * (cfg.canvas - 2.0 * margin));
    o.cy = std::floor(margin + u() * (cfg.canvas - 2.0 * margin));
    if (u() < cfg.in_band_prob) {
      o.scale = cfg.canonical_radius * (cfg.scale_band_lo +
                                        u() * (cfg.scale_band_hi - cfg.scale_band_lo));
    } else {
      // clear of twice the canonical band, so such objects mark negatives
      o.scale = u() < 0.5 ? cfg.canonical_radius * (0.25 + 0.1 * u())
                          : cfg.canonical_radius * (2.6 + 0.4 * u());
    }
    o.rotation = u() * 2.0 * std::numbers::pi;
    o.aspect = 0.6 + 0.4 * u();
    o.fill = std::min(0.98, scene.background_base + cfg.contrast_min + 0.1 + 0.35 * u());
    if (o.kind == ShapeKind::blob) {
      o.blob_radii.resize(8);
      for (auto& r : o.blob_radii) r = 0.75 + 0.5 * u();
    }
    scene.objects.push_back(std::move(o));
  }

  scene.image.assign(static_cast<std::size_t>(cfg.canvas) * cfg.canvas, 0.0);
  for (auto& m : scene.objects) (void)m;
  scene.masks.assign(scene.objects.size(), BinaryMask{});
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    scene.masks[i].h = cfg.canvas;
    scene.masks[i].w = cfg.canvas;
    scene.masks[i].v.assign(scene.image.size(), 0);
  }

  for (int y = 0; y < cfg.canvas; ++y)
    for (int x = 0; x < cfg.canvas; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      double v = scene.background_base + gx * (px / cfg.canvas - 0.5) +
                 gy * (py / cfg.canvas - 0.5) + (u() - 0.5) * 0.06;
      int top = -1;
      for (std::size_t i = 0; i < scene.objects.size(); ++i)
        if (scene.objects[i].contains(px, py)) {
          scene.masks[i].v[static_cast<std::size_t>(y) * cfg.canvas + x] = 1;
          top = static_cast<int>(i);
        }
      if (top >= 0) v = scene.objects[static_cast<std::size_t>(top)].fill + (u() - 0.5) * 0.08;
      scene.image[static_cast<std::size_t>(y) * cfg.canvas + x] = std::clamp(v, 0.0, 1.0);
    }

  if (cfg.visible_masks) {
    // keep only the pixels where the object is the topmost one
    for (std::size_t i = 0; i + 1 < scene.objects.size(); ++i)
      for (std::size_t j = i + 1; j < scene.objects.size(); ++j)
        for (std::size_t p = 0; p < scene.image.size(); ++p)
          if (scene.masks[j].v[p]) scene.masks[i].v[p] = 0;
  }
  return scene;
}

inline std::vector<int> positive_candidates(const Scene& scene, const SynthConfig& cfg) {
  std::vector<int> idx;
  for (std::size_t i = 0; i < scene.objects.size(); ++i)
    if (scale_in_band(cfg, scene.objects[i].scale)) idx.push_back(static_cast<int>(i));
  return idx;
}

/// One training triplet.
struct Sample {
  Tensor patch;     // [1, W, W], values in [0,1]
  int label = -1;   // +1 or -1
  BinaryMask mask;  // W x W; only meaningful for positives
  // provenance
  std::uint64_t scene_seed = 0;
  int object_index = -1;
  int crop_x = 0, crop_y = 0;
};

namespace detail {

inline BinaryMask crop_mask(const BinaryMask& m, int x, int y, int side) {
  BinaryMask out;
  out.h = side;
  out.w = side;
  out.v.resize(static_cast<std::size_t>(side) * side);
  for (int yy = 0; yy < side; ++yy)
    for (int xx = 0; xx < side; ++xx)
      out.v[static_cast<std::size_t>(yy) * side + xx] =
          m.v[static_cast<std::size_t>(y + yy) * m.w + (x + xx)];
  return out;
}

inline Tensor crop_patch(const Scene& scene, int x, int y, int side) {
  Tensor t = Tensor::zeros({1, side, side});
  double* d = t.data_mut();
  for (int yy = 0; yy < side; ++yy)
    std::copy_n(scene.image.data() + static_cast<std::size_t>(y + yy) * scene.canvas + x,
                side, d + static_cast<std::size_t>(yy) * side);
  return t;
}

}  // namespace detail

/// Crop a positive (centered, in-band object, jitter <= tolerance) or a
/// negative (crop centered nowhere near an in-band object, or on an object
/// of badly wrong scale). Throws if a positive is requested from a scene
/// with no in-band object.
inline Sample sample_triplet(const Scene& scene, const SynthConfig& cfg, bool positive,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto u = [&rng]() { return detail::uniform01(rng); };
  const int w = cfg.patch;
  const int tol = static_cast<int>(cfg.centering_tol);

  Sample s;
  s.scene_seed = scene.seed;

  if (positive) {
    const auto cands = positive_candidates(scene, cfg);
    if (cands.empty())
      throw ShapeError("sample_triplet: scene has no object at canonical scale");
    const int oi = cands[static_cast<std::size_t>(u() * cands.size()) % cands.size()];
    const auto& o = scene.objects[static_cast<std::size_t>(oi)];
    const int jx = static_cast<int>(std::lround((2.0 * u() - 1.0) * tol));
    const int jy = static_cast<int>(std::lround((2.0 * u() - 1.0) * tol));
    const int x = static_cast<int>(o.cx) + jx - w / 2;
    const int y = static_cast<int>(o.cy) + jy - w / 2;
    s.patch = detail::crop_patch(scene, x, y, w);
    s.mask = detail::crop_mask(scene.masks[static_cast<std::size_t>(oi)], x, y, w);
    s.label = +1;
    s.object_index = oi;
    s.crop_x = x;
    s.crop_y = y;
    const auto area = s.mask.area();
    if (area < 1 || area >= static_cast<std::size_t>(w) * w)
      throw ShapeError("sample_triplet: degenerate positive mask");
    return s;
  }

  // Negative: no in-band object center within twice the centering tolerance
  // of the patch center.
  for (int attempt = 0; attempt < 256; ++attempt) {
    const int cx = w / 2 + static_cast<int>(u() * (scene.canvas - w));
    const int cy = w / 2 + static_cast<int>(u() * (scene.canvas - w));
    bool leaky = false;
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const auto& o = scene.objects[i];
      const double d = std::hypot(o.cx - cx, o.cy - cy);
      if (d <= 2.0 * cfg.centering_tol && scale_in_band(cfg, o.scale, 2.0)) {
        leaky = true;
        break;
      }
    }
    if (leaky) continue;
    s.patch = detail::crop_patch(scene, cx - w / 2, cy - w / 2, w);
    s.label = -1;
    s.crop_x = cx - w / 2;
    s.crop_y = cy - w / 2;
    return s;
  }
  throw ShapeError("sample_triplet: could not place a negative crop");
}

struct DatasetPaths {
  std::filesystem::path root;
  std::filesystem::path manifest() const { return root / "manifest.jsonl"; }
  std::filesystem::path scenes_manifest() const { return root / "scenes.jsonl"; }
};

/// Write n_train + n_val triplets plus n_scenes multi-object evaluation
/// scenes under outdir. Train, val, and scene seed streams are disjoint.
/// Returns the manifest path.
inline std::filesystem::path make_dataset(const SynthConfig& cfg, std::uint64_t seed,
                                          int n_train, int n_val, int n_scenes,
                                          const std::filesystem::path& outdir) {
  cfg.validate();
  if (n_train < 1 || n_val < 0 || n_scenes < 0)
    throw ShapeError("make_dataset: need at least one training sample");
  namespace fs = std::filesystem;
  fs::create_directories(outdir / "train");
  fs::create_directories(outdir / "val");
  if (n_scenes > 0) fs::create_directories(outdir / "scenes");

  std::ofstream manifest(outdir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw IoError("cannot write dataset manifest");

  auto emit_split = [&](const std::string& split, int count, std::uint64_t stream) {
    int positives_so_far = 0;
    for (int i = 0; i < count; ++i) {
      const bool want_positive =
          static_cast<int>(std::floor((i + 1) * cfg.positive_fraction)) > positives_so_far;
      positives_so_far += want_positive ? 1 : 0;
      const std::uint64_t sample_seed = mix_seed(seed, stream, static_cast<std::uint64_t>(i));
      Scene scene;
      std::uint64_t scene_seed = 0;
      for (std::uint64_t attempt = 0;; ++attempt) {
        scene_seed = mix_seed(sample_seed, 17, attempt);
        scene = generate_scene(cfg, scene_seed);
        if (!want_positive || !positive_candidates(scene, cfg).empty()) break;
        if (attempt > 64) throw ShapeError("make_dataset: cannot draw a positive scene");
      }
      Sample s = sample_triplet(scene, cfg, want_positive, mix_seed(sample_seed, 23));

      char name[64];
      std::snprintf(name, sizeof(name), "sample_%05d", i);
      const std::string patch_rel = split + "/" + name + ".tensor";
      write_tensor_file(outdir / patch_rel, name, s.patch.shape(), s.patch.values());
      nlohmann::json rec = {
          {"split", split},          {"index", i},
          {"label", s.label},        {"patch", patch_rel},
          {"seed", scene_seed},      {"crop", {s.crop_x, s.crop_y}},
      };
      if (s.label > 0) {
        const std::string mask_rel = split + "/" + std::string(name) + "_mask.pgm";
        std::vector<std::uint8_t> px(s.mask.v.size());
        for (std::size_t p = 0; p < px.size(); ++p) px[p] = s.mask.v[p] ? 255 : 0;
        write_pgm(outdir / mask_rel, s.mask.h, s.mask.w, px);
        const auto& o = scene.objects[static_cast<std::size_t>(s.object_index)];
        rec["mask"] = mask_rel;
        rec["object"] = {{"kind", shape_kind_name(o.kind)},
                         {"cx", o.cx},
                         {"cy", o.cy},
                         {"scale", o.scale}};
      }
      manifest << rec.dump() << "\n";
    }
  };

  emit_split("train", n_train, 1);
  emit_split("val", n_val, 2);

  if (n_scenes > 0) {
    std::ofstream scenes(outdir / "scenes.jsonl", std::ios::binary);
    for (int i = 0; i < n_scenes; ++i) {
      Scene scene;
      std::uint64_t scene_seed = 0;
      for (std::uint64_t attempt = 0;; ++attempt) {
        scene_seed = mix_seed(seed, 3, static_cast<std::uint64_t>(i) * 131 + attempt);
        scene = generate_scene(cfg, scene_seed);
        if (!positive_candidates(scene, cfg).empty()) break;
        if (attempt > 64) throw ShapeError("make_dataset: cannot draw an eval scene");
      }
      char name[64];
      std::snprintf(name, sizeof(name), "scene_%04d", i);
      const std::string img_rel = "scenes/" + std::string(name) + ".tensor";
      Tensor img = Tensor::from_values({1, cfg.canvas, cfg.canvas}, scene.image);
      write_tensor_file(outdir / img_rel, name, img.shape(), img.values());
      nlohmann::json rec = {{"index", i}, {"image", img_rel}, {"seed", scene_seed}};
      nlohmann::json gts = nlohmann::json::array();
      // only canonical-scale objects count as ground truth at this single scale
      for (int oi : positive_candidates(scene, cfg)) {
        char gtname[96];
        std::snprintf(gtname, sizeof(gtname), "scenes/%s_gt%02d.pgm", name, oi);
        std::vector<std::uint8_t> px(scene.masks[static_cast<std::size_t>(oi)].v.size());
        for (std::size_t p = 0; p < px.size(); ++p)
          px[p] = scene.masks[static_cast<std::size_t>(oi)].v[p] ? 255 : 0;
        write_pgm(outdir / gtname, cfg.canvas, cfg.canvas, px);
        const auto& o = scene.objects[static_cast<std::size_t>(oi)];
        gts.push_back({{"mask", gtname},
                       {"kind", shape_kind_name(o.kind)},
                       {"cx", o.cx},
                       {"cy", o.cy},
                       {"scale", o.scale}});
      }
      rec["ground_truths"] = gts;
      scenes << rec.dump() << "\n";
    }
  }
  return outdir / "manifest.jsonl";
}

struct Dataset {
  std::vector<Sample> samples;

  std::vector<int> positives() const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].label > 0) idx.push_back(static_cast<int>(i));
    return idx;
  }
};

inline Dataset load_split(const std::filesystem::path& dir, const std::string& split) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw IoError("cannot open dataset manifest in " + dir.string());
  Dataset ds;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    if (rec.value("split", "") != split) continue;
    Sample s;
    NamedTensor patch = read_tensor_file(dir / rec.at("patch").get<std::string>());
    s.patch = Tensor::from_values(patch.shape, std::move(patch.values));
    s.label = rec.at("label").get<int>();
    s.scene_seed = rec.value("seed", 0ull);
    if (s.label > 0) {
      PgmImage img = read_pgm(dir / rec.at("mask").get<std::string>());
      s.mask.h = img.h;
      s.mask.w = img.w;
      s.mask.v.resize(img.pixels.size());
      for (std::size_t p = 0; p < img.pixels.size(); ++p) s.mask.v[p] = img.pixels[p] >= 128;
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

struct SceneRecord {
  Tensor image;  // [1, canvas, canvas]
  std::vector<BinaryMask> gts;
};

inline std::vector<SceneRecord> load_scenes(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "scenes.jsonl");
  if (!manifest) throw IoError("cannot open scenes.jsonl in " + dir.string());
  std::vector<SceneRecord> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    SceneRecord sr;
    NamedTensor img = read_tensor_file(dir / rec.at("image").get<std::string>());
    sr.image = Tensor::from_values(img.shape, std::move(img.values));
    for (const auto& gt : rec.at("ground_truths")) {
      PgmImage m = read_pgm(dir / gt.at("mask").get<std::string>());
      BinaryMask bm;
      bm.h = m.h;
      bm.w = m.w;
      bm.v.resize(m.pixels.size());
      for (std::size_t p = 0; p < m.pixels.size(); ++p) bm.v[p] = m.pixels[p] >= 128;
      sr.gts.push_back(std::move(bm));
    }
    out.push_back(std::move(sr));
  }
  return out;
}

}  // namespace maskref
