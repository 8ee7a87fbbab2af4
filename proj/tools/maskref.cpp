// SPDX-License-Identifier: Apache-2.0
//
// maskref command-line tool: synthetic data generation, two-stage training,
// proposal evaluation, self-checks, and sliding-window inference.
//
// Exit codes: 0 success, 1 validation error, 2 numerical failure
// (NaN/divergence), 3 self-check (acceptance) failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskref/checkpoint.hpp"
#include "maskref/io.hpp"
#include "maskref/metrics.hpp"
#include "maskref/network.hpp"
#include "maskref/synthdata.hpp"
#include "maskref/trainer.hpp"
#include "maskref/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace maskref;

namespace {

struct AppConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  InferenceConfig infer;
  int n_train = 5000;
  int n_val = 500;
  int n_scenes = 60;
};

AppConfig load_app_config(const std::string& path) {
  AppConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json j = json::parse(in);
  if (j.contains("model")) j.at("model").get_to(cfg.model);
  if (j.contains("train")) j.at("train").get_to(cfg.train);
  if (j.contains("synth")) j.at("synth").get_to(cfg.synth);
  if (j.contains("infer")) j.at("infer").get_to(cfg.infer);
  cfg.n_train = j.value("n_train", cfg.n_train);
  cfg.n_val = j.value("n_val", cfg.n_val);
  cfg.n_scenes = j.value("n_scenes", cfg.n_scenes);
  return cfg;
}

json app_config_json(const AppConfig& cfg) {
  return {{"model", cfg.model},   {"train", cfg.train},     {"synth", cfg.synth},
          {"infer", cfg.infer},   {"n_train", cfg.n_train}, {"n_val", cfg.n_val},
          {"n_scenes", cfg.n_scenes}};
}

/// Every command writes <out>/manifest.json echoing the resolved config and
/// the content hash of each artifact it produced.
class RunManifest {
 public:
  RunManifest(std::string command, const fs::path& out_dir)
      : out_dir_(out_dir) {
    j_["command"] = std::move(command);
    j_["artifacts"] = json::object();
    j_["inputs"] = json::object();
  }

  void set_config(json cfg) { j_["config"] = std::move(cfg); }

  void add_input(const std::string& key, const fs::path& p) {
    j_["inputs"][key] = {{"path", p.string()}, {"hash", file_hash_hex(p)}};
  }

  void add_artifact(const std::string& rel) {
    j_["artifacts"][rel] = file_hash_hex(out_dir_ / rel);
  }

  void write() {
    write_text_file(out_dir_ / "manifest.json", j_.dump(2) + "\n");
  }

 private:
  fs::path out_dir_;
  json j_;
};

json epoch_log_json(const EpochLog& l) {
  json j;
  j["stage"] = l.stage;
  j["epoch"] = l.epoch;
  j["split"] = l.split;
  j["loss"] = l.loss < 0.0 ? json(nullptr) : json(l.loss);
  j["mean_iou"] = l.mean_iou < 0.0 ? json(nullptr) : json(l.mean_iou);
  return j;
}

Tensor scene_image_4d(const Tensor& img3) {
  return Tensor::from_values({1, img3.dim(0), img3.dim(1), img3.dim(2)},
                             {img3.values().begin(), img3.values().end()});
}

ProposalSet oracle_proposals(const SceneRecord& scene) {
  ProposalSet ps;
  ps.frame_h = scene.image.dim(1);
  ps.frame_w = scene.image.dim(2);
  double score = 1.0;
  for (const auto& gt : scene.gts) {
    Proposal p;
    p.x = 0;
    p.y = 0;
    p.score = score;
    score -= 1e-6;
    p.mask_h = gt.h;
    p.mask_w = gt.w;
    p.mask.resize(gt.v.size());
    for (std::size_t i = 0; i < gt.v.size(); ++i) p.mask[i] = gt.v[i] ? 1.0 : 0.0;
    ps.items.push_back(std::move(p));
  }
  return ps;
}

int cmd_synth(const std::string& config_path, const std::string& out,
              std::uint64_t seed, bool seed_set, int n_train, int n_val, int n_scenes) {
  AppConfig cfg = load_app_config(config_path);
  if (n_train > 0) cfg.n_train = n_train;
  if (n_val >= 0) cfg.n_val = n_val;
  if (n_scenes >= 0) cfg.n_scenes = n_scenes;
  const std::uint64_t s = seed_set ? seed : cfg.model.seed;
  fs::create_directories(out);
  make_dataset(cfg.synth, s, cfg.n_train, cfg.n_val, cfg.n_scenes, out);

  RunManifest manifest("synth", out);
  json c = {{"synth", cfg.synth}, {"seed", s},
            {"n_train", cfg.n_train}, {"n_val", cfg.n_val}, {"n_scenes", cfg.n_scenes}};
  manifest.set_config(c);
  manifest.add_artifact("manifest.jsonl");
  if (cfg.n_scenes > 0) manifest.add_artifact("scenes.jsonl");
  manifest.write();
  std::cout << "wrote " << cfg.n_train << " train / " << cfg.n_val << " val samples and "
            << cfg.n_scenes << " scenes to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data,
              const std::string& out, int stage, const std::string& from,
              std::uint64_t seed, bool seed_set) {
  AppConfig cfg = load_app_config(config_path);
  if (seed_set) {
    cfg.model.seed = seed;
    cfg.train.seed = seed;
  }
  if (stage != 1 && stage != 2) throw ShapeError("train: --stage must be 1 or 2");
  if (stage == 2 && from.empty())
    throw ShapeError("train: stage 2 needs --from <stage-1 checkpoint>");
  if (cfg.synth.patch != cfg.model.trunk.width)
    throw ShapeError("train: synth patch side and model width disagree");

  Dataset train_set = load_split(data, "train");
  Dataset val_set = load_split(data, "val");
  fs::create_directories(out);

  const std::string log_rel = "train_log_stage" + std::to_string(stage) + ".jsonl";
  std::ofstream log_file(fs::path(out) / log_rel, std::ios::binary);
  LogSink sink = [&log_file](const EpochLog& l) {
    log_file << epoch_log_json(l).dump() << "\n";
    log_file.flush();
    std::cout << epoch_log_json(l).dump() << std::endl;
  };

  RunManifest manifest("train", out);
  const std::string ckpt_rel = "stage" + std::to_string(stage) + ".ckpt";

  if (stage == 1) {
    cfg.model.mode = ModelMode::feedforward_only;
    Model model = build_model(cfg.model);
    train_stage1(model, train_set, val_set, cfg.train, sink);
    save_checkpoint(fs::path(out) / ckpt_rel, model, 1);
  } else {
    Checkpoint ck = load_checkpoint(from);
    manifest.add_input("from", from);
    Model model = model_from_checkpoint(ck, ModelMode::refined);
    train_stage2(model, train_set, val_set, cfg.train, sink);
    save_checkpoint(fs::path(out) / ckpt_rel, model, 2);
  }
  log_file.close();

  manifest.set_config({{"model", cfg.model}, {"train", cfg.train}, {"stage", stage}});
  manifest.add_input("data", fs::path(data) / "manifest.jsonl");
  manifest.add_artifact(ckpt_rel);
  manifest.add_artifact(log_rel);
  manifest.write();
  std::cout << "stage " << stage << " checkpoint written to "
            << (fs::path(out) / ckpt_rel).string() << "\n";
  return 0;
}

json eval_one_path(const Model& model, bool refined, const Dataset& val,
                   const std::vector<SceneRecord>& scenes, const InferenceConfig& icfg,
                   double threshold) {
  json row;
  row["model"] = refined ? "refined" : "coarse";
  row["patch_mean_iou"] = mean_patch_iou(model, val, refined, threshold);
  row["score_accuracy"] = score_accuracy(model, val);
  if (!scenes.empty()) {
    ArAccumulator acc(scale_thresholds_for_patch(model.patch_side()));
    for (const auto& scene : scenes) {
      ProposalSet ps = propose(model, scene_image_4d(scene.image), icfg, refined);
      acc.add_image(build_match_table(ps, scene.gts, threshold));
    }
    row["proposals"] = ar_report_to_json(acc.report());
  }
  return row;
}

int cmd_eval(const std::string& config_path, const std::string& from,
             const std::string& data, const std::string& out, double threshold,
             int topn, const std::string& proposer) {
  AppConfig cfg = load_app_config(config_path);
  InferenceConfig icfg = cfg.infer;
  if (topn > 0) icfg.top_n = topn;
  if (proposer != "model" && proposer != "oracle")
    throw ShapeError("eval: --proposer must be model or oracle");

  Dataset val = load_split(data, "val");
  std::vector<SceneRecord> scenes;
  if (fs::exists(fs::path(data) / "scenes.jsonl")) scenes = load_scenes(data);
  fs::create_directories(out);

  json report;
  report["threshold"] = threshold;
  report["rows"] = json::array();

  RunManifest manifest("eval", out);
  manifest.add_input("data", fs::path(data) / "manifest.jsonl");

  if (proposer == "oracle") {
    ArAccumulator acc;
    if (scenes.empty()) throw ShapeError("eval: oracle proposer needs eval scenes");
    for (const auto& scene : scenes)
      acc.add_image(build_match_table(oracle_proposals(scene), scene.gts, threshold));
    json row;
    row["model"] = "oracle";
    row["proposals"] = ar_report_to_json(acc.report());
    report["rows"].push_back(row);
  } else {
    if (from.empty()) throw ShapeError("eval: --from checkpoint required");
    Checkpoint ck = load_checkpoint(from);
    manifest.add_input("from", from);
    if (ck.config.mode == ModelMode::refined) {
      Model model = model_from_checkpoint(ck, ModelMode::refined);
      report["rows"].push_back(eval_one_path(model, false, val, scenes, icfg, threshold));
      report["rows"].push_back(eval_one_path(model, true, val, scenes, icfg, threshold));
    } else {
      Model model = model_from_checkpoint(ck, ModelMode::feedforward_only);
      report["rows"].push_back(eval_one_path(model, false, val, scenes, icfg, threshold));
    }
  }

  write_text_file(fs::path(out) / "eval_report.json", report.dump(2) + "\n");
  manifest.set_config({{"infer", icfg}, {"threshold", threshold}, {"proposer", proposer}});
  manifest.add_artifact("eval_report.json");
  manifest.write();
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(int trials, std::uint64_t seed, const std::string& out) {
  const double limit = 1e-4;
  auto reports = gradcheck_battery(trials, seed);
  bool ok = true;
  json rows = json::array();
  for (const auto& r : reports) {
    const bool pass = r.max_err <= limit;
    ok = ok && pass;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << r.op << ": max rel err " << r.max_err
              << " over " << r.trials << " trials (limit " << limit << ")\n";
    rows.push_back({{"op", r.op}, {"max_err", r.max_err}, {"trials", r.trials}});
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_text_file(fs::path(out) / "gradcheck.json",
                    json{{"limit", limit}, {"ops", rows}}.dump(2) + "\n");
    RunManifest manifest("gradcheck", out);
    manifest.set_config({{"trials", trials}, {"seed", seed}});
    manifest.add_artifact("gradcheck.json");
    manifest.write();
  }
  return ok ? 0 : 3;
}

int cmd_equiv(int trials, std::uint64_t seed, const std::string& out) {
  const double fwd_limit = 1e-9, grad_limit = 1e-8;
  EquivReport rep = equivalence_battery(trials, seed);
  const bool ok = rep.max_forward_diff <= fwd_limit && rep.max_grad_diff <= grad_limit;
  std::cout << (ok ? "[PASS] " : "[FAIL] ") << "refine vs refactored over " << rep.trials
            << " trials: max forward diff " << rep.max_forward_diff << " (limit "
            << fwd_limit << "), max grad diff " << rep.max_grad_diff << " (limit "
            << grad_limit << ")\n";
  if (!out.empty()) {
    fs::create_directories(out);
    write_text_file(fs::path(out) / "equiv.json",
                    json{{"trials", rep.trials},
                         {"max_forward_diff", rep.max_forward_diff},
                         {"max_grad_diff", rep.max_grad_diff}}.dump(2) + "\n");
    RunManifest manifest("equiv", out);
    manifest.set_config({{"trials", trials}, {"seed", seed}});
    manifest.add_artifact("equiv.json");
    manifest.write();
  }
  return ok ? 0 : 3;
}

int cmd_bench(const std::string& config_path, const std::string& heads_csv, int trials,
              std::uint64_t seed) {
  AppConfig cfg = load_app_config(config_path);
  std::vector<HeadKind> kinds;
  for (char c : heads_csv)
    if (c != ',' && c != ' ') kinds.push_back(head_kind_from_char(c));
  if (kinds.empty()) throw ShapeError("bench: no head variants given");

  const int batch = 8;
  std::mt19937_64 rng(seed);
  Tensor patches = Tensor::zeros({batch, cfg.model.trunk.input_channels,
                                  cfg.model.trunk.width, cfg.model.trunk.width});
  for (double& v : patches.values_mut()) v = detail::uniform01(rng);

  auto time_median_us = [&](const std::function<void()>& fn) {
    fn();  // warm up
    std::vector<double> us;
    for (int t = 0; t < trials; ++t) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      const auto t1 = std::chrono::steady_clock::now();
      us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
    }
    std::sort(us.begin(), us.end());
    return us[us.size() / 2];
  };

  struct Row {
    char kind;
    std::size_t head_params;
    double total_us, score_us;
  };
  std::vector<Row> rows;
  for (HeadKind kind : kinds) {
    ModelConfig mc = cfg.model;
    mc.head.kind = kind;
    mc.mode = ModelMode::feedforward_only;
    Model model = build_model(mc);

    Graph g;
    const double total_us = time_median_us([&] {
      g.reset();
      forward_feedforward(g, model, patches);
    });
    // precompute the shared mask-branch tensors, then time the score branch
    g.reset();
    TrunkForward tf = trunk_forward(g, model.trunk, patches);
    const int d = tf.reduced.dim(1) * tf.reduced.dim(2) * tf.reduced.dim(3);
    Tensor flat = reshape(g, tf.reduced, {batch, d});
    Tensor vec = relu(g, linear(g, flat, model.head.reduce_w, model.head.reduce_b));
    Graph gs;
    const double score_us = time_median_us([&] {
      gs.reset();
      forward_score_branch(gs, model.head, flat, vec);
    });
    std::size_t head_params = 0;
    for (const auto& t : model.head.parameters()) head_params += t.size();
    rows.push_back({head_kind_char(kind), head_params, total_us, score_us});
  }

  std::cout << "head  params(head)  score-branch(us)  full-forward(us)  [batch " << batch
            << ", median of " << trials << "]\n";
  for (const auto& r : rows)
    std::cout << "  " << r.kind << "   " << r.head_params << "\t" << r.score_us << "\t"
              << r.total_us << "\n";
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const bool param_ok = rows[i].head_params <= rows[i - 1].head_params;
    const bool time_ok = rows[i].score_us <= rows[i - 1].score_us;
    std::cout << "ordering " << rows[i - 1].kind << " >= " << rows[i].kind << ": params "
              << (param_ok ? "ok" : "VIOLATED") << ", score time "
              << (time_ok ? "ok" : "VIOLATED") << "\n";
  }
  return 0;
}

int cmd_infer(const std::string& config_path, const std::string& from,
              const std::string& image_path, const std::string& out, int topn,
              const std::string& mode, double threshold) {
  AppConfig cfg = load_app_config(config_path);
  InferenceConfig icfg = cfg.infer;
  if (topn > 0) icfg.top_n = topn;
  const bool refined = mode == "refined";
  if (!refined && mode != "coarse")
    throw ShapeError("infer: --mode must be coarse or refined");

  Checkpoint ck = load_checkpoint(from);
  if (refined && ck.config.mode != ModelMode::refined)
    throw ShapeError("infer: refined masks need a stage-2 checkpoint");
  Model model = model_from_checkpoint(ck, ck.config.mode);

  // image: either an 8-bit PGM or a raw tensor file
  Tensor image;
  {
    std::ifstream probe(image_path, std::ios::binary);
    if (!probe) throw IoError("cannot open image " + image_path);
    char magic[2] = {0, 0};
    probe.read(magic, 2);
    probe.close();
    if (magic[0] == 'P' && magic[1] == '5') {
      PgmImage img = read_pgm(image_path);
      image = Tensor::zeros({1, 1, img.h, img.w});
      for (std::size_t i = 0; i < img.pixels.size(); ++i)
        image.values_mut()[i] = img.pixels[i] / 255.0;
    } else {
      NamedTensor t = read_tensor_file(image_path);
      if (t.shape.size() == 3)
        image = Tensor::from_values({1, t.shape[0], t.shape[1], t.shape[2]},
                                    std::move(t.values));
      else
        image = Tensor::from_values(t.shape, std::move(t.values));
    }
  }

  ProposalSet ps = propose(model, image, icfg, refined);
  fs::create_directories(out);
  RunManifest manifest("infer", out);
  manifest.add_input("from", from);
  manifest.add_input("image", image_path);

  json plist = json::array();
  for (std::size_t i = 0; i < ps.items.size(); ++i) {
    const auto& p = ps.items[i];
    char name[64];
    std::snprintf(name, sizeof(name), "proposal_%03zu.pgm", i);
    BinaryMask bm = binarize(p.mask, p.mask_h, p.mask_w, threshold);
    std::vector<std::uint8_t> px(bm.v.size());
    for (std::size_t k = 0; k < px.size(); ++k) px[k] = bm.v[k] ? 255 : 0;
    write_pgm(fs::path(out) / name, bm.h, bm.w, px);
    plist.push_back({{"x", p.x}, {"y", p.y}, {"score", p.score}, {"mask", name}});
    manifest.add_artifact(name);
  }
  write_text_file(fs::path(out) / "proposals.json",
                  json{{"mode", mode}, {"threshold", threshold}, {"proposals", plist}}
                          .dump(2) +
                      "\n");
  manifest.set_config({{"infer", icfg}, {"mode", mode}, {"threshold", threshold}});
  manifest.add_artifact("proposals.json");
  manifest.write();
  std::cout << "wrote " << ps.items.size() << " proposals to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bottom-up/top-down mask refinement: data, training, evaluation"};
  app.require_subcommand(1);

  std::string config_path, out, data, from, image_path;
  std::uint64_t seed = 0;
  int stage = 1, topn = 0, trials = 0, n_train = 0, n_val = -1, n_scenes = -1;
  double threshold = 0.2;
  std::string heads = "A,B,C", mode = "refined", proposer = "model";

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--config", config_path);
  synth->add_option("--out", out)->required();
  auto* synth_seed = synth->add_option("--seed", seed);
  synth->add_option("--n-train", n_train);
  synth->add_option("--n-val", n_val);
  synth->add_option("--n-scenes", n_scenes);

  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--config", config_path);
  train->add_option("--data", data)->required();
  train->add_option("--out", out)->required();
  train->add_option("--stage", stage)->required();
  train->add_option("--from", from);
  auto* train_seed = train->add_option("--seed", seed);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--config", config_path);
  eval->add_option("--from", from);
  eval->add_option("--data", data)->required();
  eval->add_option("--out", out)->required();
  eval->add_option("--threshold", threshold);
  eval->add_option("--topn", topn);
  eval->add_option("--proposer", proposer);

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference self-check");
  gradcheck->add_option("--trials", trials);
  gradcheck->add_option("--seed", seed);
  gradcheck->add_option("--out", out);

  auto* equiv = app.add_subcommand("equiv", "refactored-module equivalence check");
  equiv->add_option("--trials", trials);
  equiv->add_option("--seed", seed);
  equiv->add_option("--out", out);

  auto* bench = app.add_subcommand("bench", "head-variant timing comparison");
  bench->add_option("--config", config_path);
  bench->add_option("--heads", heads);
  bench->add_option("--trials", trials);
  bench->add_option("--seed", seed);

  auto* infer = app.add_subcommand("infer", "propose masks on one image");
  infer->add_option("--config", config_path);
  infer->add_option("--from", from)->required();
  infer->add_option("--image", image_path)->required();
  infer->add_option("--out", out)->required();
  infer->add_option("--topn", topn);
  infer->add_option("--mode", mode);
  infer->add_option("--threshold", threshold);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return cmd_synth(config_path, out, seed, !synth_seed->empty(), n_train, n_val,
                       n_scenes);
    if (train->parsed())
      return cmd_train(config_path, data, out, stage, from, seed, !train_seed->empty());
    if (eval->parsed())
      return cmd_eval(config_path, from, data, out, threshold, topn, proposer);
    if (gradcheck->parsed())
      return cmd_gradcheck(trials > 0 ? trials : 20, seed, out);
    if (equiv->parsed())
      return cmd_equiv(trials > 0 ? trials : 100, seed, out);
    if (bench->parsed())
      return cmd_bench(config_path, heads, trials > 0 ? trials : 30, seed);
    if (infer->parsed())
      return cmd_infer(config_path, from, image_path, out, topn, mode, threshold);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
