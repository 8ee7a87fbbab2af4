// SPDX-License-Identifier: Apache-2.0
//
// Model checkpoints: a one-line JSON manifest (format tag, stage, seed,
// config echo, tensor names + shapes) followed by the concatenated raw f64
// payloads in manifest order. Saving and loading is byte-exact.

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskref/io.hpp"
#include "maskref/network.hpp"

namespace maskref {

inline constexpr const char* kCheckpointFormat = "maskref-checkpoint-v1";

struct Checkpoint {
  int stage = 0;
  ModelConfig config;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const std::filesystem::path& path, const Model& model, int stage) {
  const auto params = named_parameters(model);
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["stage"] = stage;
  manifest["seed"] = model.cfg.seed;
  manifest["config"] = model.cfg;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& p : params)
    entries.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  manifest["tensors"] = entries;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << manifest.dump() << '\n';
  for (const auto& p : params)
    out.write(reinterpret_cast<const char*>(p.tensor.data()),
              static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("checkpoint missing manifest line");
  nlohmann::json manifest = nlohmann::json::parse(line);
  if (manifest.value("format", "") != kCheckpointFormat)
    throw IoError(path.string() + ": not a " + std::string(kCheckpointFormat) + " file");
  Checkpoint ck;
  ck.stage = manifest.value("stage", 0);
  manifest.at("config").get_to(ck.config);
  for (const auto& e : manifest.at("tensors")) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<Shape>();
    t.values.resize(shape_numel(t.shape));
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(double)));
    if (!in) throw IoError(path.string() + ": truncated payload at tensor '" + t.name + "'");
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

/// Copy checkpoint values into matching model parameters. With
/// require_all, every model parameter must be present in the checkpoint;
/// otherwise missing entries keep their initialization (used when a
/// stage-1 checkpoint seeds a refined model).
inline void apply_checkpoint(Model& model, const Checkpoint& ck, bool require_all) {
  for (auto& p : named_parameters(model)) {
    const NamedTensor* t = ck.find(p.name);
    if (!t) {
      if (require_all) throw IoError("checkpoint is missing tensor '" + p.name + "'");
      continue;
    }
    if (t->shape != p.tensor.shape())
      throw ShapeError("checkpoint tensor '" + p.name + "' has shape " + shape_str(t->shape) +
                       ", model expects " + shape_str(p.tensor.shape()));
    std::copy(t->values.begin(), t->values.end(), p.tensor.values_mut().begin());
  }
}

/// Rebuild a model from a checkpoint, optionally switching its mode (a
/// stage-1 checkpoint can seed a refined model; the refinement stack then
/// starts from its seeded initialization).
inline Model model_from_checkpoint(const Checkpoint& ck, ModelMode mode) {
  ModelConfig cfg = ck.config;
  cfg.mode = mode;
  Model m = build_model(cfg);
  apply_checkpoint(m, ck, /*require_all=*/mode != ModelMode::refined ||
                              ck.config.mode == ModelMode::refined);
  return m;
}

}  // namespace maskref
