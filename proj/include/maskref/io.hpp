// SPDX-License-Identifier: Apache-2.0
//
// File formats: raw little-endian f64 tensors with a one-line JSON header,
// 8-bit binary PGM (P5) masks/images, and content hashing for manifests.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskref/tensor.hpp"

namespace maskref {

static_assert(std::endian::native == std::endian::little,
              "tensor payloads are written as native little-endian doubles");

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Serialize a tensor: one JSON header line {name, shape, dtype:"f64"}
/// followed by the flat little-endian payload.
inline void write_tensor_stream(std::ostream& out, const std::string& name,
                                const Shape& shape, std::span<const double> values) {
  nlohmann::json header = {{"name", name}, {"shape", shape}, {"dtype", "f64"}};
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline NamedTensor read_tensor_stream(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("tensor stream: missing header line");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("dtype", "") != "f64") throw IoError("tensor stream: dtype must be f64");
  NamedTensor t;
  t.name = header.value("name", "");
  t.shape = header.at("shape").get<Shape>();
  t.values.resize(shape_numel(t.shape));
  in.read(reinterpret_cast<char*>(t.values.data()),
          static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  if (!in) throw IoError("tensor stream: truncated payload for '" + t.name + "'");
  return t;
}

inline void write_tensor_file(const std::filesystem::path& path, const std::string& name,
                              const Shape& shape, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor_stream(out, name, shape, values);
}

inline NamedTensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor_stream(in);
}

/// 8-bit binary PGM. Masks use 0 = background, 255 = object.
inline void write_pgm(const std::filesystem::path& path, int h, int w,
                      std::span<const std::uint8_t> pixels) {
  if (pixels.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
    throw IoError("pgm: pixel count does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
}

struct PgmImage {
  int h = 0, w = 0;
  std::vector<std::uint8_t> pixels;
};

inline PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw IoError(path.string() + ": not a binary PGM");
  auto next_int = [&in, &path]() {
    int v;
    // skip whitespace and '#' comment lines
    while (true) {
      int c = in.peek();
      if (c == '#') {
        std::string junk;
        std::getline(in, junk);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    if (!(in >> v)) throw IoError(path.string() + ": malformed PGM header");
    return v;
  };
  PgmImage img;
  img.w = next_int();
  img.h = next_int();
  int maxval = next_int();
  if (maxval != 255) throw IoError(path.string() + ": only maxval 255 supported");
  in.get();  // single whitespace after header
  img.pixels.resize(static_cast<std::size_t>(img.w) * img.h);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw IoError(path.string() + ": truncated PGM payload");
  return img;
}

/// FNV-1a 64-bit content hash, used in run manifests for byte-level
/// reproduction checks.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline std::string file_hash_hex(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return hex64(fnv1a64(bytes));
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
}

}  // namespace maskref
