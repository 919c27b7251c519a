#pragma once

// Checkpoint container:
//
//   MTKDCKPT1\n
//   arch <architecture id>\n
//   width <channel width>\n
//   tensors <count>\n
//   <name> <rank> <dim0> ... <dimN>\n     one line per tensor, names sorted
//   end\n
//   <payload>
//
// The payload concatenates every tensor's values as little-endian IEEE-754
// float32, in manifest order. No timestamps are written, so saving the same
// parameters twice produces identical files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mtkd/error.hpp"
#include "mtkd/model.hpp"

namespace mtkd {

inline constexpr const char* kCheckpointMagic = "MTKDCKPT1";

inline void write_checkpoint(std::ostream& os, const ModelParams<float>& model) {
  os << kCheckpointMagic << '\n'
     << "arch " << to_string(model.arch) << '\n'
     << "width " << model.width << '\n'
     << "tensors " << model.tensors.size() << '\n';
  for (const auto& [name, t] : model.tensors) {
    os << name << ' ' << t.ndim();
    for (auto d : t.shape()) os << ' ' << d;
    os << '\n';
  }
  os << "end\n";
  for (const auto& [name, t] : model.tensors) {
    for (const float v : t.data()) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
      unsigned char bytes[4] = {static_cast<unsigned char>(bits & 0xFF),
                                static_cast<unsigned char>((bits >> 8) & 0xFF),
                                static_cast<unsigned char>((bits >> 16) & 0xFF),
                                static_cast<unsigned char>((bits >> 24) & 0xFF)};
      os.write(reinterpret_cast<const char*>(bytes), 4);
    }
  }
  if (!os) throw Error("failed to write checkpoint");
}

inline ModelParams<float> read_checkpoint(std::istream& is) {
  auto fail = [](const std::string& what) -> Error {
    return Error("malformed checkpoint: " + what);
  };
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) throw fail("missing MTKDCKPT1 magic");

  auto header = [&](const std::string& key) {
    if (!std::getline(is, line)) throw fail("truncated manifest");
    std::istringstream ls(line);
    std::string k, v;
    ls >> k >> v;
    if (k != key || v.empty()) throw fail("expected '" + key + "' line, got '" + line + "'");
    return v;
  };
  ModelParams<float> model(parse_arch(header("arch")), 0);
  model.width = std::stoul(header("width"));
  const std::size_t count = std::stoul(header("tensors"));

  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(is, line)) throw fail("truncated tensor table");
    std::istringstream ls(line);
    std::string name;
    std::size_t rank = 0;
    if (!(ls >> name >> rank)) throw fail("bad tensor line '" + line + "'");
    Shape shape(rank);
    for (auto& d : shape) {
      if (!(ls >> d)) throw fail("bad shape in '" + line + "'");
    }
    manifest.emplace_back(name, shape);
  }
  if (!std::getline(is, line) || line != "end") throw fail("missing 'end' after tensor table");

  for (auto& [name, shape] : manifest) {
    std::vector<float> values(numel(shape));
    for (auto& v : values) {
      unsigned char b[4];
      if (!is.read(reinterpret_cast<char*>(b), 4)) throw fail("payload of '" + name + "' truncated");
      const std::uint32_t bits = std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) |
                                 (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
      v = std::bit_cast<float>(bits);
    }
    model.tensors.emplace(name, Tensor<float>(shape, std::move(values)));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes after payload");

  // The parameter set must be exactly what the architecture defines.
  const auto reference = build_model<float>(model.arch, model.width, 0);
  if (reference.tensors.size() != model.tensors.size()) throw fail("unexpected tensor count");
  for (const auto& [name, t] : reference.tensors) {
    auto it = model.tensors.find(name);
    if (it == model.tensors.end()) throw fail("missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) throw fail("tensor '" + name + "' has wrong shape");
  }
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_checkpoint(os, model);
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace mtkd
