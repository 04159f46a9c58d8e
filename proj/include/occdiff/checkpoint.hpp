#pragma once

// ".ckpt" container: "OCKP", u16 version, u32 directory length, the JSON
// directory, then raw f32 LE tensor blobs. The directory lists each tensor
// (name, shape, byte offset into the blob area, byte length) and carries free
// metadata (configs, seed, step).

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occdiff/binary_io.hpp"
#include "occdiff/error.hpp"
#include "occdiff/nn.hpp"

namespace occdiff {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct StoredTensor {
  std::vector<int> shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  /// Ordered by name so the encoding is independent of insertion order.
  std::map<std::string, StoredTensor> tensors;

  bool has_prefix(const std::string& prefix) const {
    auto it = tensors.lower_bound(prefix);
    return it != tensors.end() && it->first.compare(0, prefix.size(), prefix) == 0;
  }
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  nlohmann::json dir;
  dir["meta"] = ck.meta;
  nlohmann::json list = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    const std::uint64_t len = t.values.size() * 4;
    list.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"length", len}});
    offset += len;
  }
  dir["tensors"] = list;
  const std::string text = dir.dump();
  bin::Writer w;
  w.bytes("OCKP");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  for (const auto& [name, t] : ck.tensors)
    for (float f : t.values) w.f32(f);
  return w.data();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  bin::Reader r(bytes.data(), bytes.size(), "ckpt");
  if (r.bytes(4) != "OCKP") throw IoError("ckpt: bad magic");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw IoError("ckpt: unsupported version " + std::to_string(version));
  const auto len = r.u32();
  nlohmann::json dir;
  try {
    dir = nlohmann::json::parse(r.bytes(len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("ckpt: malformed directory: ") + e.what());
  }
  const std::size_t blob_start = r.position();
  Checkpoint ck;
  ck.meta = dir.value("meta", nlohmann::json::object());
  for (const auto& e : dir.at("tensors")) {
    StoredTensor t;
    t.shape = e.at("shape").get<std::vector<int>>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto length = e.at("length").get<std::uint64_t>();
    std::uint64_t expect = 4;
    for (int s : t.shape) {
      if (s < 0) throw IoError("ckpt: negative extent");
      expect *= static_cast<std::uint64_t>(s);
    }
    if (expect != length) throw IoError("ckpt: tensor length does not match its shape");
    if (blob_start + offset + length > bytes.size()) throw IoError("ckpt: tensor blob out of range");
    bin::Reader tr(bytes.data() + blob_start + offset, length, "ckpt tensor");
    t.values.resize(length / 4);
    for (auto& f : t.values) f = tr.f32();
    ck.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  bin::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(bin::read_file(path));
}

/// Stores every tensor of a parameter set under prefix.
template <class Params>
void store_params(Checkpoint& ck, const std::string& prefix, Params& p) {
  p.visit([&](const std::string& name, nn::Tensor<float>& t) {
    StoredTensor s;
    s.shape = t.shape;
    s.values.assign(t.data(), t.data() + t.size());
    ck.tensors[prefix + name] = std::move(s);
  });
}

/// Restores a parameter set; every tensor must be present with its shape.
template <class Params>
void restore_params(const Checkpoint& ck, const std::string& prefix, Params& p) {
  p.visit([&](const std::string& name, nn::Tensor<float>& t) {
    auto it = ck.tensors.find(prefix + name);
    if (it == ck.tensors.end()) throw IoError("ckpt: missing tensor " + prefix + name);
    if (it->second.shape != t.shape) throw IoError("ckpt: shape mismatch for " + prefix + name);
    std::copy(it->second.values.begin(), it->second.values.end(), t.data());
  });
}

}  // namespace occdiff
