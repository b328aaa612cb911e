#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "config_json.hpp"
#include "errors.hpp"
#include "training.hpp"

namespace l2ae {

// Checkpoint file layout, all integers little-endian:
//
//   0   char[8]  magic "L2AECKPT"
//   8   u32      format version (1)
//   12  u32      entry count E
//   16  u64      metadata length M
//   24  M bytes  metadata JSON: {"format", "spec", "train_config", "epoch"}
//   ... E manifest entries: u32 key length, key bytes, u32 rank, rank × u64 dims,
//       u64 offset (in floats, from the start of the value block), u64 count
//   ... value block: float32 values of all entries in manifest order
//
// Trainable tensors use their parameter key; non-trainable state is stored
// under "state/<key>". Entries are sorted by stored key.

inline constexpr char kCheckpointMagic[8] = {'L', '2', 'A', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }

  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::string what) : b_(b), what_(std::move(what)) {}

  std::uint64_t uint(int width) {
    need(width);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{b_[pos_ + i]} << (8 * i);
    pos_ += width;
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) fail("truncated, need " + std::to_string(n) + " bytes");
  }

  const std::vector<std::uint8_t>& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt) {
  std::map<std::string, const Tensor<float>*> entries;
  for (const auto& [k, t] : ckpt.params.trainable) entries.emplace(k, &t);
  for (const auto& [k, t] : ckpt.params.state) entries.emplace("state/" + k, &t);
  const Json meta = {{"format", "l2ae-checkpoint"},
                     {"spec", to_json(ckpt.spec)},
                     {"train_config", to_json(ckpt.config)},
                     {"epoch", ckpt.epoch}};
  const std::string meta_text = meta.dump();

  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  w.u64(meta_text.size());
  w.raw(meta_text.data(), meta_text.size());
  std::uint64_t offset = 0;
  for (const auto& [key, t] : entries) {
    w.u32(static_cast<std::uint32_t>(key.size()));
    w.raw(key.data(), key.size());
    w.u32(static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) w.u64(d);
    w.u64(offset);
    w.u64(t->size());
    offset += t->size();
  }
  for (const auto& [key, t] : entries)
    for (auto v : t->values()) w.f32(v);
  return std::move(w.bytes);
}

/// Parses a checkpoint and checks every tensor against the shapes its spec builds.
inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (r.str(8) != std::string(kCheckpointMagic, 8)) {
    throw FormatError(what + ": bad magic at byte offset 0");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.u32();
  const auto meta_len = r.u64();
  if (meta_len > r.remaining()) r.fail("metadata length exceeds file");
  Json meta;
  try {
    meta = Json::parse(r.str(meta_len));
  } catch (const Json::exception& e) {
    throw FormatError(what + ": malformed metadata: " + e.what());
  }
  Checkpoint ckpt;
  try {
    ObjectReader m(meta, "metadata");
    if (m.require<std::string>("format") != "l2ae-checkpoint") throw ConfigError("metadata.format: not a checkpoint");
    ckpt.spec = spec_from_json(m.raw("spec"), "metadata.spec");
    ckpt.config = train_config_from_json(m.raw("train_config"), "metadata.train_config");
    ckpt.epoch = m.require<std::size_t>("epoch");
    m.finish();
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }

  struct Entry {
    std::string key;
    Shape shape;
    std::uint64_t offset, count;
  };
  std::vector<Entry> manifest;
  std::uint64_t expected_offset = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto key_len = r.u32();
    e.key = r.str(key_len);
    const auto rank = r.u32();
    if (rank == 0 || rank > 8) r.fail("entry '" + e.key + "' has rank " + std::to_string(rank));
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<std::size_t>(r.u64()));
    e.offset = r.u64();
    e.count = r.u64();
    if (e.offset != expected_offset || e.count != shape_size(e.shape))
      r.fail("entry '" + e.key + "' has inconsistent offset or count");
    expected_offset += e.count;
    manifest.push_back(std::move(e));
  }
  if (r.remaining() != expected_offset * 4)
    r.fail("value block holds " + std::to_string(r.remaining()) + " bytes, manifest needs " +
           std::to_string(expected_offset * 4));
  for (const auto& e : manifest) {
    std::vector<float> vals(e.count);
    for (auto& v : vals) v = r.f32();
    Tensor<float> t(e.shape, std::move(vals));
    if (e.key.rfind("state/", 0) == 0)
      ckpt.params.state.emplace(e.key.substr(6), std::move(t));
    else
      ckpt.params.trainable.emplace(e.key, std::move(t));
  }

  const auto reference = build<float>(ckpt.spec, Rng(0));
  auto check = [&](const auto& got, const auto& want, const std::string& prefix) {
    if (got.size() != want.size()) throw FormatError(what + ": tensor set does not match the spec");
    for (const auto& [k, t] : want) {
      auto it = got.find(k);
      if (it == got.end()) throw FormatError(what + ": missing tensor '" + prefix + k + "'");
      if (it->second.shape() != t.shape())
        throw FormatError(what + ": tensor '" + prefix + k + "' has shape " + shape_str(it->second.shape()) +
                          ", spec needs " + shape_str(t.shape()));
    }
  };
  check(ckpt.params.trainable, reference.trainable, "");
  check(ckpt.params.state, reference.state, "state/");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_bytes(path, checkpoint_bytes(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes, path);
}

}  // namespace l2ae
