#pragma once

// Versioned little-endian checkpoint container:
//
//   "SGCKPT\0\0"  magic (8 bytes)
//   u32 version (= 1)
//   i32 in_channels, out_classes, depth, base_width; u8 residual_encoder
//   u64 seed; i32 epoch
//   u32 metadata length, metadata bytes (free-form UTF-8, usually JSON)
//   u32 parameter count, then per parameter:
//     u32 name length, name bytes, u32 rank, i32 dims[rank], f32 values[prod(dims)]

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "nifti_io.hpp"
#include "tinyunet.hpp"

namespace segcascade {

inline constexpr std::array<char, 8> kCheckpointMagic{'S', 'G', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Network<float> net;
  int epoch = 0;
  std::string metadata;
};

namespace ckpt {

class Writer {
 public:
  template <class T>
  void put(T v) {
    auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    bytes.insert(bytes.end(), raw.begin(), raw.end());
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    return std::bit_cast<T>(raw);
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(Errc::BadCheckpoint, "truncated checkpoint");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt

inline std::vector<std::uint8_t> encode_checkpoint(const Network<float>& net, int epoch,
                                                   const std::string& metadata = {}) {
  ckpt::Writer w;
  w.bytes.insert(w.bytes.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto& c = net.config;
  w.put<std::int32_t>(c.in_channels);
  w.put<std::int32_t>(c.out_classes);
  w.put<std::int32_t>(c.depth);
  w.put<std::int32_t>(c.base_width);
  w.put<std::uint8_t>(c.residual_encoder ? 1 : 0);
  w.put<std::uint64_t>(net.seed);
  w.put<std::int32_t>(epoch);
  w.put_string(metadata);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(net.params.size()));
  for (const auto& p : net.params) {
    w.put_string(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) w.put<std::int32_t>(d);
    for (float v : p.data) w.put<float>(v);
  }
  return std::move(w.bytes);
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0)
    throw Error(Errc::BadCheckpoint, "bad checkpoint magic");
  ckpt::Reader r(bytes.subspan(8));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error(Errc::BadCheckpoint, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  auto& c = ck.net.config;
  c.in_channels = r.get<std::int32_t>();
  c.out_classes = r.get<std::int32_t>();
  c.depth = r.get<std::int32_t>();
  c.base_width = r.get<std::int32_t>();
  c.residual_encoder = r.get<std::uint8_t>() != 0;
  ck.net.seed = r.get<std::uint64_t>();
  ck.epoch = r.get<std::int32_t>();
  ck.metadata = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Param<float> p;
    p.name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw Error(Errc::BadCheckpoint, "implausible tensor rank");
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const int d = r.get<std::int32_t>();
      if (d < 0) throw Error(Errc::BadCheckpoint, "negative dimension");
      p.shape.push_back(d);
      n *= static_cast<std::size_t>(d);
    }
    p.data.resize(n);
    for (auto& v : p.data) v = r.get<float>();
    ck.net.params.push_back(std::move(p));
  }
  if (!r.done()) throw Error(Errc::BadCheckpoint, "trailing bytes");
  check_layout(ck.net);
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Network<float>& net, int epoch,
                            const std::string& metadata = {}) {
  write_file_bytes(path, encode_checkpoint(net, epoch, metadata));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw Error(Errc::MissingArtifact, "checkpoint not found: " + path.string());
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace segcascade
