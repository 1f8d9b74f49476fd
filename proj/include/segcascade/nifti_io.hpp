#pragma once

// Single-file NIfTI-1 (.nii / .nii.gz) reading and writing.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "gzip.hpp"
#include "volume.hpp"

namespace segcascade {

namespace nifti {

inline constexpr int kHeaderSize = 348;
inline constexpr int kDataOffset = 352;

enum Datatype : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
};

inline int bitpix_for(int datatype) {
  switch (datatype) {
    case kUint8: return 8;
    case kInt16: return 16;
    case kInt32: return 32;
    case kFloat32: return 32;
    case kFloat64: return 64;
    default: return 0;
  }
}

// Field offsets within the 348-byte header.
namespace off {
inline constexpr std::size_t sizeof_hdr = 0;
inline constexpr std::size_t dim = 40;
inline constexpr std::size_t intent_code = 68;
inline constexpr std::size_t datatype = 70;
inline constexpr std::size_t bitpix = 72;
inline constexpr std::size_t pixdim = 76;
inline constexpr std::size_t vox_offset = 108;
inline constexpr std::size_t scl_slope = 112;
inline constexpr std::size_t scl_inter = 116;
inline constexpr std::size_t xyzt_units = 123;
inline constexpr std::size_t descrip = 148;
inline constexpr std::size_t qform_code = 252;
inline constexpr std::size_t sform_code = 254;
inline constexpr std::size_t quatern_b = 256;
inline constexpr std::size_t srow_x = 280;
inline constexpr std::size_t magic = 344;
}  // namespace off

}  // namespace nifti

struct NiftiHeader {
  std::int32_t sizeof_hdr = nifti::kHeaderSize;
  std::array<std::int16_t, 8> dim{3, 1, 1, 1, 1, 1, 1, 1};
  std::int16_t intent_code = 0;
  std::int16_t datatype = nifti::kFloat32;
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{1, 1, 1, 1, 1, 1, 1, 1};
  float vox_offset = nifti::kDataOffset;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::uint8_t xyzt_units = 2;  // mm
  std::array<char, 80> descrip{};
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  // quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
  std::array<float, 6> quatern{};
  std::array<std::array<float, 4>, 3> srow{};
  std::array<char, 4> magic{'n', '+', '1', '\0'};
  bool big_endian = false;
};

struct NiftiImage {
  NiftiHeader header;
  Volume3D volume;
};

namespace nifti {

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <class T>
  T get(std::size_t offset) const {
    std::array<std::uint8_t, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  bool swap_;
};

template <class T>
void put_le(std::vector<std::uint8_t>& out, std::size_t offset, T value) {
  auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  std::memcpy(out.data() + offset, raw.data(), sizeof(T));
}

inline bool host_is_little() { return std::endian::native == std::endian::little; }

inline Affine affine_from_quatern(const NiftiHeader& h) {
  const double b = h.quatern[0], c = h.quatern[1], d = h.quatern[2];
  const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
  const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
  const double dx = h.pixdim[1], dy = h.pixdim[2], dz = h.pixdim[3] * qfac;
  Affine m{};
  m[0] = {(a * a + b * b - c * c - d * d) * dx, 2 * (b * c - a * d) * dy, 2 * (b * d + a * c) * dz,
          h.quatern[3]};
  m[1] = {2 * (b * c + a * d) * dx, (a * a + c * c - b * b - d * d) * dy, 2 * (c * d - a * b) * dz,
          h.quatern[4]};
  m[2] = {2 * (b * d - a * c) * dx, 2 * (c * d + a * b) * dy, (a * a + d * d - c * c - b * b) * dz,
          h.quatern[5]};
  m[3] = {0, 0, 0, 1};
  return m;
}

inline NiftiHeader parse_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < static_cast<std::size_t>(kDataOffset))
    throw Error(Errc::TruncatedData, "fewer than 352 bytes");
  std::int32_t raw_size;
  std::memcpy(&raw_size, bytes.data(), 4);
  bool swap = false;
  if (raw_size != kHeaderSize) {
    if (static_cast<std::int32_t>(__builtin_bswap32(static_cast<std::uint32_t>(raw_size))) != kHeaderSize)
      throw Error(Errc::BadHeader, "sizeof_hdr is not 348 in either byte order");
    swap = true;
  }
  ByteReader r(bytes, swap);
  NiftiHeader h;
  h.big_endian = host_is_little() ? swap : !swap;
  h.sizeof_hdr = kHeaderSize;
  std::memcpy(h.magic.data(), bytes.data() + off::magic, 4);
  if (!(h.magic[0] == 'n' && h.magic[1] == '+' && h.magic[2] == '1' && h.magic[3] == '\0'))
    throw Error(Errc::BadMagic, "expected single-file magic \"n+1\"");
  for (int i = 0; i < 8; ++i) h.dim[i] = r.get<std::int16_t>(off::dim + 2 * i);
  h.intent_code = r.get<std::int16_t>(off::intent_code);
  h.datatype = r.get<std::int16_t>(off::datatype);
  h.bitpix = r.get<std::int16_t>(off::bitpix);
  for (int i = 0; i < 8; ++i) h.pixdim[i] = r.get<float>(off::pixdim + 4 * i);
  h.vox_offset = r.get<float>(off::vox_offset);
  h.scl_slope = r.get<float>(off::scl_slope);
  h.scl_inter = r.get<float>(off::scl_inter);
  h.xyzt_units = bytes[off::xyzt_units];
  std::memcpy(h.descrip.data(), bytes.data() + off::descrip, 80);
  h.qform_code = r.get<std::int16_t>(off::qform_code);
  h.sform_code = r.get<std::int16_t>(off::sform_code);
  for (int i = 0; i < 6; ++i) h.quatern[i] = r.get<float>(off::quatern_b + 4 * i);
  for (int row = 0; row < 3; ++row)
    for (int c = 0; c < 4; ++c) h.srow[row][c] = r.get<float>(off::srow_x + 16 * row + 4 * c);

  if (h.dim[0] < 1 || h.dim[0] > 7) throw Error(Errc::BadHeader, "dim[0] outside [1,7]");
  if (h.dim[0] != 3) throw Error(Errc::RankNotThree, "dim[0] = " + std::to_string(h.dim[0]));
  for (int i = 1; i <= 3; ++i)
    if (h.dim[i] < 1) throw Error(Errc::BadHeader, "non-positive extent");
  const int expected_bitpix = bitpix_for(h.datatype);
  if (expected_bitpix == 0)
    throw Error(Errc::UnsupportedDatatype, "datatype code " + std::to_string(h.datatype));
  if (h.bitpix != expected_bitpix) throw Error(Errc::BadHeader, "bitpix inconsistent with datatype");
  if (!(h.vox_offset >= kDataOffset)) throw Error(Errc::BadHeader, "vox_offset below 352");
  for (int i = 1; i <= 3; ++i)
    if (!(h.pixdim[i] > 0.0f) || !std::isfinite(h.pixdim[i]))
      throw Error(Errc::BadHeader, "non-positive voxel spacing");
  return h;
}

inline Grid grid_from_header(const NiftiHeader& h) {
  const Index3 ext{h.dim[1], h.dim[2], h.dim[3]};
  const Vec3 sp{h.pixdim[1], h.pixdim[2], h.pixdim[3]};
  if (h.sform_code > 0) {
    Affine a{};
    for (int row = 0; row < 3; ++row)
      for (int c = 0; c < 4; ++c) a[row][c] = h.srow[row][c];
    a[3] = {0, 0, 0, 1};
    return Grid(ext, sp, a);
  }
  if (h.qform_code > 0) return Grid(ext, sp, affine_from_quatern(h));
  return Grid(ext, sp);
}

/// Raw voxel values (before scl scaling) as doubles.
inline std::vector<double> decode_raw(std::span<const std::uint8_t> bytes, const NiftiHeader& h) {
  const std::size_t n = static_cast<std::size_t>(h.dim[1]) * h.dim[2] * h.dim[3];
  const std::size_t width = static_cast<std::size_t>(h.bitpix) / 8;
  const auto start = static_cast<std::size_t>(h.vox_offset);
  if (bytes.size() < start || bytes.size() - start < n * width)
    throw Error(Errc::TruncatedData, "payload shorter than header promises");
  const bool swap = host_is_little() == h.big_endian;
  ByteReader r(bytes, swap);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t o = start + i * width;
    switch (h.datatype) {
      case kUint8: out[i] = bytes[o]; break;
      case kInt16: out[i] = r.get<std::int16_t>(o); break;
      case kInt32: out[i] = r.get<std::int32_t>(o); break;
      case kFloat32: out[i] = r.get<float>(o); break;
      case kFloat64: out[i] = r.get<double>(o); break;
      default: throw Error(Errc::UnsupportedDatatype, "datatype");
    }
  }
  return out;
}

inline bool scaling_active(const NiftiHeader& h) {
  return h.scl_slope != 0.0f && std::isfinite(h.scl_slope) && std::isfinite(h.scl_inter);
}

}  // namespace nifti

/// Decodes a single-file NIfTI-1 byte stream (optionally gzip-wrapped).
inline NiftiImage read_nifti(std::span<const std::uint8_t> bytes) {
  if (is_gzip(bytes)) {
    const auto plain = gunzip(bytes);
    return read_nifti(plain);
  }
  NiftiImage img;
  img.header = nifti::parse_header(bytes);
  const auto raw = nifti::decode_raw(bytes, img.header);
  const Grid grid = nifti::grid_from_header(img.header);
  std::vector<float> data(raw.size());
  // slope 0 means "no scaling". Identity scaling skips the arithmetic so that
  // float32 payloads (including -0.0) come back bit-exactly.
  const bool scaled = nifti::scaling_active(img.header) &&
                      !(img.header.scl_slope == 1.0f && img.header.scl_inter == 0.0f);
  const double slope = img.header.scl_slope, inter = img.header.scl_inter;
  for (std::size_t i = 0; i < raw.size(); ++i)
    data[i] = static_cast<float>(scaled ? slope * raw[i] + inter : raw[i]);
  img.volume = Volume3D(grid, std::move(data));
  validate(img.volume);
  return img;
}

/// Encodes `vol` as little-endian float32 NIfTI-1 with vox_offset 352.
/// Descriptive fields (descrip, units, intent, qform) are copied from the seed.
inline std::vector<std::uint8_t> write_nifti(const Volume3D& vol,
                                             const std::optional<NiftiHeader>& header_seed = {}) {
  validate(vol);
  using namespace nifti;
  NiftiHeader h = header_seed.value_or(NiftiHeader{});
  std::vector<std::uint8_t> out(kDataOffset + vol.size() * 4, 0);
  put_le<std::int32_t>(out, off::sizeof_hdr, kHeaderSize);
  const std::array<std::int16_t, 8> dim{3,
                                        static_cast<std::int16_t>(vol.extents()[0]),
                                        static_cast<std::int16_t>(vol.extents()[1]),
                                        static_cast<std::int16_t>(vol.extents()[2]),
                                        1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put_le(out, off::dim + 2 * i, dim[i]);
  put_le<std::int16_t>(out, off::intent_code, h.intent_code);
  put_le<std::int16_t>(out, off::datatype, kFloat32);
  put_le<std::int16_t>(out, off::bitpix, 32);
  std::array<float, 8> pixdim{h.pixdim[0] < 0 ? -1.0f : 1.0f,
                              static_cast<float>(vol.spacing()[0]),
                              static_cast<float>(vol.spacing()[1]),
                              static_cast<float>(vol.spacing()[2]),
                              0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) put_le(out, off::pixdim + 4 * i, pixdim[i]);
  put_le<float>(out, off::vox_offset, static_cast<float>(kDataOffset));
  put_le<float>(out, off::scl_slope, 1.0f);
  put_le<float>(out, off::scl_inter, 0.0f);
  out[off::xyzt_units] = h.xyzt_units;
  std::memcpy(out.data() + off::descrip, h.descrip.data(), 80);
  put_le<std::int16_t>(out, off::qform_code, h.qform_code);
  put_le<std::int16_t>(out, off::sform_code, h.sform_code > 0 ? h.sform_code : std::int16_t{1});
  for (int i = 0; i < 6; ++i) put_le(out, off::quatern_b + 4 * i, h.quatern[i]);
  for (int row = 0; row < 3; ++row)
    for (int c = 0; c < 4; ++c)
      put_le(out, off::srow_x + 16 * row + 4 * c, static_cast<float>(vol.grid.affine[row][c]));
  std::memcpy(out.data() + off::magic, "n+1\0", 4);
  for (std::size_t i = 0; i < vol.size(); ++i) put_le(out, kDataOffset + 4 * i, vol.data[i]);
  return out;
}

/// Foreign-to-canonical label code table (identity 0..4 by default).
struct LabelMap {
  std::map<long, Label> codes{{0, Label::BG}, {1, Label::ET}, {2, Label::NET}, {3, Label::CC},
                              {4, Label::ED}};
};

/// Reads a segmentation; raw values must be integral and present in `map`.
inline LabelVolume read_label_nifti(std::span<const std::uint8_t> bytes,
                                    const LabelMap& map = {}) {
  if (is_gzip(bytes)) {
    const auto plain = gunzip(bytes);
    return read_label_nifti(plain, map);
  }
  const NiftiHeader h = nifti::parse_header(bytes);
  auto raw = nifti::decode_raw(bytes, h);
  if (nifti::scaling_active(h))
    for (auto& v : raw) v = h.scl_slope * v + h.scl_inter;
  LabelVolume lv(nifti::grid_from_header(h));
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = raw[i];
    if (!std::isfinite(v) || v != std::round(v))
      throw Error(Errc::CodeOutOfRange, "non-integral label value");
    const auto it = map.codes.find(static_cast<long>(v));
    if (it == map.codes.end())
      throw Error(Errc::CodeOutOfRange, "label code " + std::to_string(static_cast<long>(v)));
    lv.data[i] = it->second;
  }
  return lv;
}

inline Volume3D label_volume_as_float(const LabelVolume& lv) {
  Volume3D v(lv.grid);
  for (std::size_t i = 0; i < lv.size(); ++i) v.data[i] = static_cast<float>(lv.data[i]);
  return v;
}

inline std::vector<std::uint8_t> write_label_nifti(const LabelVolume& lv) {
  return write_nifti(label_volume_as_float(lv));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoError, "short write to " + path.string());
}

inline bool has_gz_suffix(const std::filesystem::path& p) { return p.extension() == ".gz"; }

inline Volume3D load_nifti(const std::filesystem::path& path) {
  return read_nifti(read_file_bytes(path)).volume;
}

inline LabelVolume load_label_nifti(const std::filesystem::path& path, const LabelMap& map = {}) {
  return read_label_nifti(read_file_bytes(path), map);
}

inline void save_nifti(const std::filesystem::path& path, const Volume3D& vol) {
  auto bytes = write_nifti(vol);
  if (has_gz_suffix(path)) bytes = gzip(bytes);
  write_file_bytes(path, bytes);
}

inline void save_label_nifti(const std::filesystem::path& path, const LabelVolume& lv) {
  save_nifti(path, label_volume_as_float(lv));
}

}  // namespace segcascade
