#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "error.hpp"

namespace segcascade {

using Index3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;
using Affine = std::array<std::array<double, 4>, 4>;

inline Affine diagonal_affine(const Vec3& spacing) {
  Affine a{};
  for (int i = 0; i < 3; ++i) a[i][i] = spacing[i];
  a[3][3] = 1.0;
  return a;
}

/// Voxel lattice shared by every volume of a study: extents, spacing (mm) and
/// the voxel-to-world affine. Data is stored x-fastest.
struct Grid {
  Index3 extents{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Affine affine = diagonal_affine({1.0, 1.0, 1.0});

  Grid() = default;
  Grid(Index3 ext, Vec3 sp) : extents(ext), spacing(sp), affine(diagonal_affine(sp)) {}
  Grid(Index3 ext, Vec3 sp, const Affine& a) : extents(ext), spacing(sp), affine(a) {}

  std::size_t voxels() const {
    return static_cast<std::size_t>(extents[0]) * extents[1] * extents[2];
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * extents[1] + y) * extents[0] + x;
  }
  Index3 coords(std::size_t i) const {
    const auto nx = static_cast<std::size_t>(extents[0]);
    const auto ny = static_cast<std::size_t>(extents[1]);
    return {static_cast<int>(i % nx), static_cast<int>((i / nx) % ny),
            static_cast<int>(i / (nx * ny))};
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < extents[0] && y < extents[1] && z < extents[2];
  }
  bool valid() const {
    for (int i = 0; i < 3; ++i)
      if (extents[i] < 1 || !(spacing[i] > 0.0) || !std::isfinite(spacing[i])) return false;
    return true;
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

inline void require_same_grid(const Grid& a, const Grid& b, const char* what) {
  if (a.extents != b.extents || a.spacing != b.spacing || a.affine != b.affine)
    throw Error(Errc::GeometryMismatch, what);
}

/// Dense 3D grid of values. Volume3D, BinaryMask and LabelVolume are all
/// instantiations of this template.
template <class T>
struct Volume {
  Grid grid;
  std::vector<T> data;

  Volume() = default;
  explicit Volume(const Grid& g, T fill = T{}) : grid(g), data(g.voxels(), fill) {}
  Volume(const Grid& g, std::vector<T> values) : grid(g), data(std::move(values)) {
    if (data.size() != grid.voxels())
      throw Error(Errc::InvalidVolume, "data length does not match extents");
  }

  const Index3& extents() const { return grid.extents; }
  const Vec3& spacing() const { return grid.spacing; }
  std::size_t size() const { return data.size(); }

  T& operator()(int x, int y, int z) { return data[grid.index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data[grid.index(x, y, z)]; }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  friend bool operator==(const Volume&, const Volume&) = default;
};

using Volume3D = Volume<float>;
using BinaryMask = Volume<std::uint8_t>;

/// Canonical tumour sub-region codes.
enum class Label : std::uint8_t { BG = 0, ET = 1, NET = 2, CC = 3, ED = 4 };

inline constexpr std::array<Label, 5> kAllLabels{Label::BG, Label::ET, Label::NET, Label::CC,
                                                 Label::ED};

inline const char* to_string(Label l) {
  switch (l) {
    case Label::BG: return "BG";
    case Label::ET: return "ET";
    case Label::NET: return "NET";
    case Label::CC: return "CC";
    case Label::ED: return "ED";
  }
  return "?";
}

using LabelVolume = Volume<Label>;

inline std::size_t count_true(const BinaryMask& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += v != 0;
  return n;
}

template <class T>
std::size_t count_value(const Volume<T>& v, T value) {
  std::size_t n = 0;
  for (const auto& x : v.data) n += x == value;
  return n;
}

inline void validate(const Volume3D& v) {
  if (!v.grid.valid()) throw Error(Errc::InvalidVolume, "bad extents or spacing");
  if (v.data.size() != v.grid.voxels()) throw Error(Errc::InvalidVolume, "data length mismatch");
  for (float x : v.data)
    if (!std::isfinite(x)) throw Error(Errc::NonFiniteData, "volume contains NaN or Inf");
}

}  // namespace segcascade
