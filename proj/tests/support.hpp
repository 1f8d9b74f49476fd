#pragma once

// Independent oracles and random generators shared by the test suites. Nothing
// here calls the library routine it is used to check.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

#include <segcascade/random.hpp>
#include <segcascade/volume.hpp>

namespace testsupport {

using namespace segcascade;

// -- NIfTI byte builder -------------------------------------------------------

struct RawNifti {
  std::array<std::int16_t, 8> dim{3, 1, 1, 1, 1, 1, 1, 1};
  std::int16_t datatype = 16;
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{1, 1, 1, 1, 1, 1, 1, 1};
  float vox_offset = 352;
  float scl_slope = 0;
  float scl_inter = 0;
  std::int16_t qform_code = 0, sform_code = 0;
  std::array<float, 6> quatern{};
  std::array<std::array<float, 4>, 3> srow{};
  const char* magic = "n+1";
  std::vector<std::uint8_t> payload;  // already in file byte order
  bool big_endian = false;
};

template <class T>
void put(std::vector<std::uint8_t>& b, std::size_t off, T v, bool big) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) b[off + i] = raw[big ? sizeof(T) - 1 - i : i];
}

template <class T>
void append(std::vector<std::uint8_t>& b, T v, bool big) {
  b.resize(b.size() + sizeof(T));
  put(b, b.size() - sizeof(T), v, big);
}

/// Lays the header out field by field from the NIfTI-1 layout table.
inline std::vector<std::uint8_t> build(const RawNifti& n) {
  std::vector<std::uint8_t> b(352, 0);
  const bool be = n.big_endian;
  put<std::int32_t>(b, 0, 348, be);
  for (int i = 0; i < 8; ++i) put<std::int16_t>(b, 40 + 2 * i, n.dim[i], be);
  put<std::int16_t>(b, 70, n.datatype, be);
  put<std::int16_t>(b, 72, n.bitpix, be);
  for (int i = 0; i < 8; ++i) put<float>(b, 76 + 4 * i, n.pixdim[i], be);
  put<float>(b, 108, n.vox_offset, be);
  put<float>(b, 112, n.scl_slope, be);
  put<float>(b, 116, n.scl_inter, be);
  put<std::int16_t>(b, 252, n.qform_code, be);
  put<std::int16_t>(b, 254, n.sform_code, be);
  for (int i = 0; i < 6; ++i) put<float>(b, 256 + 4 * i, n.quatern[i], be);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) put<float>(b, 280 + 16 * r + 4 * c, n.srow[r][c], be);
  std::memcpy(b.data() + 344, n.magic, std::min<std::size_t>(4, std::strlen(n.magic) + 1));
  b.resize(static_cast<std::size_t>(n.vox_offset), 0);
  b.insert(b.end(), n.payload.begin(), n.payload.end());
  return b;
}

inline RawNifti float_volume(const Index3& e, const std::vector<float>& values, bool big = false) {
  RawNifti n;
  n.dim = {3, static_cast<std::int16_t>(e[0]), static_cast<std::int16_t>(e[1]), static_cast<std::int16_t>(e[2]),
           1, 1, 1, 1};
  n.big_endian = big;
  for (float v : values) append(n.payload, v, big);
  return n;
}

// -- random masks ----------------------------------------------------------------

inline Index3 random_extents(Rng& rng, int max_extent) {
  return {1 + static_cast<int>(rng.below(max_extent)), 1 + static_cast<int>(rng.below(max_extent)),
          1 + static_cast<int>(rng.below(max_extent))};
}

inline BinaryMask random_mask(Rng& rng, const Grid& g, double density) {
  BinaryMask m(g, 0);
  for (auto& v : m.data) v = rng.bernoulli(density);
  return m;
}

// -- brute-force oracles -------------------------------------------------------

inline double brute_dice(const BinaryMask& a, const BinaryMask& b) {
  long pa = 0, pb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa += a.data[i] != 0;
    pb += b.data[i] != 0;
    both += a.data[i] && b.data[i];
  }
  if (pa == 0 && pb == 0) return 1.0;
  return 2.0 * both / static_cast<double>(pa + pb);
}

inline double phys_dist(const Grid& g, const Index3& p, const Index3& q) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - q[a]) * g.spacing[a];
    s += d * d;
  }
  return std::sqrt(s);
}

inline std::vector<Index3> voxels_of(const BinaryMask& m) {
  std::vector<Index3> out;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.data[i]) out.push_back(m.grid.coords(i));
  return out;
}

inline bool is_surface(const BinaryMask& m, const Index3& p) {
  const int d[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (const auto& o : d) {
    const int x = p[0] + o[0], y = p[1] + o[1], z = p[2] + o[2];
    if (!m.grid.contains(x, y, z) || !m(x, y, z)) return true;
  }
  return false;
}

inline std::vector<Index3> surface_of(const BinaryMask& m) {
  std::vector<Index3> out;
  for (const auto& p : voxels_of(m))
    if (is_surface(m, p)) out.push_back(p);
  return out;
}

inline double min_dist(const Grid& g, const Index3& p, const std::vector<Index3>& set) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& q : set) best = std::min(best, phys_dist(g, p, q));
  return best;
}

/// Pairwise HD95 with linear interpolation at 0.95 (n - 1). Returns -1 when
/// exactly one mask is empty.
inline double brute_hd95(const BinaryMask& a, const BinaryMask& b) {
  const auto va = voxels_of(a), vb = voxels_of(b);
  if (va.empty() && vb.empty()) return 0.0;
  if (va.empty() || vb.empty()) return -1.0;
  const auto sa = surface_of(a), sb = surface_of(b);
  std::vector<double> d;
  for (const auto& p : sa) d.push_back(min_dist(a.grid, p, sb));
  for (const auto& p : sb) d.push_back(min_dist(a.grid, p, sa));
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * (d.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (d[hi] - d[lo]) * (pos - lo);
}

/// Full (100th percentile) symmetric Hausdorff distance over all voxels.
inline double brute_hausdorff(const BinaryMask& a, const BinaryMask& b) {
  const auto va = voxels_of(a), vb = voxels_of(b);
  double h = 0.0;
  for (const auto& p : va) h = std::max(h, min_dist(a.grid, p, vb));
  for (const auto& p : vb) h = std::max(h, min_dist(a.grid, p, va));
  return h;
}

/// Component labels by repeated relaxation (slow, obviously correct).
inline std::vector<int> brute_components(const BinaryMask& m, bool full26, int& count) {
  const auto& e = m.extents();
  std::vector<int> lab(m.size(), 0);
  int next = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m.data[i]) lab[i] = ++next;
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!lab[i]) continue;
      const auto p = m.grid.coords(i);
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
            if (manhattan == 0 || (!full26 && manhattan != 1)) continue;
            const int x = p[0] + dx, y = p[1] + dy, z = p[2] + dz;
            if (x < 0 || y < 0 || z < 0 || x >= e[0] || y >= e[1] || z >= e[2]) continue;
            const auto j = m.grid.index(x, y, z);
            if (lab[j] && lab[j] < lab[i]) {
              lab[i] = lab[j];
              changed = true;
            }
          }
    }
  }
  // Compact to 1..count.
  std::vector<int> remap(next + 1, 0);
  count = 0;
  for (auto& l : lab)
    if (l) {
      if (!remap[l]) remap[l] = ++count;
      l = remap[l];
    }
  return lab;
}

/// Lesion-wise Dice written directly from its definition: Chebyshev-ball
/// dilation by r, matched predicted components, FP components scoring 0.
inline double brute_lesionwise(const BinaryMask& pred, const BinaryMask& truth, bool full26, int r) {
  int nt = 0, np = 0;
  const auto tl = brute_components(truth, full26, nt);
  const auto pl = brute_components(pred, full26, np);
  if (nt == 0 && np == 0) return 1.0;
  std::vector<bool> used(np + 1, false);
  double sum = 0.0;
  const auto& g = truth.grid;
  for (int l = 1; l <= nt; ++l) {
    std::vector<bool> hit(np + 1, false);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (!pl[i] || hit[pl[i]]) continue;
      const auto p = g.coords(i);
      for (std::size_t j = 0; j < truth.size() && !hit[pl[i]]; ++j) {
        if (tl[j] != l) continue;
        const auto q = g.coords(j);
        if (std::abs(p[0] - q[0]) <= r && std::abs(p[1] - q[1]) <= r && std::abs(p[2] - q[2]) <= r) hit[pl[i]] = true;
      }
    }
    long inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool in_l = tl[i] == l;
      const bool in_m = pl[i] && hit[pl[i]];
      a += in_l;
      b += in_m;
      inter += in_l && in_m;
    }
    sum += 2.0 * inter / static_cast<double>(a + b);
    for (int c = 1; c <= np; ++c)
      if (hit[c]) used[c] = true;
  }
  int fp = 0;
  for (int c = 1; c <= np; ++c) fp += !used[c];
  return sum / (nt + fp);
}

}  // namespace testsupport
