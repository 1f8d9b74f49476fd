#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "error.hpp"
#include "volume.hpp"

namespace segcascade {

enum class Connectivity { Six = 6, TwentySix = 26 };

struct ComponentLabeling {
  Volume<std::int32_t> labels;  // 0 = background, components numbered from 1
  int count = 0;
  std::vector<std::size_t> sizes;  // sizes[i] is the voxel count of component i + 1
};

namespace detail {

inline std::vector<Index3> neighbor_offsets(Connectivity conn) {
  std::vector<Index3> offs;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (conn == Connectivity::Six && manhattan != 1) continue;
        offs.push_back({dx, dy, dz});
      }
  return offs;
}

}  // namespace detail

/// Labels maximal connected foreground regions. Components are numbered in
/// ascending order of their first voxel's linear index.
template <class T>
ComponentLabeling connected_components(const Volume<T>& mask,
                                       Connectivity conn = Connectivity::TwentySix) {
  const Grid& g = mask.grid;
  ComponentLabeling out{Volume<std::int32_t>(g, 0), 0, {}};
  const auto offs = detail::neighbor_offsets(conn);
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < mask.size(); ++seed) {
    if (!mask.data[seed] || out.labels.data[seed] != 0) continue;
    const int label = ++out.count;
    std::size_t size = 0;
    out.labels.data[seed] = label;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++size;
      const auto [x, y, z] = g.coords(cur);
      for (const auto& o : offs) {
        const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
        if (!g.contains(nx, ny, nz)) continue;
        const std::size_t ni = g.index(nx, ny, nz);
        if (mask.data[ni] && out.labels.data[ni] == 0) {
          out.labels.data[ni] = label;
          stack.push_back(ni);
        }
      }
    }
    out.sizes.push_back(size);
  }
  return out;
}

/// Mask of the largest component (ties: lowest label).
inline BinaryMask largest_component(const BinaryMask& mask,
                                    Connectivity conn = Connectivity::TwentySix) {
  const auto cc = connected_components(mask, conn);
  BinaryMask out(mask.grid, 0);
  if (cc.count == 0) return out;
  const auto best = static_cast<int>(std::max_element(cc.sizes.begin(), cc.sizes.end()) -
                                     cc.sizes.begin()) + 1;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = cc.labels.data[i] == best;
  return out;
}

namespace detail {

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) along one line,
// sample positions i * spacing. f holds squared distances (inf = no seed).
inline void squared_edt_line(std::vector<double>& f, double spacing, std::vector<int>& v,
                             std::vector<double>& z, std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double pq = q * spacing;
    while (k >= 0) {
      const double pv = v[k] * spacing;
      const double s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (s <= z[k]) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    if (k == 0) {
      z[k] = -inf;
    } else {
      const double pv = v[k - 1] * spacing;
      z[k] = ((f[q] + pq * pq) - (f[v[k - 1]] + pv * pv)) / (2.0 * (pq - pv));
    }
    z[k + 1] = inf;
  }
  out.assign(n, inf);
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double pq = q * spacing;
    while (z[j + 1] < pq) ++j;
    const double d = (q - v[j]) * spacing;
    out[q] = d * d + f[v[j]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance (mm^2) to the nearest foreground voxel
/// centre, computed separably per axis. Double precision throughout.
template <class T>
Volume<double> squared_distance_transform(const Volume<T>& mask) {
  const Grid& g = mask.grid;
  const double inf = std::numeric_limits<double>::infinity();
  Volume<double> d(g, inf);
  bool any = false;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.data[i]) {
      d.data[i] = 0.0;
      any = true;
    }
  if (!any) throw Error(Errc::EmptyMask, "distance transform of an empty mask");

  std::vector<double> line, out, z;
  std::vector<int> v;
  auto pass = [&](int axis) {
    const int n = g.extents[axis];
    const double sp = g.spacing[axis];
    const int a1 = axis == 0 ? 1 : 0;
    const int a2 = axis == 2 ? 1 : 2;
    for (int j = 0; j < g.extents[a2]; ++j)
      for (int i = 0; i < g.extents[a1]; ++i) {
        line.resize(n);
        Index3 c{};
        c[a1] = i;
        c[a2] = j;
        for (int t = 0; t < n; ++t) {
          c[axis] = t;
          line[t] = d(c[0], c[1], c[2]);
        }
        detail::squared_edt_line(line, sp, v, z, out);
        for (int t = 0; t < n; ++t) {
          c[axis] = t;
          d(c[0], c[1], c[2]) = out[t];
        }
      }
  };
  pass(0);
  pass(1);
  pass(2);
  return d;
}

/// Euclidean distance in mm to the nearest foreground voxel; 0 on foreground.
template <class T>
Volume3D distance_transform(const Volume<T>& mask) {
  const auto sq = squared_distance_transform(mask);
  Volume3D out(mask.grid);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<float>(std::sqrt(sq.data[i]));
  return out;
}

enum class MorphOp { Dilate, Erode, Close, Open, FillHoles };

namespace detail {

// Max (dilate) or min (erode) over a (2r+1)^3 window, clipped at the volume
// border. Equals r iterations of the 26-neighbourhood operator.
inline BinaryMask box_filter(const BinaryMask& in, int r, bool dilate) {
  BinaryMask cur = in;
  const Grid& g = in.grid;
  for (int axis = 0; axis < 3; ++axis) {
    BinaryMask next(g, 0);
    const int n = g.extents[axis];
    for (std::size_t i = 0; i < cur.size(); ++i) {
      const auto c = g.coords(i);
      const int lo = std::max(0, c[axis] - r), hi = std::min(n - 1, c[axis] + r);
      bool acc = !dilate;
      Index3 p = c;
      for (int t = lo; t <= hi; ++t) {
        p[axis] = t;
        const bool v = cur(p[0], p[1], p[2]) != 0;
        if (dilate && v) {
          acc = true;
          break;
        }
        if (!dilate && !v) {
          acc = false;
          break;
        }
      }
      next.data[i] = acc;
    }
    cur = std::move(next);
  }
  return cur;
}

inline BinaryMask fill_holes(const BinaryMask& in) {
  BinaryMask background(in.grid, 0);
  for (std::size_t i = 0; i < in.size(); ++i) background.data[i] = !in.data[i];
  const auto cc = connected_components(background, Connectivity::Six);
  std::vector<bool> touches(cc.count + 1, false);
  const Grid& g = in.grid;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const int l = cc.labels.data[i];
    if (l == 0) continue;
    const auto [x, y, z] = g.coords(i);
    if (x == 0 || y == 0 || z == 0 || x == g.extents[0] - 1 || y == g.extents[1] - 1 ||
        z == g.extents[2] - 1)
      touches[l] = true;
  }
  BinaryMask out = in;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const int l = cc.labels.data[i];
    if (l != 0 && !touches[l]) out.data[i] = 1;
  }
  return out;
}

}  // namespace detail

/// Binary morphology with a (2r+1)^3 structuring element. FillHoles ignores
/// `radius` and fills 6-connected background pockets not touching the border.
inline BinaryMask morphology(const BinaryMask& mask, MorphOp op, int radius_voxels) {
  if (radius_voxels < 0) throw Error(Errc::InvalidConfig, "negative morphology radius");
  switch (op) {
    case MorphOp::FillHoles: return detail::fill_holes(mask);
    case MorphOp::Dilate:
      return radius_voxels == 0 ? mask : detail::box_filter(mask, radius_voxels, true);
    case MorphOp::Erode:
      return radius_voxels == 0 ? mask : detail::box_filter(mask, radius_voxels, false);
    case MorphOp::Close:
      if (radius_voxels == 0) return mask;
      return detail::box_filter(detail::box_filter(mask, radius_voxels, true), radius_voxels, false);
    case MorphOp::Open:
      if (radius_voxels == 0) return mask;
      return detail::box_filter(detail::box_filter(mask, radius_voxels, false), radius_voxels, true);
  }
  return mask;
}

/// Grid with `extents` covering the same physical field of view as `g`.
inline Grid resampled_grid(const Grid& g, const Index3& extents) {
  Grid out = g;
  out.extents = extents;
  for (int a = 0; a < 3; ++a) {
    const double ratio = static_cast<double>(g.extents[a]) / extents[a];
    out.spacing[a] = g.spacing[a] * ratio;
    for (int r = 0; r < 3; ++r) out.affine[r][a] = g.affine[r][a] * ratio;
    // Keep the field-of-view corner fixed: the new first centre sits half a
    // new voxel inside the old corner.
    for (int r = 0; r < 3; ++r) out.affine[r][3] += g.affine[r][a] * 0.5 * (ratio - 1.0);
  }
  return out;
}

inline Index3 reduced_extents(const Index3& e, double factor) {
  Index3 out;
  for (int a = 0; a < 3; ++a) out[a] = std::max(1, static_cast<int>(std::lround(e[a] / factor)));
  return out;
}

namespace detail {

// Continuous source index of target voxel i: centres map through the shared
// field of view, clamped to the source lattice.
inline double source_coord(int i, int n_src, int n_dst) {
  const double c = (i + 0.5) * static_cast<double>(n_src) / n_dst - 0.5;
  return std::clamp(c, 0.0, static_cast<double>(n_src - 1));
}

}  // namespace detail

/// Trilinear resampling onto `extents` over the same field of view.
inline Volume3D resample_to(const Volume3D& vol, const Index3& extents) {
  if (extents == vol.extents()) return vol;
  const Grid dst = resampled_grid(vol.grid, extents);
  Volume3D out(dst);
  const auto& se = vol.extents();
  for (int z = 0; z < extents[2]; ++z) {
    const double cz = detail::source_coord(z, se[2], extents[2]);
    const int z0 = static_cast<int>(std::floor(cz));
    const int z1 = std::min(z0 + 1, se[2] - 1);
    const double fz = cz - z0;
    for (int y = 0; y < extents[1]; ++y) {
      const double cy = detail::source_coord(y, se[1], extents[1]);
      const int y0 = static_cast<int>(std::floor(cy));
      const int y1 = std::min(y0 + 1, se[1] - 1);
      const double fy = cy - y0;
      for (int x = 0; x < extents[0]; ++x) {
        const double cx = detail::source_coord(x, se[0], extents[0]);
        const int x0 = static_cast<int>(std::floor(cx));
        const int x1 = std::min(x0 + 1, se[0] - 1);
        const double fx = cx - x0;
        auto at = [&](int xx, int yy, int zz) { return static_cast<double>(vol(xx, yy, zz)); };
        const double c00 = at(x0, y0, z0) * (1 - fx) + at(x1, y0, z0) * fx;
        const double c10 = at(x0, y1, z0) * (1 - fx) + at(x1, y1, z0) * fx;
        const double c01 = at(x0, y0, z1) * (1 - fx) + at(x1, y0, z1) * fx;
        const double c11 = at(x0, y1, z1) * (1 - fx) + at(x1, y1, z1) * fx;
        const double c0 = c00 * (1 - fy) + c10 * fy;
        const double c1 = c01 * (1 - fy) + c11 * fy;
        out(x, y, z) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  return out;
}

/// Nearest-neighbour resampling; output codes stay within the input's code set.
template <class T>
Volume<T> resample_nearest_to(const Volume<T>& vol, const Index3& extents) {
  if (extents == vol.extents()) return vol;
  Volume<T> out(resampled_grid(vol.grid, extents));
  const auto& se = vol.extents();
  Index3 c;
  for (int z = 0; z < extents[2]; ++z)
    for (int y = 0; y < extents[1]; ++y)
      for (int x = 0; x < extents[0]; ++x) {
        const Index3 p{x, y, z};
        for (int a = 0; a < 3; ++a)
          c[a] = std::min(se[a] - 1,
                          static_cast<int>(std::floor(detail::source_coord(p[a], se[a], extents[a]) + 0.5)));
        out(x, y, z) = vol(c[0], c[1], c[2]);
      }
  return out;
}

/// Reduces resolution by `factor` (>= 1) while keeping the physical field of view.
inline Volume3D resample(const Volume3D& vol, double factor) {
  if (!(factor >= 1.0)) throw Error(Errc::InvalidConfig, "resample factor must be >= 1");
  return resample_to(vol, reduced_extents(vol.extents(), factor));
}

inline LabelVolume resample(const LabelVolume& lv, double factor) {
  if (!(factor >= 1.0)) throw Error(Errc::InvalidConfig, "resample factor must be >= 1");
  return resample_nearest_to(lv, reduced_extents(lv.extents(), factor));
}

}  // namespace segcascade
