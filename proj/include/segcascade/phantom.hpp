#pragma once

// Synthetic multi-modal cohort. Geometry is expressed as fractions of the
// smallest extent so the same spec rasterises sensibly at 16^3 or 32^3.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "error.hpp"
#include "random.hpp"
#include "study.hpp"
#include "volume.hpp"
#include "volume_core.hpp"

namespace segcascade {

enum class TissueRegion { Brain = 0, ET = 1, NET = 2, CC = 3, ED = 4 };

/// Mean intensity per (tissue region, modality); background is 0.
using ContrastTable = std::array<std::array<double, 4>, 5>;

inline ContrastTable default_contrast() {
  //          T1w   T1wCE  T2w   FLAIR
  return {{{100.0, 100.0, 80.0, 90.0},     // brain
           {90.0, 200.0, 110.0, 120.0},    // ET: enhances on T1wCE
           {80.0, 110.0, 130.0, 140.0},    // NET
           {40.0, 50.0, 220.0, 110.0},     // CC: dark T1w, bright T2w
           {85.0, 100.0, 170.0, 180.0}}};  // ED: bright T2w/FLAIR, flat on T1wCE
}

struct PhantomSpec {
  Index3 extents{32, 32, 32};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 brain_radii{0.42, 0.45, 0.40};  // fraction of the smallest extent
  double brain_jitter = 0.02;
  bool tumor = true;
  double tc_radius_min = 0.17;
  double tc_radius_max = 0.22;
  double tumor_offset = 0.04;       // max centre displacement from the brain centre
  double et_rim = 0.06;             // rim thickness as a fraction; at least one voxel
  double cc_radius = 0.09;          // at least one voxel
  double ed_shell_min = 0.06;
  double ed_shell_max = 0.09;
  ContrastTable contrast = default_contrast();
  double noise_sigma = 5.0;
  double p_cc = 0.4;
  double p_ed = 0.5;
};

inline void validate(const PhantomSpec& s) {
  for (int a = 0; a < 3; ++a) {
    if (s.extents[a] < 8) throw Error(Errc::SpecGeometryError, "phantom extents must be >= 8");
    if (!(s.spacing[a] > 0.0)) throw Error(Errc::SpecGeometryError, "non-positive spacing");
    if (!(s.brain_radii[a] > 0.0 && s.brain_radii[a] <= 0.5))
      throw Error(Errc::SpecGeometryError, "brain radii must lie in (0, 0.5]");
  }
  if (!(s.p_cc >= 0.0 && s.p_cc <= 1.0) || !(s.p_ed >= 0.0 && s.p_ed <= 1.0))
    throw Error(Errc::InvalidConfig, "presence probabilities must lie in [0, 1]");
  if (!(s.noise_sigma >= 0.0)) throw Error(Errc::InvalidConfig, "negative noise sigma");
  if (!(s.tc_radius_min > 0.0 && s.tc_radius_max >= s.tc_radius_min))
    throw Error(Errc::SpecGeometryError, "bad tumour radius range");
  if (!(s.ed_shell_min > 0.0 && s.ed_shell_max >= s.ed_shell_min))
    throw Error(Errc::SpecGeometryError, "bad edema shell range");
  for (const auto& row : s.contrast)
    for (double v : row)
      if (!(v > 0.0)) throw Error(Errc::InvalidConfig, "contrast table entries must be > 0");
}

struct PhantomCase {
  MultiModalStudy study;
  LabelVolume truth;
  bool has_cc = false;
  bool has_ed = false;
  std::uint64_t seed = 0;
  double ed_shell_mm = 0.0;  // configured shell thickness for this case
};

inline PhantomCase generate_phantom(const PhantomSpec& spec, std::uint64_t seed,
                                    const std::string& case_id = "phantom") {
  validate(spec);
  Rng rng(seed);
  const Grid grid(spec.extents, spec.spacing);
  const double unit = *std::min_element(spec.extents.begin(), spec.extents.end());
  Vec3 centre;
  for (int a = 0; a < 3; ++a) centre[a] = (spec.extents[a] - 1) / 2.0;

  // Voxel-unit ellipsoid radius test.
  auto rho2 = [](const Index3& p, const Vec3& c, const Vec3& r) {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) s += ((p[a] - c[a]) / r[a]) * ((p[a] - c[a]) / r[a]);
    return s;
  };

  Vec3 brain_c = centre, brain_r;
  for (int a = 0; a < 3; ++a) {
    brain_c[a] += rng.uniform(-1.0, 1.0) * spec.brain_jitter * unit;
    brain_r[a] = (spec.brain_radii[a] + rng.uniform(-1.0, 1.0) * spec.brain_jitter) * unit;
  }

  // Draw order is fixed so that toggling presence never shifts other draws.
  Vec3 tc_c = brain_c, tc_r;
  for (int a = 0; a < 3; ++a) {
    tc_c[a] += rng.uniform(-1.0, 1.0) * spec.tumor_offset * unit;
    tc_r[a] = rng.uniform(spec.tc_radius_min, spec.tc_radius_max) * unit;
  }
  // Distances below are in mm. Keep the shell at least one voxel thick or it
  // can rasterise to nothing.
  const double mm = *std::min_element(spec.spacing.begin(), spec.spacing.end());
  const double shell = std::max(1.0, rng.uniform(spec.ed_shell_min, spec.ed_shell_max) * unit) * mm;
  Vec3 cc_dir;
  for (auto& d : cc_dir) d = rng.uniform(-0.3, 0.3);
  const bool want_cc = rng.bernoulli(spec.p_cc);
  const bool want_ed = rng.bernoulli(spec.p_ed);

  PhantomCase out;
  out.seed = seed;
  out.study.case_id = case_id;
  out.truth = LabelVolume(grid, Label::BG);
  BinaryMask brain(grid, 0), tc(grid, 0);
  for (std::size_t i = 0; i < grid.voxels(); ++i) {
    const auto p = grid.coords(i);
    brain.data[i] = rho2(p, brain_c, brain_r) <= 1.0;
    tc.data[i] = spec.tumor && rho2(p, tc_c, tc_r) <= 1.0;
  }
  if (spec.tumor) {
    if (count_true(tc) == 0) throw Error(Errc::SpecGeometryError, "tumour core rasterised to nothing");
    // ET rim = core voxels within the rim thickness of the core boundary.
    BinaryMask outside(grid, 0);
    for (std::size_t i = 0; i < grid.voxels(); ++i) outside.data[i] = !tc.data[i];
    const double rim = std::max(1.0, spec.et_rim * unit) * mm;
    const double cc_r = std::max(1.0, spec.cc_radius * unit);
    Vec3 cc_c;
    for (int a = 0; a < 3; ++a) cc_c[a] = std::round(tc_c[a] + cc_dir[a] * tc_r[a]);
    const bool has_outside = count_true(outside) > 0;
    const auto d_out = has_outside ? distance_transform(outside) : Volume3D(grid, 1e9f);
    for (std::size_t i = 0; i < grid.voxels(); ++i) {
      if (!tc.data[i]) continue;
      out.truth.data[i] = d_out.data[i] <= rim ? Label::ET : Label::NET;
      if (want_cc && rho2(grid.coords(i), cc_c, {cc_r, cc_r, cc_r}) <= 1.0) out.truth.data[i] = Label::CC;
    }
    if (want_ed) {
      const auto d_tc = distance_transform(tc);
      for (std::size_t i = 0; i < grid.voxels(); ++i)
        if (!tc.data[i] && d_tc.data[i] <= shell) out.truth.data[i] = Label::ED;
    }
    for (std::size_t i = 0; i < grid.voxels(); ++i)
      if (out.truth.data[i] != Label::BG && !brain.data[i])
        throw Error(Errc::SpecGeometryError, "tumour extends outside the brain");
  }
  out.has_cc = count_value(out.truth, Label::CC) > 0;
  out.has_ed = count_value(out.truth, Label::ED) > 0;
  out.ed_shell_mm = shell;

  // Noise streams are per modality so intensities do not depend on draw order.
  for (auto m : kAllModalities) {
    Rng noise(derive_seed(seed, 100 + static_cast<std::uint64_t>(m)));
    Volume3D v(grid, 0.0f);
    for (std::size_t i = 0; i < grid.voxels(); ++i) {
      if (!brain.data[i]) continue;
      const int region = static_cast<int>(out.truth.data[i]);  // BG inside brain means healthy tissue
      const double mean = spec.contrast[region][static_cast<int>(m)];
      v.data[i] = static_cast<float>(std::max(1.0, noise.normal(mean, spec.noise_sigma)));
    }
    out.study[m] = std::move(v);
  }
  return out;
}

inline std::string phantom_case_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu", i);
  return buf;
}

/// n cases from per-case derived seeds; case i uses derive_seed(seed, i).
inline std::vector<PhantomCase> generate_cohort(const PhantomSpec& spec, std::size_t n, std::uint64_t seed,
                                                std::size_t first_index = 0) {
  if (n < 1) throw Error(Errc::InvalidConfig, "cohort size must be >= 1");
  std::vector<PhantomCase> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto idx = first_index + i;
    out.push_back(generate_phantom(spec, derive_seed(seed, idx), phantom_case_id(idx)));
  }
  return out;
}

}  // namespace segcascade
