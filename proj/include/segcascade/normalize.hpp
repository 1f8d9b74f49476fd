#pragma once

// Patient-level intensity normalisation: per modality, the greatest peak of the
// in-brain histogram is fitted with a Gaussian and the volume is divided by
// twice its mean, placing the peak at 0.5.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "study.hpp"
#include "volume.hpp"
#include "volume_core.hpp"

namespace segcascade {

struct GaussianPeakFit {
  double mean = 0.0;
  double sigma = 0.0;
  double amplitude = 0.0;
  double bin_width = 0.0;
  int window_lo = 0;  // inclusive bin indices of the half-peak window
  int window_hi = 0;
  double residual = 0.0;  // RMS of the log-count residual over the window
  bool window_too_narrow = false;
};

enum class FitFallback { None, WindowTooNarrow, Degenerate };

inline const char* to_string(FitFallback f) {
  switch (f) {
    case FitFallback::None: return "none";
    case FitFallback::WindowTooNarrow: return "window_too_narrow";
    case FitFallback::Degenerate: return "degenerate";
  }
  return "?";
}

struct NormalizationRecord {
  Modality modality = Modality::T1w;
  double divisor = 1.0;
  GaussianPeakFit fit;
  std::size_t mask_voxels = 0;
  FitFallback fallback = FitFallback::None;
};

/// Otsu threshold over a 256-bin histogram spanning [min, max]. Returns the
/// upper edge of the optimal lower class.
inline double otsu_threshold(std::span<const float> values, int n_bins = 256) {
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return lo;
  const double width = (hi - lo) / n_bins;
  std::vector<double> hist(n_bins, 0.0);
  for (float v : values) hist[std::min(n_bins - 1, static_cast<int>((v - lo) / width))] += 1.0;
  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (int i = 0; i < n_bins; ++i) sum_all += i * hist[i];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0;
  for (int t = 0; t < n_bins - 1; ++t) {
    w0 += hist[t];
    sum0 += t * hist[t];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = t;
    }
  }
  return lo + (best_bin + 1) * width;
}

/// Simplified brain extraction: largest 26-connected component above the Otsu
/// threshold, closed with radius 2 and hole-filled.
inline BinaryMask compute_brain_mask(const Volume3D& vol) {
  const auto [lo, hi] = std::minmax_element(vol.data.begin(), vol.data.end());
  if (!(*hi > 0.0f) || *lo == *hi) throw Error(Errc::EmptyVolume, "no positive, non-constant signal");
  const double t = otsu_threshold(vol.data);
  BinaryMask fg(vol.grid, 0);
  for (std::size_t i = 0; i < vol.size(); ++i) fg.data[i] = vol.data[i] > t;
  BinaryMask mask = largest_component(fg, Connectivity::TwentySix);
  mask = morphology(mask, MorphOp::Close, 2);
  mask = morphology(mask, MorphOp::FillHoles, 0);
  if (count_true(mask) == 0) throw Error(Errc::EmptyVolume, "empty brain mask");
  return mask;
}

/// Fits a Gaussian to the greatest histogram peak by least squares on log
/// counts over the contiguous half-peak window (closed-form log-parabola).
template <class T>
GaussianPeakFit fit_gaussian_peak(std::span<const T> intensities, int n_bins = 256) {
  if (intensities.size() < 100) throw Error(Errc::InvalidConfig, "fewer than 100 samples");
  if (n_bins < 16) throw Error(Errc::InvalidConfig, "n_bins below 16");
  const auto [lo_it, hi_it] = std::minmax_element(intensities.begin(), intensities.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) throw Error(Errc::DegenerateDistribution, "all samples identical");

  GaussianPeakFit fit;
  fit.bin_width = (hi - lo) / n_bins;
  std::vector<double> counts(n_bins, 0.0);
  for (T v : intensities)
    counts[std::min(n_bins - 1, static_cast<int>((static_cast<double>(v) - lo) / fit.bin_width))] += 1.0;
  const int peak = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  const double half = 0.5 * counts[peak];
  int wlo = peak, whi = peak;
  while (wlo > 0 && counts[wlo - 1] >= half) --wlo;
  while (whi < n_bins - 1 && counts[whi + 1] >= half) ++whi;
  fit.window_lo = wlo;
  fit.window_hi = whi;
  const auto center = [&](int b) { return lo + (b + 0.5) * fit.bin_width; };

  auto fall_back = [&] {
    fit.window_too_narrow = true;
    fit.mean = center(peak);
    fit.sigma = fit.bin_width;
    fit.amplitude = counts[peak];
    fit.residual = 0.0;
    return fit;
  };
  if (whi - wlo + 1 < 3) return fall_back();

  // Normal equations for log(count) = a + b*u + c*u^2 with u in bin units
  // relative to the peak bin.
  double s[5] = {0, 0, 0, 0, 0}, r[3] = {0, 0, 0};
  for (int b = wlo; b <= whi; ++b) {
    const double u = b - peak, y = std::log(counts[b]);
    double p = 1.0;
    for (int k = 0; k < 5; ++k, p *= u) {
      s[k] += p;
      if (k < 3) r[k] += p * y;
    }
  }
  double m[3][4] = {{s[0], s[1], s[2], r[0]}, {s[1], s[2], s[3], r[1]}, {s[2], s[3], s[4], r[2]}};
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int row = col + 1; row < 3; ++row)
      if (std::abs(m[row][col]) > std::abs(m[piv][col])) piv = row;
    std::swap(m[col], m[piv]);
    if (m[col][col] == 0.0) return fall_back();
    for (int row = 0; row < 3; ++row) {
      if (row == col) continue;
      const double f = m[row][col] / m[col][col];
      for (int k = col; k < 4; ++k) m[row][k] -= f * m[col][k];
    }
  }
  const double a = m[0][3] / m[0][0], b = m[1][3] / m[1][1], c = m[2][3] / m[2][2];
  if (!(c < 0.0)) return fall_back();
  const double u_mean = -b / (2.0 * c);
  fit.mean = std::clamp(center(peak) + u_mean * fit.bin_width, lo, hi);
  fit.sigma = std::sqrt(-1.0 / (2.0 * c)) * fit.bin_width;
  fit.amplitude = std::exp(a - b * b / (4.0 * c));
  double ss = 0.0;
  for (int bin = wlo; bin <= whi; ++bin) {
    const double u = bin - peak;
    const double e = std::log(counts[bin]) - (a + b * u + c * u * u);
    ss += e * e;
  }
  fit.residual = std::sqrt(ss / (whi - wlo + 1));
  return fit;
}

inline std::vector<float> masked_values(const Volume3D& vol, const BinaryMask& mask) {
  require_same_grid(vol.grid, mask.grid, "mask geometry differs from volume");
  std::vector<float> out;
  for (std::size_t i = 0; i < vol.size(); ++i)
    if (mask.data[i]) out.push_back(vol.data[i]);
  return out;
}

struct NormalizedVolume {
  Volume3D volume;
  NormalizationRecord record;
  BinaryMask mask;
};

/// Normalises one modality. A constant in-mask distribution uses that constant
/// as the peak mean.
inline NormalizedVolume normalize_volume(const Volume3D& vol, Modality modality, int n_bins = 256) {
  NormalizedVolume out;
  out.mask = compute_brain_mask(vol);
  const auto samples = masked_values(vol, out.mask);
  out.record.modality = modality;
  out.record.mask_voxels = samples.size();
  try {
    out.record.fit = fit_gaussian_peak<float>(samples, n_bins);
    if (out.record.fit.window_too_narrow) out.record.fallback = FitFallback::WindowTooNarrow;
  } catch (const Error& e) {
    if (e.code() != Errc::DegenerateDistribution) throw;
    out.record.fallback = FitFallback::Degenerate;
    out.record.fit = GaussianPeakFit{};
    out.record.fit.mean = samples.front();
    out.record.fit.window_too_narrow = true;
  }
  out.record.divisor = 2.0 * out.record.fit.mean;
  if (!(out.record.divisor > 0.0))
    throw Error(Errc::DegenerateDistribution, "non-positive peak mean");
  out.volume = vol;
  for (auto& v : out.volume.data) v = static_cast<float>(v / out.record.divisor);
  return out;
}

struct NormalizedStudy {
  MultiModalStudy study;
  std::array<NormalizationRecord, 4> records;
};

inline NormalizedStudy normalize_study(const MultiModalStudy& study, int n_bins = 256) {
  validate(study);
  NormalizedStudy out;
  out.study.case_id = study.case_id;
  for (auto m : kAllModalities) {
    try {
      auto n = normalize_volume(study[m], m, n_bins);
      out.study[m] = std::move(n.volume);
      out.records[static_cast<int>(m)] = n.record;
    } catch (const Error& e) {
      throw Error(e.code(), std::string(to_string(m)) + " of " + study.case_id + ": " + e.what());
    }
  }
  return out;
}

}  // namespace segcascade
