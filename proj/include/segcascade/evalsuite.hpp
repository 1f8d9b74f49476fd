#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "label_algebra.hpp"
#include "volume.hpp"
#include "volume_core.hpp"

namespace segcascade {

/// Regions reported per case, in report order.
inline constexpr std::array<RegionId, 6> kEvalRegions{RegionId::ET, RegionId::NET, RegionId::CC,
                                                      RegionId::ED, RegionId::TC, RegionId::WT};

/// Column order of the cohort summary.
inline constexpr std::array<RegionId, 6> kSummaryColumns{RegionId::ET, RegionId::TC, RegionId::WT,
                                                         RegionId::NET, RegionId::CC, RegionId::ED};

/// Reporting name; NET is published as NETC.
inline std::string report_name(RegionId r) { return r == RegionId::NET ? "NETC" : to_string(r); }

struct LesionMatchParams {
  Connectivity connectivity = Connectivity::TwentySix;
  int gt_dilation_voxels = 3;
};

inline void validate(const LesionMatchParams& p) {
  if (p.gt_dilation_voxels < 0) throw Error(Errc::InvalidConfig, "gt_dilation_voxels must be >= 0");
}

/// 2|P n T| / (|P| + |T|); both empty gives 1, exactly one empty gives 0.
inline double dice(const BinaryMask& pred, const BinaryMask& truth) {
  require_same_grid(pred.grid, truth.grid, "dice: geometry mismatch");
  std::size_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.data[i] != 0, b = truth.data[i] != 0;
    p += a;
    t += b;
    both += a && b;
  }
  if (p == 0 && t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

/// Lesion-wise Dice. Each truth component is dilated by the configured radius
/// (cubic structuring element); predicted components overlapping that extent
/// are matched to it and the lesion scores Dice(lesion, union of matches).
/// Predicted components matched to no lesion enter the mean with score 0.
inline double lesionwise_dice(const BinaryMask& pred, const BinaryMask& truth, const LesionMatchParams& params = {}) {
  require_same_grid(pred.grid, truth.grid, "lesionwise_dice: geometry mismatch");
  validate(params);
  const auto tl = connected_components(truth, params.connectivity);
  const auto pl = connected_components(pred, params.connectivity);
  if (tl.count == 0 && pl.count == 0) return 1.0;

  std::vector<char> pred_matched(pl.count + 1, 0);
  double sum = 0.0;
  BinaryMask lesion(truth.grid, 0), matched(truth.grid, 0);
  for (int l = 1; l <= tl.count; ++l) {
    for (std::size_t i = 0; i < lesion.size(); ++i) lesion.data[i] = tl.labels.data[i] == l;
    const auto grown = morphology(lesion, MorphOp::Dilate, params.gt_dilation_voxels);
    std::vector<char> hit(pl.count + 1, 0);
    for (std::size_t i = 0; i < grown.size(); ++i)
      if (grown.data[i] && pl.labels.data[i] > 0) hit[pl.labels.data[i]] = 1;
    for (std::size_t i = 0; i < matched.size(); ++i) matched.data[i] = hit[std::max(0, pl.labels.data[i])];
    for (int c = 1; c <= pl.count; ++c)
      if (hit[c]) pred_matched[c] = 1;
    sum += dice(matched, lesion);
  }
  int false_positives = 0;
  for (int c = 1; c <= pl.count; ++c) false_positives += !pred_matched[c];
  return sum / static_cast<double>(tl.count + false_positives);
}

/// Foreground voxels with at least one 6-neighbour in background or outside
/// the lattice.
inline BinaryMask surface_voxels(const BinaryMask& m) {
  const auto& e = m.extents();
  BinaryMask s(m.grid, 0);
  static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int z = 0; z < e[2]; ++z)
    for (int y = 0; y < e[1]; ++y)
      for (int x = 0; x < e[0]; ++x) {
        if (!m(x, y, z)) continue;
        for (const auto& o : off) {
          const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!m.grid.contains(nx, ny, nz) || !m(nx, ny, nz)) {
            s(x, y, z) = 1;
            break;
          }
        }
      }
  return s;
}

/// Linear interpolation between order statistics at q * (n - 1).
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(Errc::InvalidConfig, "percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

/// 95th percentile of the symmetric surface-to-surface distances in mm.
/// Both empty gives 0; exactly one empty gives nullopt (undefined, excluded
/// from cohort means).
inline std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& truth) {
  require_same_grid(pred.grid, truth.grid, "hd95: geometry mismatch");
  const bool pe = count_true(pred) == 0, te = count_true(truth) == 0;
  if (pe && te) return 0.0;
  if (pe || te) return std::nullopt;
  const auto ps = surface_voxels(pred), ts = surface_voxels(truth);
  const auto to_t = squared_distance_transform(ts);
  const auto to_p = squared_distance_transform(ps);
  std::vector<double> d;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps.data[i]) d.push_back(std::sqrt(to_t.data[i]));
    if (ts.data[i]) d.push_back(std::sqrt(to_p.data[i]));
  }
  return percentile(std::move(d), 0.95);
}

struct RegionReport {
  RegionId region = RegionId::ET;
  double dice = 0.0;
  double lesionwise_dice = 0.0;
  std::optional<double> hd95_mm;
  bool pred_empty = false;
  bool truth_empty = false;
};

struct EvalReport {
  std::string case_id;
  std::vector<RegionReport> regions;  // kEvalRegions order

  const RegionReport& operator[](RegionId r) const {
    for (const auto& x : regions)
      if (x.region == r) return x;
    throw Error(Errc::InvalidConfig, std::string("region not evaluated: ") + to_string(r));
  }
};

inline EvalReport evaluate_case(const LabelVolume& pred, const LabelVolume& truth, const LesionMatchParams& params = {},
                                const std::string& case_id = {}) {
  require_same_grid(pred.grid, truth.grid, "evaluate_case: geometry mismatch");
  EvalReport rep;
  rep.case_id = case_id;
  for (auto r : kEvalRegions) {
    const auto p = derive_region(pred, r), t = derive_region(truth, r);
    RegionReport rr;
    rr.region = r;
    rr.pred_empty = count_true(p) == 0;
    rr.truth_empty = count_true(t) == 0;
    rr.dice = dice(p, t);
    rr.lesionwise_dice = lesionwise_dice(p, t, params);
    rr.hd95_mm = hd95(p, t);
    rep.regions.push_back(rr);
  }
  return rep;
}

struct RegionSummary {
  RegionId region = RegionId::ET;
  double mean_dice = 0.0;
  double mean_lesionwise_dice = 0.0;
  std::optional<double> mean_hd95_mm;  // over cases where hd95 is defined
  std::size_t hd95_defined = 0;
  std::size_t pred_empty_count = 0;
  std::size_t truth_empty_count = 0;
};

struct CohortSummary {
  std::size_t n_cases = 0;
  std::vector<RegionSummary> regions;  // kEvalRegions order

  const RegionSummary& operator[](RegionId r) const {
    for (const auto& x : regions)
      if (x.region == r) return x;
    throw Error(Errc::InvalidConfig, std::string("region not summarised: ") + to_string(r));
  }
};

inline CohortSummary aggregate(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw Error(Errc::InvalidConfig, "aggregate of no reports");
  CohortSummary s;
  s.n_cases = reports.size();
  for (auto r : kEvalRegions) {
    RegionSummary rs;
    rs.region = r;
    double hd = 0.0;
    for (const auto& rep : reports) {
      const auto& x = rep[r];
      rs.mean_dice += x.dice;
      rs.mean_lesionwise_dice += x.lesionwise_dice;
      if (x.hd95_mm) {
        hd += *x.hd95_mm;
        ++rs.hd95_defined;
      }
      rs.pred_empty_count += x.pred_empty;
      rs.truth_empty_count += x.truth_empty;
    }
    rs.mean_dice /= static_cast<double>(reports.size());
    rs.mean_lesionwise_dice /= static_cast<double>(reports.size());
    if (rs.hd95_defined) rs.mean_hd95_mm = hd / static_cast<double>(rs.hd95_defined);
    s.regions.push_back(rs);
  }
  return s;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

/// One row per (case, region); an undefined HD95 is written as NA.
inline std::string reports_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "case_id,region,dice,lesionwise_dice,hd95_mm,pred_empty,truth_empty\n";
  for (const auto& rep : reports)
    for (const auto& r : rep.regions)
      os << rep.case_id << ',' << report_name(r.region) << ',' << detail::fmt(r.dice) << ','
         << detail::fmt(r.lesionwise_dice) << ',' << (r.hd95_mm ? detail::fmt(*r.hd95_mm) : "NA") << ','
         << (r.pred_empty ? 1 : 0) << ',' << (r.truth_empty ? 1 : 0) << '\n';
  return os.str();
}

/// Empty-mask analysis: "k/n" predicted and truth empty counts per region.
inline std::string empties_table(const CohortSummary& s) {
  std::ostringstream os;
  os << "region pred_empty truth_empty\n";
  for (auto r : kSummaryColumns) {
    const auto& x = s[r];
    os << report_name(r) << ' ' << x.pred_empty_count << '/' << s.n_cases << ' ' << x.truth_empty_count << '/'
       << s.n_cases << '\n';
  }
  return os.str();
}

}  // namespace segcascade
