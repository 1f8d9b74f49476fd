#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "volume.hpp"

namespace segcascade {

enum class RegionId { BG, ET, NET, CC, ED, TC, WT, ST };

inline const char* to_string(RegionId r) {
  switch (r) {
    case RegionId::BG: return "BG";
    case RegionId::ET: return "ET";
    case RegionId::NET: return "NET";
    case RegionId::CC: return "CC";
    case RegionId::ED: return "ED";
    case RegionId::TC: return "TC";
    case RegionId::WT: return "WT";
    case RegionId::ST: return "ST";
  }
  return "?";
}

/// "NETC" is accepted as an alias of NET.
inline std::optional<RegionId> parse_region(std::string_view s) {
  if (s == "NETC") return RegionId::NET;
  for (auto r : {RegionId::BG, RegionId::ET, RegionId::NET, RegionId::CC, RegionId::ED,
                 RegionId::TC, RegionId::WT, RegionId::ST})
    if (s == to_string(r)) return r;
  return std::nullopt;
}

/// Whether voxel code `code` belongs to `region`.
inline constexpr bool in_region(Label code, RegionId region) {
  switch (region) {
    case RegionId::BG: return code == Label::BG;
    case RegionId::ET: return code == Label::ET;
    case RegionId::NET: return code == Label::NET;
    case RegionId::CC: return code == Label::CC;
    case RegionId::ED: return code == Label::ED;
    case RegionId::TC: return code == Label::ET || code == Label::NET || code == Label::CC;
    case RegionId::WT: return code != Label::BG;
    case RegionId::ST: return code == Label::ET || code == Label::NET;
  }
  return false;
}

inline Label label_for(RegionId r) {
  switch (r) {
    case RegionId::BG: return Label::BG;
    case RegionId::ET: return Label::ET;
    case RegionId::NET: return Label::NET;
    case RegionId::CC: return Label::CC;
    case RegionId::ED: return Label::ED;
    default: throw Error(Errc::CodeOutOfRange, std::string("composite region ") + to_string(r));
  }
}

inline RegionId region_for(Label l) {
  switch (l) {
    case Label::BG: return RegionId::BG;
    case Label::ET: return RegionId::ET;
    case Label::NET: return RegionId::NET;
    case Label::CC: return RegionId::CC;
    case Label::ED: return RegionId::ED;
  }
  return RegionId::BG;
}

inline BinaryMask derive_region(const LabelVolume& lv, RegionId region) {
  BinaryMask m(lv.grid, 0);
  for (std::size_t i = 0; i < lv.size(); ++i) m.data[i] = in_region(lv.data[i], region);
  return m;
}

/// Ordered named channels on one grid; probability stacks sum to 1 per voxel.
struct ChannelStack {
  Grid grid;
  std::vector<std::string> names;
  std::vector<std::vector<float>> channels;

  std::size_t size() const { return channels.size(); }
  std::size_t voxels() const { return grid.voxels(); }

  Volume3D channel(std::size_t c) const { return Volume3D(grid, channels[c]); }
};

inline double max_channel_sum_error(const ChannelStack& s) {
  double worst = 0.0;
  for (std::size_t i = 0; i < s.voxels(); ++i) {
    double sum = 0.0;
    for (const auto& ch : s.channels) sum += ch[i];
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  return worst;
}

/// One binary channel per requested region, in request order.
inline ChannelStack to_channels(const LabelVolume& lv, const std::vector<RegionId>& label_set) {
  ChannelStack s;
  s.grid = lv.grid;
  for (auto r : label_set) {
    s.names.emplace_back(to_string(r));
    std::vector<float> ch(lv.size());
    for (std::size_t i = 0; i < lv.size(); ++i) ch[i] = in_region(lv.data[i], r) ? 1.0f : 0.0f;
    s.channels.push_back(std::move(ch));
  }
  return s;
}

/// Per voxel, the code of the largest channel; ties go to the lowest channel
/// index, so a leading BG channel wins ambiguous voxels.
inline LabelVolume argmax_labels(const ChannelStack& probs, const std::vector<Label>& code_map) {
  if (code_map.size() != probs.size() || probs.channels.empty())
    throw Error(Errc::GeometryMismatch, "code map does not match channel count");
  for (const auto& ch : probs.channels)
    if (ch.size() != probs.voxels()) throw Error(Errc::GeometryMismatch, "channel length mismatch");
  LabelVolume lv(probs.grid, Label::BG);
  for (std::size_t i = 0; i < lv.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.size(); ++c)
      if (probs.channels[c][i] > probs.channels[best][i]) best = c;
    lv.data[i] = code_map[best];
  }
  return lv;
}

/// Final cascade labels: stage 2b (CC/ED) foreground overwrites stage 2a (ET/NET).
inline LabelVolume merge_stage_outputs(const LabelVolume& out_2a, const LabelVolume& out_2b) {
  require_same_grid(out_2a.grid, out_2b.grid, "stage outputs disagree on geometry");
  LabelVolume out(out_2a.grid, Label::BG);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Label a = out_2a.data[i], b = out_2b.data[i];
    if (a != Label::BG && a != Label::ET && a != Label::NET)
      throw Error(Errc::CodeOutOfRange, std::string("stage 2a emitted ") + to_string(a));
    if (b != Label::BG && b != Label::CC && b != Label::ED)
      throw Error(Errc::CodeOutOfRange, std::string("stage 2b emitted ") + to_string(b));
    out.data[i] = b != Label::BG ? b : a;
  }
  return out;
}

/// Labels outside `allowed` become BG.
inline LabelVolume restrict_labels(const LabelVolume& lv, const std::vector<Label>& allowed) {
  LabelVolume out = lv;
  for (auto& v : out.data)
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) v = Label::BG;
  return out;
}

}  // namespace segcascade
