#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

#include "error.hpp"
#include "volume.hpp"

namespace segcascade {

enum class Modality { T1w = 0, T1wCE = 1, T2w = 2, FLAIR = 3 };

inline constexpr std::array<Modality, 4> kAllModalities{Modality::T1w, Modality::T1wCE,
                                                        Modality::T2w, Modality::FLAIR};

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::T1w: return "T1w";
    case Modality::T1wCE: return "T1wCE";
    case Modality::T2w: return "T2w";
    case Modality::FLAIR: return "FLAIR";
  }
  return "?";
}

inline std::optional<Modality> parse_modality(std::string_view s) {
  for (auto m : kAllModalities)
    if (s == to_string(m)) return m;
  return std::nullopt;
}

/// One case's four co-registered modalities.
struct MultiModalStudy {
  std::string case_id;
  std::array<Volume3D, 4> volumes;

  Volume3D& operator[](Modality m) { return volumes[static_cast<int>(m)]; }
  const Volume3D& operator[](Modality m) const { return volumes[static_cast<int>(m)]; }
  const Grid& grid() const { return volumes[0].grid; }
};

inline void validate(const MultiModalStudy& s) {
  for (const auto& v : s.volumes) validate(v);
  for (const auto& v : s.volumes) require_same_grid(v.grid, s.volumes[0].grid, "study modalities disagree on geometry");
}

}  // namespace segcascade
