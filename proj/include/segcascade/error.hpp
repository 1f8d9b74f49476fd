#pragma once

#include <stdexcept>
#include <string>

namespace segcascade {

enum class Errc {
  BadMagic,
  UnsupportedDatatype,
  RankNotThree,
  TruncatedData,
  BadHeader,
  NonFiniteData,
  InvalidVolume,
  EmptyMask,
  EmptyVolume,
  DegenerateDistribution,
  GeometryMismatch,
  CodeOutOfRange,
  InvalidConfig,
  ShapeMismatch,
  NonFiniteLoss,
  NonFiniteUpdate,
  TooFewCases,
  MissingPrior,
  SpecGeometryError,
  BadCheckpoint,
  ConfigError,
  MissingArtifact,
  IoError,
};

inline const char* to_string(Errc code) {
  switch (code) {
    case Errc::BadMagic: return "BadMagic";
    case Errc::UnsupportedDatatype: return "UnsupportedDatatype";
    case Errc::RankNotThree: return "RankNotThree";
    case Errc::TruncatedData: return "TruncatedData";
    case Errc::BadHeader: return "BadHeader";
    case Errc::NonFiniteData: return "NonFiniteData";
    case Errc::InvalidVolume: return "InvalidVolume";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::EmptyVolume: return "EmptyVolume";
    case Errc::DegenerateDistribution: return "DegenerateDistribution";
    case Errc::GeometryMismatch: return "GeometryMismatch";
    case Errc::CodeOutOfRange: return "CodeOutOfRange";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::NonFiniteUpdate: return "NonFiniteUpdate";
    case Errc::TooFewCases: return "TooFewCases";
    case Errc::MissingPrior: return "MissingPrior";
    case Errc::SpecGeometryError: return "SpecGeometryError";
    case Errc::BadCheckpoint: return "BadCheckpoint";
    case Errc::ConfigError: return "ConfigError";
    case Errc::MissingArtifact: return "MissingArtifact";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Library-wide exception. `code()` is the machine-readable error kind.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace segcascade
