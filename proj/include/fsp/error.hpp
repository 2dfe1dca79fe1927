#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fsp {

enum class Errc {
  InsufficientCorrespondences,
  DegenerateConfiguration,
  NoConsensus,
  EmptyCloud,
  NonUnitQuaternion,
  InvalidK,
  InvalidStartIndex,
  EmptyModel,
  InvalidThreshold,
  InvalidDiameter,
  BehindCamera,
  InvalidN,
  TooFewPoints,
  EmptyMask,
  ShapeMismatch,
  DimensionMismatch,
  NonFiniteScores,
  IndexOutOfRange,
  InvalidParams,
  InvalidRange,
  InvalidBarycentric,
  PoseEstimationFailed,
  EmptyQuery,
  NotEnoughFrames,
  DatasetFormatError,
  TooFewFrames,
  RegistrationDiverged,
  IoError,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::InsufficientCorrespondences: return "InsufficientCorrespondences";
    case Errc::DegenerateConfiguration: return "DegenerateConfiguration";
    case Errc::NoConsensus: return "NoConsensus";
    case Errc::EmptyCloud: return "EmptyCloud";
    case Errc::NonUnitQuaternion: return "NonUnitQuaternion";
    case Errc::InvalidK: return "InvalidK";
    case Errc::InvalidStartIndex: return "InvalidStartIndex";
    case Errc::EmptyModel: return "EmptyModel";
    case Errc::InvalidThreshold: return "InvalidThreshold";
    case Errc::InvalidDiameter: return "InvalidDiameter";
    case Errc::BehindCamera: return "BehindCamera";
    case Errc::InvalidN: return "InvalidN";
    case Errc::TooFewPoints: return "TooFewPoints";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::NonFiniteScores: return "NonFiniteScores";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::InvalidParams: return "InvalidParams";
    case Errc::InvalidRange: return "InvalidRange";
    case Errc::InvalidBarycentric: return "InvalidBarycentric";
    case Errc::PoseEstimationFailed: return "PoseEstimationFailed";
    case Errc::EmptyQuery: return "EmptyQuery";
    case Errc::NotEnoughFrames: return "NotEnoughFrames";
    case Errc::DatasetFormatError: return "DatasetFormatError";
    case Errc::TooFewFrames: return "TooFewFrames";
    case Errc::RegistrationDiverged: return "RegistrationDiverged";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Library-wide exception. Every failure carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace fsp
