#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ipx {

enum class ErrorCode {
  InvalidArgument,
  UnsupportedFormat,
  MissingResolution,
  CorruptData,
  UpsampleRequested,
  MissingAnalysis,
  WrongResolution,
  EmptyForeground,
  DimensionMismatch,
  WrongDimension,
  NonFiniteValue,
  EmptyGallery,
  NoCaptures,
  MixedSubjects,
  FingerMismatch,
  MissingCalibration,
  BadWeights,
  NoScores,
  DuplicateId,
  PotentialDuplicateFound,
  UnknownSubject,
  MissingThresholdTable,
  IoError,
  VersionMismatch,
  ChecksumMismatch,
  EmptyCohort,
  InsufficientImpostors,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-readable code so
/// the CLI and the HTTP layer can map it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ipx
