#include "ipx/error.hpp"

namespace ipx {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::MissingResolution: return "MissingResolution";
    case ErrorCode::CorruptData: return "CorruptData";
    case ErrorCode::UpsampleRequested: return "UpsampleRequested";
    case ErrorCode::MissingAnalysis: return "MissingAnalysis";
    case ErrorCode::WrongResolution: return "WrongResolution";
    case ErrorCode::EmptyForeground: return "EmptyForeground";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::WrongDimension: return "WrongDimension";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::NoCaptures: return "NoCaptures";
    case ErrorCode::MixedSubjects: return "MixedSubjects";
    case ErrorCode::FingerMismatch: return "FingerMismatch";
    case ErrorCode::MissingCalibration: return "MissingCalibration";
    case ErrorCode::BadWeights: return "BadWeights";
    case ErrorCode::NoScores: return "NoScores";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::PotentialDuplicateFound: return "PotentialDuplicateFound";
    case ErrorCode::UnknownSubject: return "UnknownSubject";
    case ErrorCode::MissingThresholdTable: return "MissingThresholdTable";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::EmptyCohort: return "EmptyCohort";
    case ErrorCode::InsufficientImpostors: return "InsufficientImpostors";
  }
  return "Unknown";
}

}  // namespace ipx
