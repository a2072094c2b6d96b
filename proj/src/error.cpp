#include "profpred/error.hpp"

namespace profpred {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::EmptyAlignment: return "EmptyAlignment";
    case ErrorKind::IllegalCharacter: return "IllegalCharacter";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::NoMatchColumns: return "NoMatchColumns";
    case ErrorKind::MissingAnnotation: return "MissingAnnotation";
    case ErrorKind::NegativePseudocount: return "NegativePseudocount";
    case ErrorKind::EmptyRow: return "EmptyRow";
    case ErrorKind::ProfileMismatch: return "ProfileMismatch";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::RecordTooLong: return "RecordTooLong";
    case ErrorKind::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorKind::LengthExceeded: return "LengthExceeded";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::InvalidConcentration: return "InvalidConcentration";
    case ErrorKind::DegenerateFamily: return "DegenerateFamily";
    case ErrorKind::InsufficientFamilies: return "InsufficientFamilies";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::EmptySplit: return "EmptySplit";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::DegenerateInput: return "DegenerateInput";
    case ErrorKind::NoCandidatePairs: return "NoCandidatePairs";
    case ErrorKind::BadFormat: return "BadFormat";
    case ErrorKind::Io: return "Io";
    case ErrorKind::NonPositivePrediction: return "NonPositivePrediction";
    case ErrorKind::NotNormalized: return "NotNormalized";
    case ErrorKind::NonPositiveLoss: return "NonPositiveLoss";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::Usage: return "UsageError";
  }
  return "Unknown";
}

std::string_view to_string(ErrorCategory category) noexcept {
  switch (category) {
    case ErrorCategory::Usage: return "UsageError";
    case ErrorCategory::Data: return "DataError";
    case ErrorCategory::Numerical: return "NumericalError";
  }
  return "Unknown";
}

}  // namespace profpred
