#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace profpred {

/// Fine-grained failure reasons. Every kind maps onto one coarse category
/// that the CLI turns into an exit code.
enum class ErrorKind {
  // data
  MalformedRecord,
  EmptyAlignment,
  IllegalCharacter,
  IndexOutOfRange,
  NoMatchColumns,
  MissingAnnotation,
  NegativePseudocount,
  EmptyRow,
  ProfileMismatch,
  ShapeMismatch,
  EmptyMask,
  RecordTooLong,
  TokenOutOfRange,
  LengthExceeded,
  InvalidConfig,
  InvalidConcentration,
  DegenerateFamily,
  InsufficientFamilies,
  ConfigMismatch,
  EmptySplit,
  LengthMismatch,
  DegenerateInput,
  NoCandidatePairs,
  BadFormat,
  Io,
  // numerical
  NonPositivePrediction,
  NotNormalized,
  NonPositiveLoss,
  NonFiniteGradient,
  NonFiniteLoss,
  // usage
  Usage,
};

enum class ErrorCategory { Usage, Data, Numerical };

constexpr ErrorCategory category_of(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::NonPositivePrediction:
    case ErrorKind::NotNormalized:
    case ErrorKind::NonPositiveLoss:
    case ErrorKind::NonFiniteGradient:
    case ErrorKind::NonFiniteLoss:
      return ErrorCategory::Numerical;
    case ErrorKind::Usage:
      return ErrorCategory::Usage;
    default:
      return ErrorCategory::Data;
  }
}

std::string_view to_string(ErrorKind kind) noexcept;
std::string_view to_string(ErrorCategory category) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  ErrorCategory category() const noexcept { return category_of(kind_); }

 private:
  ErrorKind kind_;
};

}  // namespace profpred
