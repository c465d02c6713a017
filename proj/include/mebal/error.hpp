#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mebal {

enum class ErrorCode {
  // validation
  NonBinaryTreatment,
  EmptyArm,
  DimensionMismatch,
  NonFiniteValue,
  MissingOutcome,
  InvalidWeights,
  InvalidArgument,
  ConfigError,
  ParseError,
  // error model
  MgfUndefined,
  NonFiniteExp,
  NoReplicates,
  // numerics
  NotConverged,
  SingularCorrection,
  SingularGmmWeight,
  AllRepsFailed,
  BootstrapUnstable,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonBinaryTreatment: return "NonBinaryTreatment";
    case ErrorCode::EmptyArm: return "EmptyArm";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::MissingOutcome: return "MissingOutcome";
    case ErrorCode::InvalidWeights: return "InvalidWeights";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MgfUndefined: return "MgfUndefined";
    case ErrorCode::NonFiniteExp: return "NonFiniteExp";
    case ErrorCode::NoReplicates: return "NoReplicates";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::SingularCorrection: return "SingularCorrection";
    case ErrorCode::SingularGmmWeight: return "SingularGmmWeight";
    case ErrorCode::AllRepsFailed: return "AllRepsFailed";
    case ErrorCode::BootstrapUnstable: return "BootstrapUnstable";
  }
  return "Unknown";
}

// Numerical failures map to exit status 3 in the CLI; everything else is a
// validation/config problem (exit status 2).
constexpr bool is_numerical(ErrorCode code) {
  switch (code) {
    case ErrorCode::MgfUndefined:
    case ErrorCode::NonFiniteExp:
    case ErrorCode::NotConverged:
    case ErrorCode::SingularCorrection:
    case ErrorCode::SingularGmmWeight:
    case ErrorCode::AllRepsFailed:
    case ErrorCode::BootstrapUnstable:
      return true;
    default:
      return false;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace mebal
