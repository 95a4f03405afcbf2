#ifndef TELEEMS_ERROR_HPP
#define TELEEMS_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace teleems {

enum class ErrorCode {
  InvalidArgument,
  Io,
  // domain
  InsufficientRecords,
  MissingVital,
  EmptyAfterFilter,
  // relay
  DuplicateParticipant,
  UnknownParticipant,
  SsrcOwnership,
  UnknownStream,
  ScriptError,
  // rppg
  TooShort,
  BandExceedsNyquist,
  NoPeak,
  // hooking
  EmptySeries,
  BrokenKeyLink,
  // normalizer
  UnknownTemplate,
  // prenet
  ShapeError,
  LabelError,
  NonFiniteLoss,
  RankError,
  RangeError,
  // metrics
  EmptyUniverse,
  LengthError,
  DegenerateVariance,
  // datagen
  BandError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
    case ErrorCode::InsufficientRecords: return "InsufficientRecords";
    case ErrorCode::MissingVital: return "MissingVital";
    case ErrorCode::EmptyAfterFilter: return "EmptyAfterFilter";
    case ErrorCode::DuplicateParticipant: return "DuplicateParticipant";
    case ErrorCode::UnknownParticipant: return "UnknownParticipant";
    case ErrorCode::SsrcOwnership: return "SsrcOwnership";
    case ErrorCode::UnknownStream: return "UnknownStream";
    case ErrorCode::ScriptError: return "ScriptError";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::BandExceedsNyquist: return "BandExceedsNyquist";
    case ErrorCode::NoPeak: return "NoPeak";
    case ErrorCode::EmptySeries: return "EmptySeries";
    case ErrorCode::BrokenKeyLink: return "BrokenKeyLink";
    case ErrorCode::UnknownTemplate: return "UnknownTemplate";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::LabelError: return "LabelError";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::RankError: return "RankError";
    case ErrorCode::RangeError: return "RangeError";
    case ErrorCode::EmptyUniverse: return "EmptyUniverse";
    case ErrorCode::LengthError: return "LengthError";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::BandError: return "BandError";
  }
  return "Unknown";
}

/// Every failure in the library surfaces as this exception; `code()` carries
/// the machine-checkable reason.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace teleems

#endif  // TELEEMS_ERROR_HPP
