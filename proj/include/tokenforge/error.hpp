#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tokenforge {

// Every failure the library raises carries one of these codes so callers
// (and the CLI exit-code mapping) can branch without parsing messages.
enum class Errc {
  UnrepresentableInput,
  DimensionMismatch,
  PixelValueOverflow,
  IoFailure,
  EmptyCorpus,
  MissingField,
  EmptyMask,
  ShapeError,
  NumericalFailure,
  ZeroNorm,
  UnknownToken,
  CorruptCheckpoint,
  InvalidWeights,
  IndexError,
  EmptyBatch,
  UndefinedAP,
  DegenerateLabels,
  SpecError,
  Diverged,
  BadImage,
  InvalidArgument,
  ParseError,
};

constexpr std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::UnrepresentableInput: return "UnrepresentableInput";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::PixelValueOverflow: return "PixelValueOverflow";
    case Errc::IoFailure: return "IoFailure";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::MissingField: return "MissingField";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::ShapeError: return "ShapeError";
    case Errc::NumericalFailure: return "NumericalFailure";
    case Errc::ZeroNorm: return "ZeroNorm";
    case Errc::UnknownToken: return "UnknownToken";
    case Errc::CorruptCheckpoint: return "CorruptCheckpoint";
    case Errc::InvalidWeights: return "InvalidWeights";
    case Errc::IndexError: return "IndexError";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::UndefinedAP: return "UndefinedAP";
    case Errc::DegenerateLabels: return "DegenerateLabels";
    case Errc::SpecError: return "SpecError";
    case Errc::Diverged: return "Diverged";
    case Errc::BadImage: return "BadImage";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::ParseError: return "ParseError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(errc_name(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  Errc code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

[[noreturn]] inline void fail(Errc code, const std::string& detail) {
  throw Error(code, detail);
}

}  // namespace tokenforge
