#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rflab {

enum class ErrorCode {
  OutOfChart,
  PastSingularTime,
  NoFlowData,
  GridMismatch,
  InvalidArgument,
  CflViolation,
  PoleDegeneracy,
  Blowup,
  NoBlowupTrend,
  InsufficientTail,
  LeftChart,
  BlowupOnPath,
  NoConvergence,
  ShapeMismatch,
  UnresolvedNodes,
  GridTooCoarse,
  NotCauchy,
  TailUncontrolled,
  MissingLimitField,
  ConfigInvalid,
  StageFailed,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::OutOfChart: return "OutOfChart";
    case ErrorCode::PastSingularTime: return "PastSingularTime";
    case ErrorCode::NoFlowData: return "NoFlowData";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::CflViolation: return "CflViolation";
    case ErrorCode::PoleDegeneracy: return "PoleDegeneracy";
    case ErrorCode::Blowup: return "Blowup";
    case ErrorCode::NoBlowupTrend: return "NoBlowupTrend";
    case ErrorCode::InsufficientTail: return "InsufficientTail";
    case ErrorCode::LeftChart: return "LeftChart";
    case ErrorCode::BlowupOnPath: return "BlowupOnPath";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::UnresolvedNodes: return "UnresolvedNodes";
    case ErrorCode::GridTooCoarse: return "GridTooCoarse";
    case ErrorCode::NotCauchy: return "NotCauchy";
    case ErrorCode::TailUncontrolled: return "TailUncontrolled";
    case ErrorCode::MissingLimitField: return "MissingLimitField";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::StageFailed: return "StageFailed";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) fail(code, what);
}

}  // namespace rflab
