#include "cluda/error.hpp"

namespace cluda {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::UnknownKernel: return "UnknownKernel";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::NonScalarLoss: return "NonScalarLoss";
    case ErrorKind::NoRecord: return "NoRecord";
    case ErrorKind::RecordConsumed: return "RecordConsumed";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::BadVersion: return "BadVersion";
    case ErrorKind::Truncated: return "Truncated";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::CheckpointMismatch: return "CheckpointMismatch";
  }
  return "Unknown";
}

CludaError::CludaError(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw CludaError(kind, message); }

}  // namespace cluda
