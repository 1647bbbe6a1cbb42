#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cluda {

// Every failure mode the library reports, so callers (and the CLI) can react
// to the kind without parsing message text.
enum class ErrorKind {
  ShapeMismatch,
  UnknownKernel,
  NonFinite,
  InvalidArgument,
  EmptyInput,
  NonScalarLoss,
  NoRecord,
  RecordConsumed,
  IoFailure,
  BadMagic,
  BadVersion,
  Truncated,
  ConfigError,
  CheckpointMismatch,
};

std::string_view error_kind_name(ErrorKind kind);

class CludaError : public std::runtime_error {
 public:
  CludaError(ErrorKind kind, const std::string& message);

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

}  // namespace cluda
