#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace echoflow {

enum class ErrorCode {
  DuplicateId,
  InvalidSpec,
  UnknownDataset,
  ShapeMismatch,
  HeadKindMismatch,
  InvalidBox,
  EmptyDataset,
  DivergenceDetected,
  ToolNotInSet,
  CropDegenerate,
  CountMismatch,
  ConfigMismatch,
  Io,
  Parse,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; `code()` carries the category so
// callers (CLI exit codes, agent trace) can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace echoflow
