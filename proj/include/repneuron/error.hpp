#pragma once

#include <stdexcept>
#include <string>

namespace repneuron {

// Error categories map onto CLI exit codes (see tools/repneuron.cpp).
enum class ErrorKind {
  kConfig,           // invalid configuration or arguments
  kContextOverflow,  // sequence longer than the model context
  kPlan,             // intervention plan references neurons outside the model
  kRange,            // trace does not cover a requested window
  kData,             // malformed or missing input data
  kPartialDataset,   // harvest budget exhausted before the target size
  kTraceVersion,
  kTraceDimension,
  kTraceTruncated,
  kIo,
};

const char* ErrorKindName(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void Fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace repneuron
