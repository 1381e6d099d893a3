#include "repneuron/error.hpp"

namespace repneuron {

const char* ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kContextOverflow: return "context_overflow";
    case ErrorKind::kPlan: return "plan";
    case ErrorKind::kRange: return "range";
    case ErrorKind::kData: return "data";
    case ErrorKind::kPartialDataset: return "partial_dataset";
    case ErrorKind::kTraceVersion: return "trace_version";
    case ErrorKind::kTraceDimension: return "trace_dimension";
    case ErrorKind::kTraceTruncated: return "trace_truncated";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

}  // namespace repneuron
