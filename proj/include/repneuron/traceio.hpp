#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "repneuron/model.hpp"

namespace repneuron {

// Binary trace file, all integers little-endian:
//   8 bytes   magic "RNTRACE\0"
//   u32       format version (1)
//   u32       header length H
//   H bytes   JSON header {format_version, model_descriptor, n_layers, d_ff, n_heads, tokenizer_note}
//   records, each:
//     u64     payload length P
//     P bytes payload:
//       u64   text_id
//       u32   n_tokens
//       i32   tokens[n_tokens]
//       i64   onset (-1 when absent)
//       u32   width (n_layers * d_ff)
//       f32   activations[n_tokens * width]   position-major, then layer, then index
//       u8    has_attention
//       f32   attention[n_layers * n_heads * n_tokens * n_tokens] when has_attention
//
// The JSON Lines variant holds the header object on the first line and one
// record object per following line with the same fields.
inline constexpr std::uint32_t kTraceFormatVersion = 1;

struct TraceHeader {
  std::uint32_t format_version = kTraceFormatVersion;
  std::string model_descriptor;
  int n_layers = 0;
  int d_ff = 0;
  int n_heads = 0;
  std::string tokenizer_note;

  int width() const { return n_layers * d_ff; }
  bool operator==(const TraceHeader&) const = default;
};

struct TraceRecord {
  std::uint64_t text_id = 0;
  TokenSequence tokens;
  std::optional<int> onset;
  std::vector<float> activations;
  std::optional<std::vector<float>> attention;

  bool operator==(const TraceRecord&) const = default;
};

enum class TraceEncoding { kBinary, kJsonl };

TraceRecord MakeTraceRecord(std::uint64_t text_id, std::span<const Token> tokens,
                            std::optional<int> onset, const ForwardOutput& output);

// Widens the stored 32-bit values into an ActivationTrace.
ActivationTrace ToActivationTrace(const TraceHeader& header, const TraceRecord& record);

class TraceWriter {
 public:
  TraceWriter(const std::string& path, const TraceHeader& header,
              TraceEncoding encoding = TraceEncoding::kBinary);
  // Throws Error(kTraceDimension) naming the text when shapes disagree with the header.
  void Write(const TraceRecord& record);
  void Close();
  ~TraceWriter();

 private:
  std::ofstream out_;
  std::string path_;
  TraceHeader header_;
  TraceEncoding encoding_;
};

// Streams records one at a time. Errors: kTraceVersion, kTraceDimension,
// kTraceTruncated, kData for anything else malformed.
class TraceReader {
 public:
  explicit TraceReader(const std::string& path);
  const TraceHeader& header() const { return header_; }
  TraceEncoding encoding() const { return encoding_; }
  bool Next(TraceRecord& record);

 private:
  std::ifstream in_;
  std::string path_;
  TraceHeader header_;
  TraceEncoding encoding_ = TraceEncoding::kBinary;
  int line_ = 1;
};

void WriteTrace(const std::string& path, const TraceHeader& header,
                std::span<const TraceRecord> records,
                TraceEncoding encoding = TraceEncoding::kBinary);
std::pair<TraceHeader, std::vector<TraceRecord>> ReadTrace(const std::string& path);

// Plot-data reports. Every kind has a fixed column list; rows are written in
// the order given after the kind's ordering rule is checked.
enum class ReportKind {
  kDeltaCurve,    // relative_rank, delta
  kLayerHist,     // layer, relative_position, count
  kProfile,       // layer, index, offset, mean
  kIntervention,  // k, arm, repetitive_count, total, seed (-1 for the top-k arm)
  kPplSweep,      // k, mode, arm, seed, perplexity
  kHeadHist,      // layer, induction, self_finding
  kScoreTable,    // layer, index, a, a_bar, delta
  kHeadScores,    // layer, head, induction_score, self_score, label
};

std::string ReportKindName(ReportKind kind);
const std::vector<std::string>& ReportColumns(ReportKind kind);

using ReportCell = std::variant<long long, double, std::string>;

struct Report {
  ReportKind kind = ReportKind::kDeltaCurve;
  std::vector<std::vector<ReportCell>> rows;
};

// Writes <dir>/<stem>.csv and <dir>/<stem>.json. Throws Error(kData) when a
// row does not match the kind's columns or ordering.
void EmitReport(const std::string& dir, const std::string& stem, const Report& report);
Report ReadReportJson(const std::string& path);

std::string FormatReal(double value);

}  // namespace repneuron
