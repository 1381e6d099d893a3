#include "repneuron/traceio.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "repneuron/error.hpp"

namespace repneuron {

namespace {

constexpr char kMagic[8] = {'R', 'N', 'T', 'R', 'A', 'C', 'E', '\0'};

static_assert(std::endian::native == std::endian::little,
              "trace I/O assumes a little-endian host");

nlohmann::ordered_json HeaderJson(const TraceHeader& h) {
  nlohmann::ordered_json j;
  j["format_version"] = h.format_version;
  j["model_descriptor"] = h.model_descriptor;
  j["n_layers"] = h.n_layers;
  j["d_ff"] = h.d_ff;
  j["n_heads"] = h.n_heads;
  j["tokenizer_note"] = h.tokenizer_note;
  return j;
}

TraceHeader ParseHeader(const std::string& text, const std::string& path) {
  TraceHeader h;
  try {
    const auto j = nlohmann::json::parse(text);
    h.format_version = j.at("format_version").get<std::uint32_t>();
    if (h.format_version != kTraceFormatVersion) {
      Fail(ErrorKind::kTraceVersion, path + ": trace format_version " +
                                         std::to_string(h.format_version) + ", expected " +
                                         std::to_string(kTraceFormatVersion));
    }
    h.model_descriptor = j.at("model_descriptor").get<std::string>();
    h.n_layers = j.at("n_layers").get<int>();
    h.d_ff = j.at("d_ff").get<int>();
    h.n_heads = j.at("n_heads").get<int>();
    h.tokenizer_note = j.value("tokenizer_note", std::string());
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kData, path + ": bad trace header: " + e.what());
  }
  if (h.n_layers < 1 || h.d_ff < 1 || h.n_heads < 1) {
    Fail(ErrorKind::kTraceDimension, path + ": header dimensions must be positive");
  }
  return h;
}

void CheckRecord(const TraceHeader& h, const TraceRecord& r, const std::string& where) {
  const std::size_t n = r.tokens.size();
  const std::string id = where + "text_id " + std::to_string(r.text_id);
  if (r.activations.size() != n * static_cast<std::size_t>(h.width())) {
    Fail(ErrorKind::kTraceDimension,
         id + ": " + std::to_string(r.activations.size()) + " activation values for " +
             std::to_string(n) + " tokens of width " + std::to_string(h.width()));
  }
  if (r.attention &&
      r.attention->size() != static_cast<std::size_t>(h.n_layers) * h.n_heads * n * n) {
    Fail(ErrorKind::kTraceDimension, id + ": attention size does not match header");
  }
  if (r.onset && (*r.onset < 0 || *r.onset >= static_cast<int>(n))) {
    Fail(ErrorKind::kTraceDimension, id + ": onset outside the token range");
  }
}

template <typename T>
void Put(std::string& buf, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  buf.append(bytes, sizeof(T));
}

template <typename T>
void PutArray(std::string& buf, const std::vector<T>& values) {
  buf.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(T));
}

class Cursor {
 public:
  Cursor(const std::string& buf, std::string where) : buf_(buf), where_(std::move(where)) {}

  template <typename T>
  T Get() {
    Need(sizeof(T));
    T value;
    std::memcpy(&value, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  template <typename T>
  void GetArray(std::vector<T>& out, std::size_t count) {
    if (count > (buf_.size() - pos_) / sizeof(T)) Truncated();
    out.resize(count);
    std::memcpy(out.data(), buf_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
  }

  bool done() const { return pos_ == buf_.size(); }

 private:
  void Need(std::size_t n) {
    if (buf_.size() - pos_ < n) Truncated();
  }
  [[noreturn]] void Truncated() {
    Fail(ErrorKind::kTraceTruncated, where_ + ": record payload ends early");
  }
  const std::string& buf_;
  std::string where_;
  std::size_t pos_ = 0;
};

nlohmann::json RecordJson(const TraceRecord& r) {
  nlohmann::ordered_json j;
  j["text_id"] = r.text_id;
  j["tokens"] = r.tokens;
  j["onset"] = r.onset ? nlohmann::ordered_json(*r.onset) : nlohmann::ordered_json(nullptr);
  j["activations"] = r.activations;
  if (r.attention) {
    j["attention"] = *r.attention;
  } else {
    j["attention"] = nullptr;
  }
  return j;
}

}  // namespace

TraceRecord MakeTraceRecord(std::uint64_t text_id, std::span<const Token> tokens,
                            std::optional<int> onset, const ForwardOutput& output) {
  TraceRecord r;
  r.text_id = text_id;
  r.tokens.assign(tokens.begin(), tokens.end());
  r.onset = onset;
  const auto& values = output.activations.values();
  r.activations.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) r.activations[i] = static_cast<float>(values[i]);
  if (output.attention) {
    const auto& a = *output.attention;
    std::vector<float> att;
    att.reserve(static_cast<std::size_t>(a.n_layers()) * a.n_heads() * a.length() * a.length());
    for (int l = 0; l < a.n_layers(); ++l) {
      for (int h = 0; h < a.n_heads(); ++h) {
        for (int q = 0; q < a.length(); ++q) {
          for (double p : a.row(l, h, q)) att.push_back(static_cast<float>(p));
        }
      }
    }
    r.attention = std::move(att);
  }
  return r;
}

ActivationTrace ToActivationTrace(const TraceHeader& header, const TraceRecord& record) {
  CheckRecord(header, record, "");
  ActivationTrace trace(static_cast<int>(record.tokens.size()), header.n_layers, header.d_ff);
  for (int p = 0; p < trace.positions(); ++p) {
    auto row = trace.row(p);
    const float* src = record.activations.data() + static_cast<std::size_t>(p) * trace.width();
    for (int n = 0; n < trace.width(); ++n) row[n] = src[n];
  }
  return trace;
}

TraceWriter::TraceWriter(const std::string& path, const TraceHeader& header,
                         TraceEncoding encoding)
    : out_(path, std::ios::binary), path_(path), header_(header), encoding_(encoding) {
  if (!out_) Fail(ErrorKind::kIo, "cannot write " + path);
  if (header.format_version != kTraceFormatVersion) {
    Fail(ErrorKind::kTraceVersion, "writer only produces format_version 1");
  }
  const std::string text = HeaderJson(header).dump();
  if (encoding_ == TraceEncoding::kJsonl) {
    out_ << text << '\n';
    return;
  }
  out_.write(kMagic, sizeof(kMagic));
  const std::uint32_t version = kTraceFormatVersion;
  const std::uint32_t length = static_cast<std::uint32_t>(text.size());
  out_.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out_.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out_.write(text.data(), static_cast<std::streamsize>(text.size()));
}

void TraceWriter::Write(const TraceRecord& r) {
  CheckRecord(header_, r, path_ + ": ");
  if (encoding_ == TraceEncoding::kJsonl) {
    out_ << RecordJson(r).dump() << '\n';
    return;
  }
  std::string payload;
  Put<std::uint64_t>(payload, r.text_id);
  Put<std::uint32_t>(payload, static_cast<std::uint32_t>(r.tokens.size()));
  PutArray(payload, r.tokens);
  Put<std::int64_t>(payload, r.onset ? *r.onset : -1);
  Put<std::uint32_t>(payload, static_cast<std::uint32_t>(header_.width()));
  PutArray(payload, r.activations);
  Put<std::uint8_t>(payload, r.attention ? 1 : 0);
  if (r.attention) PutArray(payload, *r.attention);
  const std::uint64_t length = payload.size();
  out_.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out_.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out_) Fail(ErrorKind::kIo, "write failed: " + path_);
}

void TraceWriter::Close() {
  if (out_.is_open()) {
    out_.close();
    if (!out_) Fail(ErrorKind::kIo, "close failed: " + path_);
  }
}

TraceWriter::~TraceWriter() {
  if (out_.is_open()) out_.close();
}

TraceReader::TraceReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
  if (!in_) Fail(ErrorKind::kIo, "cannot read " + path);
  if (in_.peek() == '{') {
    encoding_ = TraceEncoding::kJsonl;
    std::string line;
    std::getline(in_, line);
    header_ = ParseHeader(line, path);
    return;
  }
  char magic[8];
  if (!in_.read(magic, sizeof(magic))) {
    Fail(ErrorKind::kTraceTruncated, path + ": file ends inside the magic bytes");
  }
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    Fail(ErrorKind::kData, path + ": not a trace file");
  }
  std::uint32_t version = 0;
  std::uint32_t length = 0;
  if (!in_.read(reinterpret_cast<char*>(&version), sizeof(version))) {
    Fail(ErrorKind::kTraceTruncated, path + ": file ends inside the version field");
  }
  if (version != kTraceFormatVersion) {
    Fail(ErrorKind::kTraceVersion, path + ": trace format_version " + std::to_string(version) +
                                       ", expected " + std::to_string(kTraceFormatVersion));
  }
  if (!in_.read(reinterpret_cast<char*>(&length), sizeof(length))) {
    Fail(ErrorKind::kTraceTruncated, path + ": file ends inside the header length");
  }
  std::string text(length, '\0');
  if (!in_.read(text.data(), length)) {
    Fail(ErrorKind::kTraceTruncated, path + ": file ends inside the header");
  }
  header_ = ParseHeader(text, path);
}

bool TraceReader::Next(TraceRecord& record) {
  if (encoding_ == TraceEncoding::kJsonl) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string where = path_ + ":" + std::to_string(line_) + ": ";
      TraceRecord r;
      try {
        const auto j = nlohmann::json::parse(line);
        r.text_id = j.at("text_id").get<std::uint64_t>();
        r.tokens = j.at("tokens").get<TokenSequence>();
        if (!j.at("onset").is_null()) r.onset = j.at("onset").get<int>();
        r.activations = j.at("activations").get<std::vector<float>>();
        if (j.contains("attention") && !j.at("attention").is_null()) {
          r.attention = j.at("attention").get<std::vector<float>>();
        }
      } catch (const nlohmann::json::exception& e) {
        Fail(ErrorKind::kData, where + e.what());
      }
      CheckRecord(header_, r, where);
      record = std::move(r);
      return true;
    }
    return false;
  }

  std::uint64_t length = 0;
  in_.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (in_.gcount() == 0 && in_.eof()) return false;
  if (in_.gcount() != sizeof(length)) {
    Fail(ErrorKind::kTraceTruncated, path_ + ": file ends inside a record length");
  }
  std::string payload;
  try {
    payload.resize(length);
  } catch (const std::exception&) {
    Fail(ErrorKind::kTraceTruncated, path_ + ": implausible record length");
  }
  if (!in_.read(payload.data(), static_cast<std::streamsize>(length))) {
    Fail(ErrorKind::kTraceTruncated, path_ + ": file ends inside a record");
  }
  Cursor cur(payload, path_);
  TraceRecord r;
  r.text_id = cur.Get<std::uint64_t>();
  const std::uint32_t n = cur.Get<std::uint32_t>();
  cur.GetArray(r.tokens, n);
  const std::int64_t onset = cur.Get<std::int64_t>();
  if (onset >= 0) r.onset = static_cast<int>(onset);
  const std::uint32_t width = cur.Get<std::uint32_t>();
  if (width != static_cast<std::uint32_t>(header_.width())) {
    Fail(ErrorKind::kTraceDimension, path_ + ": text_id " + std::to_string(r.text_id) +
                                         ": vector length " + std::to_string(width) +
                                         ", header says " + std::to_string(header_.width()));
  }
  cur.GetArray(r.activations, static_cast<std::size_t>(n) * width);
  if (cur.Get<std::uint8_t>() != 0) {
    std::vector<float> att;
    cur.GetArray(att, static_cast<std::size_t>(header_.n_layers) * header_.n_heads * n * n);
    r.attention = std::move(att);
  }
  if (!cur.done()) {
    Fail(ErrorKind::kTraceDimension,
         path_ + ": text_id " + std::to_string(r.text_id) + ": trailing bytes in record");
  }
  CheckRecord(header_, r, path_ + ": ");
  record = std::move(r);
  return true;
}

void WriteTrace(const std::string& path, const TraceHeader& header,
                std::span<const TraceRecord> records, TraceEncoding encoding) {
  TraceWriter writer(path, header, encoding);
  for (const auto& r : records) writer.Write(r);
  writer.Close();
}

std::pair<TraceHeader, std::vector<TraceRecord>> ReadTrace(const std::string& path) {
  TraceReader reader(path);
  std::vector<TraceRecord> records;
  TraceRecord r;
  while (reader.Next(r)) records.push_back(std::move(r));
  return {reader.header(), std::move(records)};
}

// ---------------------------------------------------------------- reports

std::string ReportKindName(ReportKind kind) {
  switch (kind) {
    case ReportKind::kDeltaCurve: return "delta_curve";
    case ReportKind::kLayerHist: return "layer_hist";
    case ReportKind::kProfile: return "profile";
    case ReportKind::kIntervention: return "intervention";
    case ReportKind::kPplSweep: return "ppl_sweep";
    case ReportKind::kHeadHist: return "head_hist";
    case ReportKind::kScoreTable: return "score_table";
    case ReportKind::kHeadScores: return "head_scores";
  }
  return "unknown";
}

namespace {

enum class CellType { kInt, kReal, kText };

struct Schema {
  std::vector<std::string> columns;
  std::vector<CellType> types;
};

const Schema& SchemaFor(ReportKind kind) {
  using C = CellType;
  static const Schema kDelta{{"relative_rank", "delta"}, {C::kReal, C::kReal}};
  static const Schema kLayer{{"layer", "relative_position", "count"}, {C::kInt, C::kReal, C::kInt}};
  static const Schema kProfile{{"layer", "index", "offset", "mean"},
                               {C::kInt, C::kInt, C::kInt, C::kReal}};
  static const Schema kIntervention{{"k", "arm", "repetitive_count", "total", "seed"},
                                    {C::kInt, C::kText, C::kInt, C::kInt, C::kInt}};
  static const Schema kPpl{{"k", "mode", "arm", "seed", "perplexity"},
                           {C::kInt, C::kText, C::kText, C::kInt, C::kReal}};
  static const Schema kHeadHist{{"layer", "induction", "self_finding"}, {C::kInt, C::kInt, C::kInt}};
  static const Schema kScores{{"layer", "index", "a", "a_bar", "delta"},
                              {C::kInt, C::kInt, C::kReal, C::kReal, C::kReal}};
  static const Schema kHeads{{"layer", "head", "induction_score", "self_score", "label"},
                             {C::kInt, C::kInt, C::kReal, C::kReal, C::kText}};
  switch (kind) {
    case ReportKind::kDeltaCurve: return kDelta;
    case ReportKind::kLayerHist: return kLayer;
    case ReportKind::kProfile: return kProfile;
    case ReportKind::kIntervention: return kIntervention;
    case ReportKind::kPplSweep: return kPpl;
    case ReportKind::kHeadHist: return kHeadHist;
    case ReportKind::kScoreTable: return kScores;
    case ReportKind::kHeadScores: return kHeads;
  }
  return kDelta;
}

long long Int(const ReportCell& c) { return std::get<long long>(c); }
double Real(const ReportCell& c) { return std::get<double>(c); }

void CheckShape(const Report& report) {
  const auto& schema = SchemaFor(report.kind);
  const std::string name = ReportKindName(report.kind);
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& row = report.rows[i];
    const std::string where = name + " row " + std::to_string(i);
    if (row.size() != schema.columns.size()) {
      Fail(ErrorKind::kData, where + ": " + std::to_string(row.size()) + " cells, expected " +
                                 std::to_string(schema.columns.size()));
    }
    for (std::size_t c = 0; c < row.size(); ++c) {
      const bool ok = (schema.types[c] == CellType::kInt && std::holds_alternative<long long>(row[c])) ||
                      (schema.types[c] == CellType::kReal && std::holds_alternative<double>(row[c])) ||
                      (schema.types[c] == CellType::kText && std::holds_alternative<std::string>(row[c]));
      if (!ok) Fail(ErrorKind::kData, where + ": column " + schema.columns[c] + " has the wrong type");
      if (const auto* s = std::get_if<std::string>(&row[c])) {
        if (s->find_first_of(",\"\n\r") != std::string::npos) {
          Fail(ErrorKind::kData, where + ": text cell contains a delimiter");
        }
      }
    }
  }
  const auto& rows = report.rows;
  auto fail_order = [&](std::size_t i, const std::string& rule) {
    Fail(ErrorKind::kData, name + " row " + std::to_string(i) + ": " + rule);
  };
  for (std::size_t i = 0; i < rows.size(); ++i) {
    switch (report.kind) {
      case ReportKind::kDeltaCurve:
        if (i > 0 && (Real(rows[i][1]) < Real(rows[i - 1][1]) ||
                      Real(rows[i][0]) <= Real(rows[i - 1][0]))) {
          fail_order(i, "deltas must ascend and ranks strictly ascend");
        }
        break;
      case ReportKind::kLayerHist:
      case ReportKind::kHeadHist:
        if (Int(rows[i][0]) != static_cast<long long>(i)) fail_order(i, "one row per layer in order");
        break;
      case ReportKind::kIntervention:
        if (Int(rows[i][2]) < 0 || Int(rows[i][2]) > Int(rows[i][3])) {
          fail_order(i, "count outside [0, total]");
        }
        if (i > 0 && Int(rows[i][0]) < Int(rows[i - 1][0])) fail_order(i, "k must not decrease");
        break;
      case ReportKind::kPplSweep:
        if (i > 0 && Int(rows[i][0]) < Int(rows[i - 1][0])) fail_order(i, "k must not decrease");
        break;
      case ReportKind::kProfile:
        if (i > 0 && Int(rows[i][0]) == Int(rows[i - 1][0]) && Int(rows[i][1]) == Int(rows[i - 1][1]) &&
            Int(rows[i][2]) != Int(rows[i - 1][2]) + 1) {
          fail_order(i, "offsets must be consecutive per neuron");
        }
        break;
      case ReportKind::kScoreTable:
        if (i > 0 && std::make_pair(Int(rows[i][0]), Int(rows[i][1])) <=
                         std::make_pair(Int(rows[i - 1][0]), Int(rows[i - 1][1]))) {
          fail_order(i, "neurons must ascend");
        }
        break;
      case ReportKind::kHeadScores:
        if (i > 0 && std::make_pair(Int(rows[i][0]), Int(rows[i][1])) <=
                         std::make_pair(Int(rows[i - 1][0]), Int(rows[i - 1][1]))) {
          fail_order(i, "heads must ascend");
        }
        break;
    }
  }
}

}  // namespace

const std::vector<std::string>& ReportColumns(ReportKind kind) { return SchemaFor(kind).columns; }

std::string FormatReal(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

void EmitReport(const std::string& dir, const std::string& stem, const Report& report) {
  CheckShape(report);
  const auto& columns = ReportColumns(report.kind);
  std::ostringstream csv;
  for (std::size_t c = 0; c < columns.size(); ++c) csv << (c ? "," : "") << columns[c];
  csv << '\n';
  nlohmann::ordered_json json;
  json["kind"] = ReportKindName(report.kind);
  json["columns"] = columns;
  json["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) {
    nlohmann::ordered_json jrow = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) csv << ',';
      std::visit(
          [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, double>) {
              csv << FormatReal(v);
            } else {
              csv << v;
            }
            jrow.push_back(v);
          },
          row[c]);
    }
    csv << '\n';
    json["rows"].push_back(std::move(jrow));
  }
  const std::string base = dir + "/" + stem;
  std::ofstream csv_out(base + ".csv", std::ios::binary);
  std::ofstream json_out(base + ".json", std::ios::binary);
  if (!csv_out || !json_out) Fail(ErrorKind::kIo, "cannot write report " + base);
  csv_out << csv.str();
  json_out << json.dump(1) << '\n';
  if (!csv_out || !json_out) Fail(ErrorKind::kIo, "write failed: " + base);
}

Report ReadReportJson(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot read " + path);
  Report report;
  try {
    const auto j = nlohmann::json::parse(in);
    const std::string kind = j.at("kind").get<std::string>();
    bool found = false;
    for (int k = 0; k <= static_cast<int>(ReportKind::kHeadScores); ++k) {
      if (ReportKindName(static_cast<ReportKind>(k)) == kind) {
        report.kind = static_cast<ReportKind>(k);
        found = true;
      }
    }
    if (!found) Fail(ErrorKind::kData, path + ": unknown report kind " + kind);
    if (j.at("columns").get<std::vector<std::string>>() != ReportColumns(report.kind)) {
      Fail(ErrorKind::kData, path + ": columns do not match kind " + kind);
    }
    const auto& schema = SchemaFor(report.kind);
    for (const auto& jrow : j.at("rows")) {
      std::vector<ReportCell> row;
      for (std::size_t c = 0; c < jrow.size(); ++c) {
        const auto& v = jrow[c];
        const CellType t = c < schema.types.size() ? schema.types[c] : CellType::kText;
        if (t == CellType::kInt && v.is_number_integer()) {
          row.emplace_back(v.get<long long>());
        } else if (t == CellType::kReal && v.is_number()) {
          row.emplace_back(v.get<double>());
        } else if (v.is_string()) {
          row.emplace_back(v.get<std::string>());
        } else {
          Fail(ErrorKind::kData, path + ": cell of unexpected type");
        }
      }
      report.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    Fail(ErrorKind::kData, path + ": " + e.what());
  }
  CheckShape(report);
  return report;
}

}  // namespace repneuron
