#include "repneuron/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "repneuron/checkpoint.hpp"
#include "repneuron/error.hpp"
#include "repneuron/heads.hpp"
#include "repneuron/intervene.hpp"
#include "repneuron/neuronstats.hpp"
#include "repneuron/traceio.hpp"

namespace repneuron {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ------------------------------------------------------------------ config

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Fields {
 public:
  Fields(const json& object, std::string where) : object_(object), where_(std::move(where)) {
    if (!object_.is_object()) Fail(ErrorKind::kConfig, where_ + " must be an object");
  }

  template <typename T>
  void Get(const char* key, T& out) {
    seen_.insert(key);
    if (!object_.contains(key)) return;
    try {
      out = object_.at(key).get<T>();
    } catch (const json::exception& e) {
      Fail(ErrorKind::kConfig, where_ + "." + key + ": " + e.what());
    }
  }

  const json* Child(const char* key) {
    seen_.insert(key);
    return object_.contains(key) ? &object_.at(key) : nullptr;
  }

  void Finish() const {
    for (const auto& [key, value] : object_.items()) {
      if (!seen_.contains(key)) Fail(ErrorKind::kConfig, "unknown config key '" + where_ + "." + key + "'");
    }
  }

 private:
  const json& object_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

void RunConfig::Validate() const {
  model.Validate();
  corpus.Validate();
  detection.Validate();
  auto bad = [](const std::string& message) { Fail(ErrorKind::kConfig, message); };
  if (corpus.vocab_size != model.vocab_size) bad("corpus.vocab_size must equal model.vocab_size");
  if (corpus.sequence_length > model.max_context) bad("corpus.sequence_length exceeds model.max_context");
  if (train.steps < 0 || train.batch_size < 1) bad("train.steps must be >= 0 and batch_size >= 1");
  if (r < 1 || r > detection.min_margin) bad("r must be in [1, detection.min_margin]");
  if (profile_half_window < 1 || profile_half_window > detection.min_margin) {
    bad("profile_half_window must be in [1, detection.min_margin]");
  }
  if (!(top_fraction > 0 && top_fraction <= 1)) bad("top_fraction must be in (0, 1]");
  const int total = model.total_neurons();
  if (profile_neurons < 1 || profile_neurons > total) bad("profile_neurons out of range");
  if (generalization_neurons < 1 || generalization_neurons > total) bad("generalization_neurons out of range");
  if (text_length > model.max_context || clean_length > model.max_context) {
    bad("text_length and clean_length must fit the model context");
  }
  if (sampled_tokens < 0 || text_length < sampled_tokens + 2 || clean_length < sampled_tokens + 2) {
    bad("text lengths must leave room after the sampled prefix");
  }
  if (!(sample_temperature > 0)) bad("sample_temperature must be > 0");
  if (budget_factor < 1) bad("budget_factor must be >= 1");
  if (sizes.scoring < 1 || sizes.heldout < 0 || sizes.deactivate < 0 || sizes.clean < 0 || sizes.eval < 0) {
    bad("dataset sizes must be non-negative and scoring >= 1");
  }
  for (const auto* ks : {&deactivate_k, &activate_k, &ppl_k}) {
    for (int k : *ks) {
      if (k < 1 || k > total) bad("intervention k values must be in [1, total neurons]");
    }
  }
  if (random_seeds < 1 || ppl_random_seeds < 0) bad("random_seeds must be >= 1");
  if (activation_start < 1 || activation_start >= clean_length) bad("activation_start must be inside clean texts");
  for (int x : sweep_x) {
    if (x < 1 || x > sizes.scoring) bad("sweep_x values must be in [1, sizes.scoring]");
  }
  for (int v : sweep_r) {
    if (v < 1 || v > detection.min_margin) bad("sweep_r values must be in [1, detection.min_margin]");
  }
  if (probe_prefix < 1 || probe_seeds_per_shape < 1) bad("probe settings must be positive");
  if (probe_prefix + 8 > model.vocab_size - 2) bad("vocab too small for the probe battery");
}

RunConfig RunConfigFromJson(const json& j) {
  RunConfig c;
  Fields top(j, "config");
  if (const json* m = top.Child("model")) c.model = ModelConfigFromJson(*m);
  if (const json* m = top.Child("corpus")) {
    Fields f(*m, "corpus");
    f.Get("vocab_size", c.corpus.vocab_size);
    f.Get("sequence_length", c.corpus.sequence_length);
    f.Get("num_sequences", c.corpus.num_sequences);
    f.Get("markov_weight", c.corpus.markov_weight);
    f.Get("loop_weight", c.corpus.loop_weight);
    f.Get("copy_weight", c.corpus.copy_weight);
    f.Get("language_seed", c.corpus.language_seed);
    f.Get("min_sentence_words", c.corpus.min_sentence_words);
    f.Get("max_sentence_words", c.corpus.max_sentence_words);
    f.Get("loop_enders", c.corpus.loop_enders);
    f.Get("loop_free_fraction", c.corpus.loop_free_fraction);
    f.Get("jump_probability", c.corpus.jump_probability);
    f.Get("copy_min_unit", c.corpus.copy_min_unit);
    f.Get("copy_max_unit", c.corpus.copy_max_unit);
    f.Get("copy_max_prefix", c.corpus.copy_max_prefix);
    f.Finish();
  }
  if (const json* m = top.Child("train")) {
    Fields f(*m, "train");
    f.Get("steps", c.train.steps);
    f.Get("batch_size", c.train.batch_size);
    f.Get("learning_rate", c.train.learning_rate);
    f.Get("warmup_steps", c.train.warmup_steps);
    f.Get("min_lr_fraction", c.train.min_lr_fraction);
    f.Get("weight_decay", c.train.weight_decay);
    f.Get("beta1", c.train.beta1);
    f.Get("beta2", c.train.beta2);
    f.Get("adam_eps", c.train.adam_eps);
    f.Get("grad_clip", c.train.grad_clip);
    f.Get("holdout_fraction", c.train.holdout_fraction);
    f.Get("log_every", c.train.log_every);
    f.Get("seed", c.train.seed);
    f.Finish();
  }
  if (const json* m = top.Child("detection")) {
    Fields f(*m, "detection");
    f.Get("gram", c.detection.gram);
    f.Get("occurrences", c.detection.occurrences);
    f.Get("window", c.detection.window);
    f.Get("min_margin", c.detection.min_margin);
    f.Finish();
  }
  if (const json* m = top.Child("sizes")) {
    Fields f(*m, "sizes");
    f.Get("scoring", c.sizes.scoring);
    f.Get("heldout", c.sizes.heldout);
    f.Get("deactivate", c.sizes.deactivate);
    f.Get("clean", c.sizes.clean);
    f.Get("eval", c.sizes.eval);
    f.Finish();
  }
  if (const json* m = top.Child("seeds")) {
    Fields f(*m, "seeds");
    f.Get("corpus", c.seeds.corpus);
    f.Get("scoring", c.seeds.scoring);
    f.Get("heldout", c.seeds.heldout);
    f.Get("deactivate", c.seeds.deactivate);
    f.Get("clean", c.seeds.clean);
    f.Get("eval", c.seeds.eval);
    f.Get("random_arm", c.seeds.random_arm);
    f.Get("probes", c.seeds.probes);
    f.Finish();
  }
  top.Get("r", c.r);
  top.Get("top_fraction", c.top_fraction);
  top.Get("profile_neurons", c.profile_neurons);
  top.Get("profile_half_window", c.profile_half_window);
  top.Get("generalization_neurons", c.generalization_neurons);
  top.Get("text_length", c.text_length);
  top.Get("clean_length", c.clean_length);
  top.Get("sampled_tokens", c.sampled_tokens);
  top.Get("sample_temperature", c.sample_temperature);
  top.Get("budget_factor", c.budget_factor);
  top.Get("deactivate_k", c.deactivate_k);
  top.Get("activate_k", c.activate_k);
  top.Get("ppl_k", c.ppl_k);
  top.Get("random_seeds", c.random_seeds);
  top.Get("ppl_random_seeds", c.ppl_random_seeds);
  top.Get("activation_start", c.activation_start);
  top.Get("activation_delta", c.activation_delta);
  top.Get("sweep_x", c.sweep_x);
  top.Get("sweep_r", c.sweep_r);
  top.Get("probe_prefix", c.probe_prefix);
  top.Get("probe_seeds_per_shape", c.probe_seeds_per_shape);
  top.Get("output_dir", c.output_dir);
  top.Finish();
  c.Validate();
  return c;
}

ordered_json RunConfigToJson(const RunConfig& c) {
  ordered_json j;
  j["model"] = ModelConfigToJson(c.model);
  j["corpus"] = {{"vocab_size", c.corpus.vocab_size},
                 {"sequence_length", c.corpus.sequence_length},
                 {"num_sequences", c.corpus.num_sequences},
                 {"markov_weight", c.corpus.markov_weight},
                 {"loop_weight", c.corpus.loop_weight},
                 {"copy_weight", c.corpus.copy_weight},
                 {"language_seed", c.corpus.language_seed},
                 {"min_sentence_words", c.corpus.min_sentence_words},
                 {"max_sentence_words", c.corpus.max_sentence_words},
                 {"loop_enders", c.corpus.loop_enders},
                 {"loop_free_fraction", c.corpus.loop_free_fraction},
                 {"jump_probability", c.corpus.jump_probability},
                 {"copy_min_unit", c.corpus.copy_min_unit},
                 {"copy_max_unit", c.corpus.copy_max_unit},
                 {"copy_max_prefix", c.corpus.copy_max_prefix}};
  j["train"] = {{"steps", c.train.steps},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"warmup_steps", c.train.warmup_steps},
                {"min_lr_fraction", c.train.min_lr_fraction},
                {"weight_decay", c.train.weight_decay},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"adam_eps", c.train.adam_eps},
                {"grad_clip", c.train.grad_clip},
                {"holdout_fraction", c.train.holdout_fraction},
                {"log_every", c.train.log_every},
                {"seed", c.train.seed}};
  j["detection"] = {{"gram", c.detection.gram},
                    {"occurrences", c.detection.occurrences},
                    {"window", c.detection.window},
                    {"min_margin", c.detection.min_margin}};
  j["sizes"] = {{"scoring", c.sizes.scoring},
                {"heldout", c.sizes.heldout},
                {"deactivate", c.sizes.deactivate},
                {"clean", c.sizes.clean},
                {"eval", c.sizes.eval}};
  j["seeds"] = {{"corpus", c.seeds.corpus},         {"scoring", c.seeds.scoring},
                {"heldout", c.seeds.heldout},       {"deactivate", c.seeds.deactivate},
                {"clean", c.seeds.clean},           {"eval", c.seeds.eval},
                {"random_arm", c.seeds.random_arm}, {"probes", c.seeds.probes}};
  j["r"] = c.r;
  j["top_fraction"] = c.top_fraction;
  j["profile_neurons"] = c.profile_neurons;
  j["profile_half_window"] = c.profile_half_window;
  j["generalization_neurons"] = c.generalization_neurons;
  j["text_length"] = c.text_length;
  j["clean_length"] = c.clean_length;
  j["sampled_tokens"] = c.sampled_tokens;
  j["sample_temperature"] = c.sample_temperature;
  j["budget_factor"] = c.budget_factor;
  j["deactivate_k"] = c.deactivate_k;
  j["activate_k"] = c.activate_k;
  j["ppl_k"] = c.ppl_k;
  j["random_seeds"] = c.random_seeds;
  j["ppl_random_seeds"] = c.ppl_random_seeds;
  j["activation_start"] = c.activation_start;
  j["activation_delta"] = c.activation_delta;
  j["sweep_x"] = c.sweep_x;
  j["sweep_r"] = c.sweep_r;
  j["probe_prefix"] = c.probe_prefix;
  j["probe_seeds_per_shape"] = c.probe_seeds_per_shape;
  j["output_dir"] = c.output_dir;
  return j;
}

RunConfig LoadRunConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kConfig, "cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    Fail(ErrorKind::kConfig, path + ": " + e.what());
  }
  return RunConfigFromJson(j);
}

// ------------------------------------------------------------------ hashing

std::string Sha256File(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot hash " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    Fail(ErrorKind::kIo, "sha256 unavailable");
  }
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_DigestFinal_ex(ctx, digest, &length);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < length; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

// ------------------------------------------------------------------ stages

namespace {

std::string Join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::string Or(const std::string& given, const std::string& dir, const char* fallback) {
  return given.empty() ? Join(dir, fallback) : given;
}

std::string ManifestName(const std::string& dir, const std::string& path) {
  std::error_code ec;
  const fs::path rel = fs::relative(fs::absolute(path), fs::absolute(dir), ec);
  if (!ec && !rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return fs::path(path).filename().string();
}

// Inputs are full paths; outputs are names relative to dir.
void WriteManifest(const std::string& dir, const std::string& stage, const RunConfig& config,
                   const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  ordered_json m;
  m["tool"] = "repneuron";
  m["version"] = kToolVersion;
  m["stage"] = stage;
  m["config"] = RunConfigToJson(config);
  m["config"].erase("output_dir");
  m["inputs"] = ordered_json::array();
  for (const auto& path : inputs) {
    m["inputs"].push_back({{"name", ManifestName(dir, path)}, {"sha256", Sha256File(path)}});
  }
  m["outputs"] = ordered_json::array();
  for (const auto& name : outputs) {
    m["outputs"].push_back({{"name", name}, {"sha256", Sha256File(Join(dir, name))}});
  }
  std::ofstream out(Join(dir, "manifest_" + stage + ".json"), std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write manifest in " + dir);
  out << m.dump(1) << '\n';
}

std::vector<std::string> ReportFiles(const std::string& stem) {
  return {stem + ".csv", stem + ".json"};
}

void Append(std::vector<std::string>& to, const std::vector<std::string>& more) {
  to.insert(to.end(), more.begin(), more.end());
}

void WriteJsonFile(const std::string& path, const ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path);
  out << j.dump(1) << '\n';
}

HarvestOptions Harvesting(const RunConfig& c, int length) {
  HarvestOptions o;
  o.length = length;
  o.sampled_tokens = c.sampled_tokens;
  o.temperature = c.sample_temperature;
  o.budget_factor = c.budget_factor;
  return o;
}

TraceHeader HeaderFor(const Model& model) {
  const auto& c = model.config();
  std::ostringstream desc;
  desc << "toy-transformer layers=" << c.n_layers << " heads=" << c.n_heads
       << " d_model=" << c.d_model << " d_ff=" << c.d_ff << " vocab=" << c.vocab_size
       << " activation=" << ActivationKindName(c.activation) << " checksum=" << std::hex
       << model.Checksum();
  TraceHeader h;
  h.model_descriptor = desc.str();
  h.n_layers = c.n_layers;
  h.d_ff = c.d_ff;
  h.n_heads = c.n_heads;
  h.tokenizer_note = "synthetic token ids; 0 = BOS, 1 = period";
  return h;
}

NeuronScoreTable TableFromReport(const Report& report, const ModelConfig& model) {
  if (report.kind != ReportKind::kScoreTable) Fail(ErrorKind::kData, "expected a score_table report");
  NeuronScoreTable t;
  t.n_layers = model.n_layers;
  t.d_ff = model.d_ff;
  if (static_cast<int>(report.rows.size()) != t.size()) {
    Fail(ErrorKind::kData, "score table has " + std::to_string(report.rows.size()) +
                               " rows, model has " + std::to_string(t.size()) + " neurons");
  }
  t.a.resize(t.size());
  t.a_bar.resize(t.size());
  t.delta.resize(t.size());
  for (const auto& row : report.rows) {
    const NeuronId id{static_cast<int>(std::get<long long>(row[0])), static_cast<int>(std::get<long long>(row[1]))};
    if (id.layer < 0 || id.layer >= t.n_layers || id.index < 0 || id.index >= t.d_ff) {
      Fail(ErrorKind::kData, "score table neuron outside the model");
    }
    t.a[t.flat(id)] = std::get<double>(row[2]);
    t.a_bar[t.flat(id)] = std::get<double>(row[3]);
    t.delta[t.flat(id)] = std::get<double>(row[4]);
  }
  return t;
}

Report ScoreTableReport(const NeuronScoreTable& t) {
  Report r{ReportKind::kScoreTable, {}};
  for (int n = 0; n < t.size(); ++n) {
    const NeuronId id = t.id(n);
    r.rows.push_back({static_cast<long long>(id.layer), static_cast<long long>(id.index), t.a[n], t.a_bar[n], t.delta[n]});
  }
  return r;
}

Report LayerHistReport(const LayerHistogram& h) {
  Report r{ReportKind::kLayerHist, {}};
  for (std::size_t l = 0; l < h.counts.size(); ++l) {
    r.rows.push_back({static_cast<long long>(l), h.relative_position[l], static_cast<long long>(h.counts[l])});
  }
  return r;
}

Report ProfileReport(const ActivationProfile& p) {
  Report r{ReportKind::kProfile, {}};
  for (std::size_t j = 0; j < p.neurons.size(); ++j) {
    for (int o = 0; o < 2 * p.half_window; ++o) {
      r.rows.push_back({static_cast<long long>(p.neurons[j].layer), static_cast<long long>(p.neurons[j].index),
                        static_cast<long long>(o - p.half_window), p.means[j][o]});
    }
  }
  return r;
}

Report InterventionReport(const ExperimentReport& e) {
  Report r{ReportKind::kIntervention, {}};
  for (const auto& row : e.rows) {
    r.rows.push_back({static_cast<long long>(row.k), row.arm, static_cast<long long>(row.repetitive),
                      static_cast<long long>(row.total), static_cast<long long>(row.seed_index)});
  }
  return r;
}

Model LoadModelInput(const StageInputs& in, const std::string& dir, std::vector<std::string>& inputs) {
  const std::string path = Or(in.model, dir, run_files::kModel);
  inputs.push_back(path);
  return LoadCheckpoint(path);
}

Dataset LoadDatasetInput(const std::string& path, const RunConfig& c, std::vector<std::string>& inputs) {
  inputs.push_back(path);
  return ReadDatasetJsonl(path, c.detection);
}

RepetitionNeuronSet LoadRanking(const StageInputs& in, const std::string& dir, const RunConfig& c,
                                std::vector<std::string>& inputs) {
  const std::string path = Or(in.scores, dir, run_files::kScores);
  inputs.push_back(path);
  const auto table = TableFromReport(ReadReportJson(path), c.model);
  return SelectTop(table, TopCount{table.size()});
}

template <typename Fn>
void ParallelChunks(int n, int threads, Fn&& fn) {
  threads = std::max(1, threads);
  if (threads == 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

std::vector<int> WithZero(const std::vector<int>& ks) {
  std::vector<int> out{0};
  out.insert(out.end(), ks.begin(), ks.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

void WriteDatasetTrace(const Model& model, const Dataset& dataset, const std::string& path,
                       int threads) {
  TraceWriter writer(path, HeaderFor(model));
  const int n = static_cast<int>(dataset.items.size());
  const int chunk = std::max(1, threads) * 4;
  for (int begin = 0; begin < n; begin += chunk) {
    const int count = std::min(chunk, n - begin);
    std::vector<TraceRecord> records(count);
    ParallelChunks(count, threads, [&](int i) {
      const auto& item = dataset.items[begin + i];
      const auto out = Forward(model, item.tokens);
      std::optional<int> onset;
      if (item.span) onset = item.span->onset;
      records[i] = MakeTraceRecord(static_cast<std::uint64_t>(begin + i), item.tokens, onset, out);
    });
    for (const auto& r : records) writer.Write(r);
  }
  writer.Close();
}

void StageTrain(const RunConfig& c, const std::string& dir) {
  c.Validate();
  fs::create_directories(dir);
  const auto corpus = SynthTrainingCorpus(c.corpus, c.seeds.corpus);
  const auto result = Train(Model(c.model), corpus, c.train);
  SaveCheckpoint(Join(dir, run_files::kModel), result.model);

  std::ofstream log(Join(dir, "train_log.csv"), std::ios::binary);
  log << "step,learning_rate,batch_loss\n";
  for (const auto& e : result.report.log) {
    log << e.step << ',' << FormatReal(e.learning_rate) << ',' << FormatReal(e.batch_loss) << '\n';
  }
  log.close();
  ordered_json summary;
  summary["initial_holdout_loss"] = result.report.initial_holdout_loss;
  summary["final_holdout_loss"] = result.report.final_holdout_loss;
  summary["train_sequences"] = result.report.train_sequences;
  summary["holdout_sequences"] = result.report.holdout_sequences;
  std::ostringstream checksum;
  checksum << std::hex << result.model.Checksum();
  summary["parameter_checksum"] = checksum.str();
  WriteJsonFile(Join(dir, "train_summary.json"), summary);
  WriteManifest(dir, "train", c, {}, {run_files::kModel, "train_log.csv", "train_summary.json"});
}

void StageGenData(const RunConfig& c, const std::string& dir, const StageInputs& in) {
  c.Validate();
  fs::create_directories(dir);
  std::vector<std::string> inputs;
  const Model model = LoadModelInput(in, dir, inputs);
  const auto text = Harvesting(c, c.text_length);

  const Dataset scoring = BuildRepetitionDataset(model, c.detection, c.sizes.scoring, c.seeds.scoring, text);
  std::vector<TokenSequence> taken = Sequences(scoring);
  auto heldout_options = text;
  heldout_options.exclude = taken;
  const Dataset heldout = BuildRepetitionDataset(model, c.detection, c.sizes.heldout, c.seeds.heldout, heldout_options);
  for (auto& s : Sequences(heldout)) taken.push_back(std::move(s));
  auto deactivate_options = text;
  deactivate_options.exclude = taken;
  const Dataset deactivate =
      BuildRepetitionDataset(model, c.detection, c.sizes.deactivate, c.seeds.deactivate, deactivate_options);
  const Dataset clean =
      BuildCleanDataset(model, c.detection, c.sizes.clean, c.seeds.clean, Harvesting(c, c.clean_length));

  CorpusSpec eval_spec = c.corpus;
  eval_spec.markov_weight = 1.0;
  eval_spec.loop_weight = 0.0;
  eval_spec.copy_weight = 0.0;
  eval_spec.num_sequences = c.sizes.eval;
  Dataset eval;
  for (auto& seq : SynthTrainingCorpus(eval_spec, c.seeds.eval)) {
    eval.items.push_back({std::move(seq), std::nullopt, c.seeds.eval, "synthetic-markov"});
  }

  WriteDatasetJsonl(Join(dir, run_files::kScoring), scoring);
  WriteDatasetJsonl(Join(dir, run_files::kHeldout), heldout);
  WriteDatasetJsonl(Join(dir, run_files::kDeactivate), deactivate);
  WriteDatasetJsonl(Join(dir, run_files::kClean), clean);
  WriteDatasetJsonl(Join(dir, run_files::kEval), eval);

  ordered_json summary;
  auto describe = [](const Dataset& d) {
    ordered_json j;
    j["items"] = d.items.size();
    j["attempts"] = d.attempts;
    j["hit_rate"] = d.attempts > 0 ? static_cast<double>(d.items.size()) / static_cast<double>(d.attempts) : 0.0;
    return j;
  };
  summary["scoring"] = describe(scoring);
  summary["heldout"] = describe(heldout);
  summary["deactivate"] = describe(deactivate);
  summary["clean"] = describe(clean);
  summary["eval"] = {{"items", eval.items.size()}};
  std::vector<DatasetItem> repetitive = scoring.items;
  repetitive.insert(repetitive.end(), heldout.items.begin(), heldout.items.end());
  summary["shared_scoring_deactivate"] = CountShared(scoring.items, deactivate.items);
  summary["shared_scoring_heldout"] = CountShared(scoring.items, heldout.items);
  summary["shared_heldout_deactivate"] = CountShared(heldout.items, deactivate.items);
  WriteJsonFile(Join(dir, "gen_data_summary.json"), summary);
  WriteManifest(dir, "gen-data", c, inputs,
                {run_files::kScoring, run_files::kHeldout, run_files::kDeactivate, run_files::kClean,
                 run_files::kEval, "gen_data_summary.json"});
}

void StageScore(const RunConfig& c, const std::string& dir, const StageInputs& in, int threads) {
  c.Validate();
  fs::create_directories(dir);
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string trace_path = in.trace;
  if (trace_path.empty()) {
    const Model model = LoadModelInput(in, dir, inputs);
    const Dataset dataset = LoadDatasetInput(Or(in.dataset, dir, run_files::kScoring), c, inputs);
    trace_path = Join(dir, run_files::kScoringTrace);
    WriteDatasetTrace(model, dataset, trace_path, threads);
    outputs.push_back(run_files::kScoringTrace);
  } else {
    inputs.push_back(trace_path);
  }

  TraceReader reader(trace_path);
  std::vector<RangeSums> sums;
  TraceRecord record;
  int item = 0;
  while (reader.Next(record)) {
    if (!record.onset) {
      Fail(ErrorKind::kData, "text_id " + std::to_string(record.text_id) + " has no onset to score");
    }
    sums.push_back(ItemRangeSums(ToActivationTrace(reader.header(), record), *record.onset, c.r, item++));
  }
  if (sums.empty()) Fail(ErrorKind::kData, "trace holds no records to score");
  const auto table = ReduceRangeSums(sums, c.r, reader.header().n_layers, reader.header().d_ff);
  const auto top = SelectTop(table, TopFraction{c.top_fraction});

  EmitReport(dir, "scores", ScoreTableReport(table));
  Report curve{ReportKind::kDeltaCurve, {}};
  for (const auto& p : SortedDeltaCurve(table)) curve.rows.push_back({p.relative_rank, p.delta});
  EmitReport(dir, "delta_curve", curve);
  EmitReport(dir, "layer_hist", LayerHistReport(MakeLayerHistogram(top.neurons, table.n_layers)));
  Append(outputs, ReportFiles("scores"));
  Append(outputs, ReportFiles("delta_curve"));
  Append(outputs, ReportFiles("layer_hist"));
  WriteManifest(dir, "score", c, inputs, outputs);
}

void StageProfile(const RunConfig& c, const std::string& dir, const StageInputs& in, int threads) {
  c.Validate();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  const auto ranking = LoadRanking(in, dir, c, inputs);
  const auto profiled = ranking.Top(c.profile_neurons);

  // Scoring texts, aligned at onset.
  const std::string trace_path = Or(in.trace, dir, run_files::kScoringTrace);
  inputs.push_back(trace_path);
  {
    TraceReader reader(trace_path);
    ProfileAccumulator acc(profiled, c.profile_half_window);
    TraceRecord record;
    int item = 0;
    while (reader.Next(record)) {
      if (!record.onset) Fail(ErrorKind::kData, "trace record without onset");
      acc.Add(ToActivationTrace(reader.header(), record), *record.onset, item++);
    }
    EmitReport(dir, "profile", ProfileReport(acc.Finish()));
    Append(outputs, ReportFiles("profile"));
  }

  // Held-out texts: the same neurons and fresh range means.
  const Model model = LoadModelInput(in, dir, inputs);
  const Dataset heldout = LoadDatasetInput(Or(in.dataset, dir, run_files::kHeldout), c, inputs);
  if (heldout.items.empty()) Fail(ErrorKind::kData, "held-out dataset is empty");
  WriteDatasetTrace(model, heldout, Join(dir, run_files::kHeldoutTrace), threads);
  outputs.push_back(run_files::kHeldoutTrace);
  TraceReader reader(Join(dir, run_files::kHeldoutTrace));
  ProfileAccumulator acc(profiled, c.profile_half_window);
  std::vector<RangeSums> sums;
  TraceRecord record;
  int item = 0;
  while (reader.Next(record)) {
    const auto trace = ToActivationTrace(reader.header(), record);
    acc.Add(trace, *record.onset, item);
    sums.push_back(ItemRangeSums(trace, *record.onset, c.r, item++));
  }
  EmitReport(dir, "profile_heldout", ProfileReport(acc.Finish()));
  EmitReport(dir, "heldout_scores", ScoreTableReport(ReduceRangeSums(sums, c.r, c.model.n_layers, c.model.d_ff)));
  Append(outputs, ReportFiles("profile_heldout"));
  Append(outputs, ReportFiles("heldout_scores"));
  WriteManifest(dir, "profile", c, inputs, outputs);
}

void StageDeactivate(const RunConfig& c, const std::string& dir, const StageInputs& in) {
  c.Validate();
  std::vector<std::string> inputs;
  const Model model = LoadModelInput(in, dir, inputs);
  const Dataset data = LoadDatasetInput(Or(in.dataset, dir, run_files::kDeactivate), c, inputs);
  const auto ranking = LoadRanking(in, dir, c, inputs);
  ExperimentOptions options;
  options.params = c.detection;
  options.random_seeds = c.random_seeds;
  options.rng_seed = c.seeds.random_arm;
  const auto sizes = WithZero(c.deactivate_k);
  const auto report = DeactivateExperiment(model, data.items, sizes, ranking, options);
  EmitReport(dir, "deactivate", InterventionReport(report));
  WriteManifest(dir, "deactivate", c, inputs, ReportFiles("deactivate"));
}

void StageActivate(const RunConfig& c, const std::string& dir, const StageInputs& in) {
  c.Validate();
  std::vector<std::string> inputs;
  const Model model = LoadModelInput(in, dir, inputs);
  const Dataset data = LoadDatasetInput(Or(in.dataset, dir, run_files::kClean), c, inputs);
  const auto ranking = LoadRanking(in, dir, c, inputs);
  ExperimentOptions options;
  options.params = c.detection;
  options.random_seeds = c.random_seeds;
  options.rng_seed = c.seeds.random_arm;
  const auto sizes = WithZero(c.activate_k);
  const auto report =
      ActivateExperiment(model, data.items, sizes, ranking, options, c.activation_start, c.activation_delta);
  EmitReport(dir, "activate", InterventionReport(report));
  WriteManifest(dir, "activate", c, inputs, ReportFiles("activate"));
}

void StagePerplexity(const RunConfig& c, const std::string& dir, const StageInputs& in) {
  c.Validate();
  std::vector<std::string> inputs;
  const Model model = LoadModelInput(in, dir, inputs);
  const Dataset eval = LoadDatasetInput(Or(in.corpus, dir, run_files::kEval), c, inputs);
  const auto ranking = LoadRanking(in, dir, c, inputs);
  const auto rows = PerplexitySweep(model, Sequences(eval), ranking, WithZero(c.ppl_k), c.ppl_random_seeds,
                                    c.seeds.random_arm);
  Report r{ReportKind::kPplSweep, {}};
  for (const auto& row : rows) {
    r.rows.push_back({static_cast<long long>(row.k), row.mode, row.arm, static_cast<long long>(row.seed_index),
                      row.perplexity});
  }
  EmitReport(dir, "ppl_sweep", r);
  WriteManifest(dir, "ppl", c, inputs, ReportFiles("ppl_sweep"));
}

void StageHeads(const RunConfig& c, const std::string& dir, const StageInputs& in) {
  c.Validate();
  std::vector<std::string> inputs;
  const Model model = LoadModelInput(in, dir, inputs);
  const auto probes = ProbeBattery(c.model.vocab_size, c.seeds.probes, c.probe_prefix,
                                   c.probe_seeds_per_shape, kBos, 2);
  const auto heads = ClassifyHeads(model, probes);
  Report scores{ReportKind::kHeadScores, {}};
  for (const auto& h : heads) {
    scores.rows.push_back({static_cast<long long>(h.layer), static_cast<long long>(h.head), h.induction_score,
                           h.self_score, HeadLabelName(h.label)});
  }
  Report hist{ReportKind::kHeadHist, {}};
  for (const auto& row : HeadLayerHistogram(heads, c.model.n_layers)) {
    hist.rows.push_back({static_cast<long long>(row.layer), static_cast<long long>(row.induction),
                         static_cast<long long>(row.self_finding)});
  }
  EmitReport(dir, "head_scores", scores);
  EmitReport(dir, "head_hist", hist);
  std::vector<std::string> outputs = ReportFiles("head_scores");
  Append(outputs, ReportFiles("head_hist"));
  WriteManifest(dir, "heads", c, inputs, outputs);
}

void StageSweep(const RunConfig& c, const std::string& dir, const StageInputs& in) {
  c.Validate();
  std::vector<std::string> inputs;
  const std::string trace_path = Or(in.trace, dir, run_files::kScoringTrace);
  inputs.push_back(trace_path);
  std::vector<int> r_values = c.sweep_r;
  if (std::find(r_values.begin(), r_values.end(), c.r) == r_values.end()) r_values.push_back(c.r);
  TraceReader reader(trace_path);
  ScoreSweep sweep(r_values, reader.header().n_layers, reader.header().d_ff, c.detection.min_margin);
  TraceRecord record;
  while (reader.Next(record)) {
    if (!record.onset) Fail(ErrorKind::kData, "trace record without onset");
    sweep.Add(ToActivationTrace(reader.header(), record), *record.onset);
  }
  std::vector<std::string> outputs;
  for (const auto& point : sweep.Run(c.sweep_x, c.sweep_r, c.r, TopFraction{c.top_fraction})) {
    const std::string stem = "sweep_x" + std::to_string(point.items) + "_r" + std::to_string(point.r);
    if (std::find(outputs.begin(), outputs.end(), stem + ".csv") != outputs.end()) continue;
    EmitReport(dir, stem, LayerHistReport(point.histogram));
    Append(outputs, ReportFiles(stem));
  }
  WriteManifest(dir, "sweep", c, inputs, outputs);
}

namespace {

double MeanCountFromReport(const Report& r, long long k, const std::string& arm) {
  double sum = 0;
  int n = 0;
  for (const auto& row : r.rows) {
    if (std::get<long long>(row[0]) == k && std::get<std::string>(row[1]) == arm) {
      sum += static_cast<double>(std::get<long long>(row[2]));
      ++n;
    }
  }
  if (n == 0) Fail(ErrorKind::kData, "intervention report lacks k=" + std::to_string(k) + " arm " + arm);
  return sum / n;
}

}  // namespace

void StageReport(const RunConfig& c, const std::string& dir) {
  std::vector<std::string> inputs;
  auto load = [&](const char* name) {
    const std::string path = Join(dir, name);
    inputs.push_back(path);
    return ReadReportJson(path);
  };
  const Report curve = load("delta_curve.json");
  const Report scores = load("scores.json");
  const Report heldout = load("heldout_scores.json");
  const Report deactivate = load("deactivate.json");
  const Report activate = load("activate.json");
  const Report head_hist = load("head_hist.json");
  const Report layer_hist = load("layer_hist.json");
  const Report ppl = load("ppl_sweep.json");

  ordered_json summary;
  // Sparsity: the curve ascends, so the top of the ranking sits at its end.
  const int total = static_cast<int>(curve.rows.size());
  const int top_k = SelectionSize(TopFraction{c.top_fraction}, total);
  const int wider = SelectionSize(TopFraction{std::min(1.0, c.top_fraction * 10)}, total);
  double top_sum = 0, next_sum = 0;
  for (int i = 0; i < wider; ++i) {
    const double d = std::get<double>(curve.rows[total - 1 - i][1]);
    (i < top_k ? top_sum : next_sum) += d;
  }
  const double top_mean = top_sum / top_k;
  const double next_mean = wider > top_k ? next_sum / (wider - top_k) : 0.0;
  summary["sparsity"] = {{"top_count", top_k},
                         {"next_count", wider - top_k},
                         {"top_mean_delta", top_mean},
                         {"next_mean_delta", next_mean},
                         {"ratio", next_mean != 0.0 ? top_mean / next_mean : 0.0}};

  const auto table = TableFromReport(scores, c.model);
  const auto held = TableFromReport(heldout, c.model);
  const auto ranking = SelectTop(table, TopCount{c.generalization_neurons});
  int positive = 0;
  ordered_json neurons = ordered_json::array();
  for (const auto& n : ranking.neurons) {
    const int f = held.flat(n);
    positive += held.a_bar[f] > held.a[f] ? 1 : 0;
    neurons.push_back({{"neuron", ToString(n)}, {"a", held.a[f]}, {"a_bar", held.a_bar[f]}});
  }
  summary["generalization"] = {{"positive", positive}, {"total", c.generalization_neurons}, {"neurons", neurons}};

  auto arms = [&](const Report& r, const std::vector<int>& ks) {
    ordered_json rows = ordered_json::array();
    for (int k : WithZero(ks)) {
      rows.push_back({{"k", k},
                      {"repetition_mean", MeanCountFromReport(r, k, "repetition")},
                      {"random_mean", MeanCountFromReport(r, k, "random")},
                      {"total", std::get<long long>(r.rows.at(0)[3])}});
    }
    return rows;
  };
  summary["deactivate"] = arms(deactivate, c.deactivate_k);
  summary["activate"] = arms(activate, c.activate_k);

  ordered_json heads = ordered_json::array();
  for (const auto& row : head_hist.rows) {
    heads.push_back({{"layer", std::get<long long>(row[0])},
                     {"induction", std::get<long long>(row[1])},
                     {"self_finding", std::get<long long>(row[2])}});
  }
  summary["heads"] = heads;
  ordered_json neuron_layers = ordered_json::array();
  for (const auto& row : layer_hist.rows) neuron_layers.push_back(std::get<long long>(row[2]));
  summary["repetition_neuron_layers"] = neuron_layers;
  ordered_json ppl_rows = ordered_json::array();
  for (const auto& row : ppl.rows) {
    if (std::get<std::string>(row[2]) != "repetition") continue;
    ppl_rows.push_back({{"k", std::get<long long>(row[0])},
                        {"mode", std::get<std::string>(row[1])},
                        {"perplexity", std::get<double>(row[4])}});
  }
  summary["perplexity_top_arm"] = ppl_rows;
  WriteJsonFile(Join(dir, "summary.json"), summary);

  std::ostringstream md;
  md << "# Run summary\n\n";
  md << "Top " << top_k << " neurons: mean delta " << FormatReal(top_mean) << "; next " << (wider - top_k)
     << ": " << FormatReal(next_mean) << "\n\n";
  md << "Held-out check: " << positive << " of " << c.generalization_neurons
     << " top neurons are more active after the onset\n\n";
  md << "| experiment | k | top-k arm | random arm (mean) | samples |\n|---|---|---|---|---|\n";
  for (const char* name : {"deactivate", "activate"}) {
    for (const auto& row : summary[name]) {
      md << "| " << name << " | " << row["k"].get<int>() << " | " << FormatReal(row["repetition_mean"].get<double>())
         << " | " << FormatReal(row["random_mean"].get<double>()) << " | " << row["total"].get<long long>() << " |\n";
    }
  }
  md << "\n| layer | repetition neurons | induction heads | self-finding heads |\n|---|---|---|---|\n";
  for (std::size_t l = 0; l < head_hist.rows.size(); ++l) {
    md << "| " << l << " | " << neuron_layers[l].get<long long>() << " | " << heads[l]["induction"].get<long long>()
       << " | " << heads[l]["self_finding"].get<long long>() << " |\n";
  }
  std::ofstream out(Join(dir, "summary.md"), std::ios::binary);
  out << md.str();
  out.close();
  WriteManifest(dir, "report", c, inputs, {"summary.json", "summary.md"});
}

void RunAll(const RunConfig& c, const std::string& dir, int threads) {
  c.Validate();
  fs::create_directories(dir);
  ordered_json resolved = RunConfigToJson(c);
  resolved.erase("output_dir");
  WriteJsonFile(Join(dir, "run_config.json"), resolved);
  const StageInputs defaults;
  StageTrain(c, dir);
  StageGenData(c, dir, defaults);
  StageScore(c, dir, defaults, threads);
  StageProfile(c, dir, defaults, threads);
  StageDeactivate(c, dir, defaults);
  StageActivate(c, dir, defaults);
  StagePerplexity(c, dir, defaults);
  StageHeads(c, dir, defaults);
  StageSweep(c, dir, defaults);
  StageReport(c, dir);
}

RunSummary ReadRunSummary(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kIo, "cannot read " + path);
  RunSummary s;
  try {
    const json j = json::parse(in);
    s.sparsity_ratio = j.at("sparsity").at("ratio").get<double>();
    s.generalization_positive = j.at("generalization").at("positive").get<int>();
    s.generalization_total = j.at("generalization").at("total").get<int>();
    for (const auto& row : j.at("deactivate")) {
      s.deactivate_k.push_back(row.at("k").get<int>());
      s.deactivate_treated.push_back(row.at("repetition_mean").get<double>());
      s.deactivate_random.push_back(row.at("random_mean").get<double>());
    }
    for (const auto& row : j.at("activate")) {
      s.activate_k.push_back(row.at("k").get<int>());
      s.activate_treated.push_back(row.at("repetition_mean").get<double>());
      s.activate_random.push_back(row.at("random_mean").get<double>());
    }
  } catch (const json::exception& e) {
    Fail(ErrorKind::kData, path + ": " + e.what());
  }
  return s;
}

}  // namespace repneuron
