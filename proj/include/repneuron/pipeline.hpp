#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "repneuron/corpus.hpp"
#include "repneuron/model.hpp"
#include "repneuron/repdetect.hpp"
#include "repneuron/train.hpp"

namespace repneuron {

inline constexpr const char* kToolVersion = "1.0.0";

struct DatasetSizes {
  int scoring = 200;
  int heldout = 50;
  int deactivate = 100;
  int clean = 100;
  int eval = 40;  // repetition-free sequences for perplexity
};

struct RunSeeds {
  std::uint64_t corpus = 1;
  std::uint64_t scoring = 1000;
  std::uint64_t heldout = 2000;
  std::uint64_t deactivate = 3000;
  std::uint64_t clean = 4000;
  std::uint64_t eval = 5000;
  std::uint64_t random_arm = 6000;
  std::uint64_t probes = 7000;
};

// Everything one pipeline run needs. Loaded from JSON; unknown keys are
// rejected at every level.
struct RunConfig {
  ModelConfig model;
  CorpusSpec corpus;
  TrainConfig train;
  RepetitionParams detection;
  int r = 30;
  double top_fraction = 0.005;
  int profile_neurons = 4;
  int profile_half_window = 30;
  int generalization_neurons = 10;
  int text_length = 200;
  int clean_length = 210;
  int sampled_tokens = 10;
  double sample_temperature = 1.0;
  int budget_factor = 50;
  DatasetSizes sizes;
  std::vector<int> deactivate_k = {10, 50, 200, 500};
  std::vector<int> activate_k = {10, 50, 200, 500};
  std::vector<int> ppl_k = {10, 50, 200, 500};
  int random_seeds = 5;
  int ppl_random_seeds = 1;
  int activation_start = 50;
  double activation_delta = 1.0;
  std::vector<int> sweep_x = {50, 100, 200};
  std::vector<int> sweep_r = {5, 10, 15, 20, 25, 30, 35, 40, 45, 50};
  int probe_prefix = 2;
  int probe_seeds_per_shape = 2;
  RunSeeds seeds;
  std::string output_dir;

  void Validate() const;
};

RunConfig RunConfigFromJson(const nlohmann::json& json);
nlohmann::ordered_json RunConfigToJson(const RunConfig& config);
RunConfig LoadRunConfig(const std::string& path);

std::string Sha256File(const std::string& path);

// Paths used by the stages, relative to the run directory.
namespace run_files {
inline constexpr const char* kModel = "model.ckpt";
inline constexpr const char* kScoring = "scoring.jsonl";
inline constexpr const char* kHeldout = "heldout.jsonl";
inline constexpr const char* kDeactivate = "deactivate.jsonl";
inline constexpr const char* kClean = "clean.jsonl";
inline constexpr const char* kEval = "eval.jsonl";
inline constexpr const char* kScoringTrace = "scoring.trace";
inline constexpr const char* kHeldoutTrace = "heldout.trace";
inline constexpr const char* kScores = "scores.json";
}  // namespace run_files

// Inputs a stage reads; empty fields take the run-directory defaults above.
struct StageInputs {
  std::string model;
  std::string dataset;
  std::string trace;
  std::string scores;
  std::string corpus;
};

// One pipeline step. Each writes its outputs under `dir` together with
// manifest_<stage>.json listing input and output hashes.
void StageTrain(const RunConfig& config, const std::string& dir);
void StageGenData(const RunConfig& config, const std::string& dir, const StageInputs& in);
void StageScore(const RunConfig& config, const std::string& dir, const StageInputs& in,
                int threads);
void StageProfile(const RunConfig& config, const std::string& dir, const StageInputs& in,
                  int threads);
void StageDeactivate(const RunConfig& config, const std::string& dir, const StageInputs& in);
void StageActivate(const RunConfig& config, const std::string& dir, const StageInputs& in);
void StagePerplexity(const RunConfig& config, const std::string& dir, const StageInputs& in);
void StageHeads(const RunConfig& config, const std::string& dir, const StageInputs& in);
void StageSweep(const RunConfig& config, const std::string& dir, const StageInputs& in);
// Reads only emitted report JSON files and writes summary.json / summary.md.
void StageReport(const RunConfig& config, const std::string& dir);

// train, gen-data, score, profile, deactivate, activate, ppl, heads, sweep, report.
void RunAll(const RunConfig& config, const std::string& dir, int threads);

// Writes a trace of full-sequence forward passes over a dataset.
void WriteDatasetTrace(const Model& model, const Dataset& dataset, const std::string& path,
                       int threads);

struct RunSummary {
  double sparsity_ratio = 0.0;
  int generalization_positive = 0;
  int generalization_total = 0;
  std::vector<int> deactivate_k;
  std::vector<double> deactivate_treated, deactivate_random;
  std::vector<int> activate_k;
  std::vector<double> activate_treated, activate_random;
};

// Parses summary.json written by StageReport.
RunSummary ReadRunSummary(const std::string& path);

}  // namespace repneuron
