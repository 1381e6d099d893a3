#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "repneuron/error.hpp"
#include "repneuron/pipeline.hpp"
#include "repneuron/repdetect.hpp"

namespace {

using namespace repneuron;
using nlohmann::ordered_json;

// 2 config, 3 data, 4 compute, 1 anything unexpected.
int ExitCode(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
      return 2;
    case ErrorKind::kContextOverflow:
    case ErrorKind::kPlan:
      return 4;
    default:
      return 3;
  }
}

int Report(const char* kind, const std::string& message, int code) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  j["exit_code"] = code;
  std::cerr << j.dump() << '\n';
  return code;
}

std::string ResolveOut(const std::string& flag, const RunConfig& config) {
  if (!flag.empty()) return flag;
  if (!config.output_dir.empty()) return config.output_dir;
  if (const char* root = std::getenv("REPNEURON_OUT"); root != nullptr && *root != '\0') return root;
  return "repneuron_out";
}

void Detect(const RunConfig& config, const std::string& dir, const std::string& input) {
  const auto sequences = ReadTokenIdFile(input);
  std::filesystem::create_directories(dir);
  const std::string out_path = (std::filesystem::path(dir) / "detect.jsonl").string();
  std::ofstream out(out_path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + out_path);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto span = FindRepetition(sequences[i], config.detection);
    ordered_json j;
    j["line"] = i + 1;
    j["length"] = sequences[i].size();
    if (span) {
      j["onset"] = span->onset;
      j["period"] = span->period;
      j["gram"] = span->gram;
      j["unit_start_positions"] = span->unit_start_positions;
      j["eligible"] = IsEligible(sequences[i], *span, config.detection);
    } else {
      j["onset"] = nullptr;
      j["period"] = nullptr;
      j["gram"] = nullptr;
      j["unit_start_positions"] = ordered_json::array();
      j["eligible"] = false;
    }
    const std::string line = j.dump();
    out << line << '\n';
    std::cout << line << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Repetition neuron toolkit"};
  app.require_subcommand(1);
  std::string config_path, out_flag;
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  StageInputs in;
  app.add_option("--config", config_path, "JSON run configuration (defaults when omitted)")->check(CLI::ExistingFile);
  app.add_option("--out", out_flag, "run directory (default: config output_dir, then $REPNEURON_OUT)");
  app.add_option("--threads", threads, "worker thread cap")->check(CLI::PositiveNumber);

  auto add_inputs = [&](CLI::App* sub, bool model, bool dataset, bool trace, bool scores, bool corpus) {
    if (model) sub->add_option("--model", in.model, "checkpoint path");
    if (dataset) sub->add_option("--dataset", in.dataset, "dataset JSON Lines path");
    if (trace) sub->add_option("--trace", in.trace, "activation trace path");
    if (scores) sub->add_option("--scores", in.scores, "score table JSON path");
    if (corpus) sub->add_option("--corpus", in.corpus, "evaluation dataset path");
  };

  auto* train = app.add_subcommand("train", "train the toy model");
  auto* gen = app.add_subcommand("gen-data", "harvest repetitive, clean and evaluation datasets");
  add_inputs(gen, true, false, false, false, false);
  auto* detect = app.add_subcommand("detect", "find repetition spans in a token-id file");
  std::string detect_input;
  std::optional<int> gram, occurrences, window, margin;
  detect->add_option("input", detect_input, "one sequence of token ids per line")->required()->check(CLI::ExistingFile);
  detect->add_option("--gram", gram);
  detect->add_option("--occurrences", occurrences);
  detect->add_option("--window", window);
  detect->add_option("--margin", margin);
  auto* score = app.add_subcommand("score", "score neurons from a trace");
  add_inputs(score, true, true, true, false, false);
  auto* profile = app.add_subcommand("profile", "onset-aligned profiles and held-out scores");
  add_inputs(profile, true, true, true, true, false);
  auto* deactivate = app.add_subcommand("deactivate", "deactivation experiment");
  add_inputs(deactivate, true, true, false, true, false);
  auto* activate = app.add_subcommand("activate", "activation experiment");
  add_inputs(activate, true, true, false, true, false);
  auto* heads = app.add_subcommand("heads", "classify attention heads");
  add_inputs(heads, true, false, false, false, false);
  auto* ppl = app.add_subcommand("ppl", "perplexity under interventions");
  add_inputs(ppl, true, false, false, true, true);
  auto* sweep = app.add_subcommand("sweep", "layer histograms across dataset size and r");
  add_inputs(sweep, false, false, true, false, false);
  auto* report = app.add_subcommand("report", "summarize emitted reports");
  auto* run = app.add_subcommand("run", "every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return Report("config", e.what(), 2);
  }

  try {
    RunConfig config = config_path.empty() ? RunConfig{} : LoadRunConfig(config_path);
    if (gram) config.detection.gram = *gram;
    if (occurrences) config.detection.occurrences = *occurrences;
    if (window) config.detection.window = *window;
    if (margin) config.detection.min_margin = *margin;
    config.Validate();
    const std::string dir = ResolveOut(out_flag, config);

    if (*train) StageTrain(config, dir);
    else if (*gen) StageGenData(config, dir, in);
    else if (*detect) Detect(config, dir, detect_input);
    else if (*score) StageScore(config, dir, in, threads);
    else if (*profile) StageProfile(config, dir, in, threads);
    else if (*deactivate) StageDeactivate(config, dir, in);
    else if (*activate) StageActivate(config, dir, in);
    else if (*heads) StageHeads(config, dir, in);
    else if (*ppl) StagePerplexity(config, dir, in);
    else if (*sweep) StageSweep(config, dir, in);
    else if (*report) StageReport(config, dir);
    else if (*run) RunAll(config, dir, threads);
  } catch (const Error& e) {
    return Report(ErrorKindName(e.kind()), e.what(), ExitCode(e.kind()));
  } catch (const nlohmann::json::exception& e) {
    return Report("data", e.what(), 3);
  } catch (const std::filesystem::filesystem_error& e) {
    return Report("io", e.what(), 3);
  } catch (const std::exception& e) {
    return Report("internal", e.what(), 1);
  }
  return 0;
}
