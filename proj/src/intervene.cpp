#include "repneuron/intervene.hpp"

#include <algorithm>
#include <numeric>
#include <optional>

#include "repneuron/error.hpp"
#include "repneuron/rng.hpp"

namespace repneuron {

std::vector<NeuronId> RandomNeuronSet(int k, const ModelConfig& config, std::uint64_t seed) {
  const int total = config.total_neurons();
  if (k < 0 || k > total) {
    Fail(ErrorKind::kConfig, "random set of " + std::to_string(k) + " from " +
                                 std::to_string(total) + " neurons");
  }
  std::vector<int> pool(total);
  std::iota(pool.begin(), pool.end(), 0);
  Rng rng(seed);
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.Below(static_cast<std::uint64_t>(total - i)));
    std::swap(pool[i], pool[j]);
  }
  std::sort(pool.begin(), pool.begin() + k);
  std::vector<NeuronId> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i) out.push_back({pool[i] / config.d_ff, pool[i] % config.d_ff});
  return out;
}

std::uint64_t RandomArmSeed(std::uint64_t base, int k, int repeat) {
  return DeriveSeed(DeriveSeed(base, static_cast<std::uint64_t>(k)),
                    static_cast<std::uint64_t>(repeat));
}

double ExperimentReport::MeanCount(int k, const std::string& arm) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& row : rows) {
    if (row.k == k && row.arm == arm) {
      sum += row.repetitive;
      ++n;
    }
  }
  if (n == 0) Fail(ErrorKind::kData, "no rows for k=" + std::to_string(k) + " arm " + arm);
  return sum / n;
}

namespace {

struct Regeneration {
  TokenSequence prefix;
  int n_steps = 0;
  int start_step = 0;
};

int CountRepetitive(const Model& model, std::span<const Regeneration> jobs,
                    const std::vector<NeuronId>& targets, const OverrideMode& mode,
                    const ExperimentOptions& options) {
  int count = 0;
  const int batch = std::max(1, options.batch);
  for (std::size_t begin = 0; begin < jobs.size(); begin += batch) {
    const std::size_t end = std::min(jobs.size(), begin + batch);
    std::vector<GenerationRequest> requests;
    for (std::size_t i = begin; i < end; ++i) {
      GenerationRequest request;
      request.prompt = jobs[i].prefix;
      request.n_steps = jobs[i].n_steps;
      request.policy = DecodePolicy::Greedy();
      request.plan = InterventionPlan{targets, mode, jobs[i].start_step};
      requests.push_back(std::move(request));
    }
    for (const auto& record : GenerateBatch(model, requests)) {
      if (FindRepetition(record.tokens, options.params)) ++count;
    }
  }
  return count;
}

ExperimentReport RunArms(const Model& model, const std::string& name,
                         std::span<const Regeneration> jobs, std::vector<int> skipped,
                         std::span<const int> sizes, const RepetitionNeuronSet& top,
                         const OverrideMode& mode, const ExperimentOptions& options) {
  options.params.Validate();
  ExperimentReport report;
  report.experiment = name;
  report.skipped = std::move(skipped);
  const int total = static_cast<int>(jobs.size());
  std::optional<int> baseline;
  for (int k : sizes) {
    if (k < 0 || k > static_cast<int>(top.neurons.size())) {
      Fail(ErrorKind::kConfig, "k=" + std::to_string(k) + " exceeds the ranked set of " +
                                   std::to_string(top.neurons.size()));
    }
    if (k == 0) {
      if (!baseline) baseline = CountRepetitive(model, jobs, {}, mode, options);
      report.rows.push_back({0, "repetition", -1, *baseline, total});
      for (int j = 0; j < options.random_seeds; ++j) {
        report.rows.push_back({0, "random", j, *baseline, total});
      }
      continue;
    }
    report.rows.push_back(
        {k, "repetition", -1, CountRepetitive(model, jobs, top.Top(k), mode, options), total});
    for (int j = 0; j < options.random_seeds; ++j) {
      const auto targets = RandomNeuronSet(k, model.config(), RandomArmSeed(options.rng_seed, k, j));
      report.rows.push_back({k, "random", j, CountRepetitive(model, jobs, targets, mode, options), total});
    }
  }
  return report;
}

}  // namespace

ExperimentReport DeactivateExperiment(const Model& model, std::span<const DatasetItem> samples,
                                      std::span<const int> sizes, const RepetitionNeuronSet& top,
                                      const ExperimentOptions& options) {
  std::vector<Regeneration> jobs;
  std::vector<int> skipped;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& item = samples[i];
    const int length = static_cast<int>(item.tokens.size());
    if (!item.span || item.span->onset < 1 || length > model.config().max_context) {
      skipped.push_back(static_cast<int>(i));
      continue;
    }
    const int onset = item.span->onset;
    jobs.push_back({TokenSequence(item.tokens.begin(), item.tokens.begin() + onset),
                    length - onset, onset});
  }
  return RunArms(model, "deactivate", jobs, std::move(skipped), sizes, top, SetTo{0.0}, options);
}

ExperimentReport ActivateExperiment(const Model& model, std::span<const DatasetItem> samples,
                                    std::span<const int> sizes, const RepetitionNeuronSet& top,
                                    const ExperimentOptions& options, int start_step,
                                    double delta) {
  if (start_step < 1) Fail(ErrorKind::kConfig, "activation start_step must be >= 1");
  std::vector<Regeneration> jobs;
  std::vector<int> skipped;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& tokens = samples[i].tokens;
    const int length = static_cast<int>(tokens.size());
    if (length <= start_step || length > model.config().max_context) {
      skipped.push_back(static_cast<int>(i));
      continue;
    }
    jobs.push_back({TokenSequence(tokens.begin(), tokens.begin() + start_step),
                    length - start_step, start_step});
  }
  return RunArms(model, "activate", jobs, std::move(skipped), sizes, top, AddDelta{delta},
                 options);
}

std::vector<PerplexityRow> PerplexitySweep(const Model& model,
                                           std::span<const TokenSequence> corpus,
                                           const RepetitionNeuronSet& top,
                                           std::span<const int> sizes, int random_seeds,
                                           std::uint64_t rng_seed) {
  const OverrideMode modes[] = {SetTo{0.0}, AddDelta{1.0}};
  std::vector<PerplexityRow> rows;
  for (int k : sizes) {
    if (k < 0 || k > static_cast<int>(top.neurons.size())) {
      Fail(ErrorKind::kConfig, "k=" + std::to_string(k) + " exceeds the ranked set");
    }
    for (const auto& mode : modes) {
      InterventionPlan plan{top.Top(k), mode, 0};
      rows.push_back({k, DescribeMode(mode), "repetition", -1, Perplexity(model, corpus, &plan)});
      for (int j = 0; j < random_seeds; ++j) {
        plan.targets = RandomNeuronSet(k, model.config(), RandomArmSeed(rng_seed, k, j));
        rows.push_back({k, DescribeMode(mode), "random", j, Perplexity(model, corpus, &plan)});
      }
    }
  }
  return rows;
}

}  // namespace repneuron
