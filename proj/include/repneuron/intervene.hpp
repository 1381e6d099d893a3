#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "repneuron/corpus.hpp"
#include "repneuron/model.hpp"
#include "repneuron/neuronstats.hpp"
#include "repneuron/repdetect.hpp"

namespace repneuron {

// Uniform sample of k distinct neurons, returned in NeuronId order.
std::vector<NeuronId> RandomNeuronSet(int k, const ModelConfig& config, std::uint64_t seed);

// Seed of the random arm for neuron count k and repeat j.
std::uint64_t RandomArmSeed(std::uint64_t base, int k, int repeat);

struct ArmCount {
  int k = 0;
  std::string arm;  // "repetition" or "random"
  int seed_index = -1;  // random arm only
  int repetitive = 0;
  int total = 0;
};

struct ExperimentReport {
  std::string experiment;  // "deactivate" or "activate"
  std::vector<ArmCount> rows;
  std::vector<int> skipped;  // sample indices that could not be regenerated

  double MeanCount(int k, const std::string& arm) const;
};

struct ExperimentOptions {
  RepetitionParams params;
  int random_seeds = 5;
  std::uint64_t rng_seed = 0;
  int batch = 64;
};

// Regenerates each sample greedily from the prefix ending at its onset, with
// the top-k neurons set to 0.0 from the onset, for as many tokens as the
// sample had after the onset. Counts regenerated texts with a span.
ExperimentReport DeactivateExperiment(const Model& model, std::span<const DatasetItem> samples,
                                      std::span<const int> sizes, const RepetitionNeuronSet& top,
                                      const ExperimentOptions& options);

// Regenerates each clean sample greedily from its first `start_step` tokens
// with `delta` added to the top-k neurons from position start_step on.
ExperimentReport ActivateExperiment(const Model& model, std::span<const DatasetItem> samples,
                                    std::span<const int> sizes, const RepetitionNeuronSet& top,
                                    const ExperimentOptions& options, int start_step = 50,
                                    double delta = 1.0);

struct PerplexityRow {
  int k = 0;
  std::string mode;  // DescribeMode of the override
  std::string arm;
  int seed_index = -1;
  double perplexity = 0.0;
};

// Perplexity with SetTo(0.0) and Add(1.0) plans on both arms for each k.
std::vector<PerplexityRow> PerplexitySweep(const Model& model,
                                           std::span<const TokenSequence> corpus,
                                           const RepetitionNeuronSet& top,
                                           std::span<const int> sizes, int random_seeds,
                                           std::uint64_t rng_seed);

}  // namespace repneuron
