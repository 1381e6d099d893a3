#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "repneuron/error.hpp"
#include "repneuron/model.hpp"
#include "repneuron/repdetect.hpp"

namespace repneuron {

inline constexpr Token kBos = 0;
inline constexpr Token kPeriod = 1;

// Synthetic training text. Words 2..vocab-1 form one cycle (the "story");
// every sentence ends in a word that is always followed by a period. A few
// sentence enders are loop-prone: in loop texts the sentence they close is
// repeated until the text ends.
struct CorpusSpec {
  int vocab_size = 512;
  int sequence_length = 256;
  int num_sequences = 4000;
  // Mixture over {markov text, phrase loops, copy tasks}.
  double markov_weight = 0.2;
  double loop_weight = 0.6;
  double copy_weight = 0.2;
  std::uint64_t language_seed = 20240521;
  int min_sentence_words = 6;
  int max_sentence_words = 14;
  int loop_enders = 3;
  double loop_free_fraction = 0.5;  // share of the cycle with no loop-prone enders
  double jump_probability = 0.1;    // markov noise: next word uniform instead of the successor
  int copy_min_unit = 4;
  int copy_max_unit = 40;
  int copy_max_prefix = 40;

  void Validate() const;
};

class SyntheticLanguage {
 public:
  explicit SyntheticLanguage(const CorpusSpec& spec);

  int vocab_size() const { return vocab_size_; }
  Token Successor(Token word) const { return successor_[word]; }
  bool IsEnder(Token word) const { return ender_[word]; }
  bool IsLoopEnder(Token word) const { return loop_ender_[word]; }
  const std::vector<Token>& cycle() const { return cycle_; }
  const std::vector<Token>& loop_enders() const { return loop_enders_; }

 private:
  int vocab_size_ = 0;
  std::vector<Token> cycle_;
  std::vector<Token> successor_;
  std::vector<char> ender_;
  std::vector<char> loop_ender_;
  std::vector<Token> loop_enders_;
};

std::vector<TokenSequence> SynthTrainingCorpus(const CorpusSpec& spec,
                                               std::uint64_t seed);

// Harvesting protocol: prompt [BOS], `sampled_tokens` drawn at temperature
// 1.0, the rest greedy, `length` tokens in total.
struct HarvestOptions {
  int length = 200;
  int sampled_tokens = 10;
  double temperature = 1.0;
  int budget_factor = 50;  // attempts allowed per requested item
  int batch = 32;          // decoding streams run in lockstep; output does not depend on it
  std::span<const TokenSequence> exclude;  // sequences that must not reappear
};

struct DatasetItem {
  TokenSequence tokens;
  std::optional<RepetitionSpan> span;
  std::uint64_t seed = 0;
  std::string policy;
};

struct Dataset {
  std::vector<DatasetItem> items;
  long long attempts = 0;
};

// Thrown when the attempt budget runs out; carries what was found.
class PartialDatasetError : public Error {
 public:
  PartialDatasetError(const std::string& message, Dataset partial)
      : Error(ErrorKind::kPartialDataset, message), partial_(std::move(partial)) {}
  const Dataset& partial() const { return partial_; }

 private:
  Dataset partial_;
};

// Keeps texts with an eligible repetition span.
Dataset BuildRepetitionDataset(const Model& model, const RepetitionParams& params,
                               int target_size, std::uint64_t seed,
                               const HarvestOptions& options = {});

// Length 210 instead of 200.
HarvestOptions CleanHarvestDefaults();

// Keeps texts with no repetition span at all.
Dataset BuildCleanDataset(const Model& model, const RepetitionParams& params,
                          int count, std::uint64_t seed,
                          const HarvestOptions& options = CleanHarvestDefaults());

// Number of sequences of `a` that also occur in `b`.
std::size_t CountShared(std::span<const DatasetItem> a, std::span<const DatasetItem> b);

std::vector<TokenSequence> Sequences(const Dataset& dataset);

// JSON Lines, one record per text:
// {"tokens":[...],"onset":s|null,"period":p|null,"gram":g|null,"seed":n,"policy":"..."}
void WriteDatasetJsonl(const std::string& path, const Dataset& dataset);
Dataset ReadDatasetJsonl(const std::string& path, const RepetitionParams& params);

// Whitespace-separated token ids, one sequence per line.
std::vector<TokenSequence> ReadTokenIdFile(const std::string& path);

// Demo tokenizer: splits on whitespace, ids assigned in first-seen order after
// the reserved BOS and period ids.
class WhitespaceTokenizer {
 public:
  WhitespaceTokenizer();
  TokenSequence Encode(const std::string& text, bool add_bos = true);
  std::string Decode(std::span<const Token> tokens) const;
  int size() const { return static_cast<int>(words_.size()); }

 private:
  std::vector<std::string> words_;
};

}  // namespace repneuron
