#include "repneuron/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "repneuron/rng.hpp"

namespace repneuron {

void CorpusSpec::Validate() const {
  if (vocab_size < 16) Fail(ErrorKind::kConfig, "corpus vocab_size must be >= 16");
  if (sequence_length < 16) Fail(ErrorKind::kConfig, "corpus sequence_length must be >= 16");
  if (num_sequences < 0) Fail(ErrorKind::kConfig, "num_sequences must be >= 0");
  if (markov_weight < 0 || loop_weight < 0 || copy_weight < 0) {
    Fail(ErrorKind::kConfig, "mixture weights must be non-negative");
  }
  if (!(markov_weight + loop_weight + copy_weight > 0)) {
    Fail(ErrorKind::kConfig, "mixture weights sum to zero");
  }
  if (min_sentence_words < 1 || max_sentence_words < min_sentence_words) {
    Fail(ErrorKind::kConfig, "sentence length range is empty");
  }
  if (loop_enders < 0) Fail(ErrorKind::kConfig, "loop_enders must be >= 0");
  if (loop_free_fraction < 0 || loop_free_fraction >= 1) {
    Fail(ErrorKind::kConfig, "loop_free_fraction must be in [0, 1)");
  }
  if (jump_probability < 0 || jump_probability > 1) {
    Fail(ErrorKind::kConfig, "jump_probability must be in [0, 1]");
  }
  if (copy_min_unit < 1 || copy_max_unit < copy_min_unit || copy_max_prefix < 0) {
    Fail(ErrorKind::kConfig, "copy task ranges are invalid");
  }
}

SyntheticLanguage::SyntheticLanguage(const CorpusSpec& spec) : vocab_size_(spec.vocab_size) {
  spec.Validate();
  const int words = vocab_size_ - 2;
  for (Token w = 2; w < vocab_size_; ++w) cycle_.push_back(w);
  Rng rng(spec.language_seed);
  rng.Shuffle(cycle_);

  successor_.assign(vocab_size_, kPeriod);
  ender_.assign(vocab_size_, 0);
  loop_ender_.assign(vocab_size_, 0);
  for (int i = 0; i < words; ++i) successor_[cycle_[i]] = cycle_[(i + 1) % words];

  const int span = spec.max_sentence_words - spec.min_sentence_words + 1;
  std::vector<int> ender_slots;
  for (int i = 0; i < words;) {
    int end = std::min(i + spec.min_sentence_words + static_cast<int>(rng.Below(span)), words) - 1;
    if (words - (end + 1) < spec.min_sentence_words) end = words - 1;
    ender_[cycle_[end]] = 1;
    ender_slots.push_back(end);
    i = end + 1;
  }

  // Token offset of each ender along the cycle (periods count as tokens).
  std::vector<double> ender_offsets;
  for (std::size_t j = 0; j < ender_slots.size(); ++j) {
    ender_offsets.push_back(ender_slots[j] + static_cast<double>(j));
  }
  const double cycle_tokens = words + static_cast<double>(ender_slots.size());
  const double loop_region = cycle_tokens * (1.0 - spec.loop_free_fraction);
  for (int q = 0; q < spec.loop_enders; ++q) {
    const double target = (q + 0.5) * loop_region / spec.loop_enders;
    std::size_t best = 0;
    for (std::size_t j = 1; j < ender_offsets.size(); ++j) {
      if (std::abs(ender_offsets[j] - target) < std::abs(ender_offsets[best] - target)) best = j;
    }
    const Token word = cycle_[ender_slots[best]];
    if (!loop_ender_[word]) {
      loop_ender_[word] = 1;
      loop_enders_.push_back(word);
    }
  }
}

namespace {

class Walker {
 public:
  Walker(const SyntheticLanguage& language, double jump, Rng& rng)
      : language_(language), jump_(jump), rng_(rng) {}

  Token RandomWord() {
    return static_cast<Token>(2 + rng_.Below(static_cast<std::uint64_t>(language_.vocab_size() - 2)));
  }

  Token Next(Token word) {
    if (jump_ > 0 && rng_.Uniform() < jump_) return RandomWord();
    return language_.Successor(word);
  }

 private:
  const SyntheticLanguage& language_;
  double jump_;
  Rng& rng_;
};

TokenSequence MarkovText(const SyntheticLanguage& language, const CorpusSpec& spec, Rng& rng) {
  Walker walker(language, spec.jump_probability, rng);
  TokenSequence out{kBos};
  Token word = walker.RandomWord();
  while (static_cast<int>(out.size()) < spec.sequence_length) {
    out.push_back(word);
    if (language.IsEnder(word)) out.push_back(kPeriod);
    word = walker.Next(word);
  }
  out.resize(spec.sequence_length);
  return out;
}

// Walks without noise from some distance before a loop-prone ender; the
// sentence closed by the first loop-prone ender repeats to the end.
TokenSequence LoopText(const SyntheticLanguage& language, const CorpusSpec& spec, Rng& rng) {
  Walker walker(language, 0.0, rng);
  const int length = spec.sequence_length;
  const auto& cycle = language.cycle();
  const int words = static_cast<int>(cycle.size());

  Token word = walker.RandomWord();
  if (!language.loop_enders().empty()) {
    const Token target = language.loop_enders()[rng.Below(language.loop_enders().size())];
    int slot = static_cast<int>(std::find(cycle.begin(), cycle.end(), target) - cycle.begin());
    int lead = static_cast<int>(rng.Below(static_cast<std::uint64_t>(std::max(1, length - 40))));
    while (lead > 0) {
      slot = (slot + words - 1) % words;
      lead -= language.IsEnder(cycle[slot]) ? 2 : 1;
    }
    word = cycle[slot];
  }

  TokenSequence out{kBos};
  std::size_t sentence_start = 1;
  while (static_cast<int>(out.size()) < length) {
    out.push_back(word);
    if (language.IsEnder(word)) {
      out.push_back(kPeriod);
      if (language.IsLoopEnder(word)) {
        const TokenSequence unit(out.begin() + static_cast<std::ptrdiff_t>(sentence_start), out.end());
        while (static_cast<int>(out.size()) < length) {
          for (Token t : unit) out.push_back(t);
        }
        break;
      }
      sentence_start = out.size();
    }
    word = walker.Next(word);
  }
  out.resize(length);
  return out;
}

TokenSequence CopyText(const SyntheticLanguage& language, const CorpusSpec& spec, Rng& rng) {
  Walker walker(language, 0.0, rng);
  TokenSequence out{kBos};
  const int prefix = static_cast<int>(rng.Below(static_cast<std::uint64_t>(spec.copy_max_prefix) + 1));
  for (int i = 0; i < prefix; ++i) out.push_back(walker.RandomWord());
  const int unit_length =
      spec.copy_min_unit +
      static_cast<int>(rng.Below(static_cast<std::uint64_t>(spec.copy_max_unit - spec.copy_min_unit + 1)));
  TokenSequence unit;
  for (int i = 0; i < unit_length; ++i) unit.push_back(walker.RandomWord());
  while (static_cast<int>(out.size()) < spec.sequence_length) {
    for (Token t : unit) out.push_back(t);
  }
  out.resize(spec.sequence_length);
  return out;
}

}  // namespace

std::vector<TokenSequence> SynthTrainingCorpus(const CorpusSpec& spec, std::uint64_t seed) {
  const SyntheticLanguage language(spec);
  const double weights[3] = {spec.markov_weight, spec.loop_weight, spec.copy_weight};
  std::vector<TokenSequence> corpus;
  corpus.reserve(static_cast<std::size_t>(spec.num_sequences));
  for (int i = 0; i < spec.num_sequences; ++i) {
    Rng rng(DeriveSeed(seed, static_cast<std::uint64_t>(i)));
    switch (rng.Categorical(weights)) {
      case 0: corpus.push_back(MarkovText(language, spec, rng)); break;
      case 1: corpus.push_back(LoopText(language, spec, rng)); break;
      default: corpus.push_back(CopyText(language, spec, rng)); break;
    }
  }
  return corpus;
}

namespace {

std::string HarvestPolicy(const HarvestOptions& options) {
  std::ostringstream out;
  out << "sample(temperature=" << options.temperature << ",tokens=" << options.sampled_tokens
      << ")+greedy";
  return out.str();
}

template <typename Keep>
Dataset Harvest(const Model& model, const RepetitionParams& params, int target,
                std::uint64_t seed, const HarvestOptions& options, const char* what, Keep keep) {
  params.Validate();
  if (target < 0) Fail(ErrorKind::kConfig, std::string(what) + ": size must be >= 0");
  if (options.length < options.sampled_tokens + 2 || options.sampled_tokens < 0) {
    Fail(ErrorKind::kConfig, std::string(what) + ": length too short for the sampled prefix");
  }
  if (options.length > model.config().max_context) {
    Fail(ErrorKind::kContextOverflow, std::string(what) + ": length exceeds model context");
  }
  Dataset dataset;
  if (target == 0) return dataset;

  const std::set<TokenSequence> excluded(options.exclude.begin(), options.exclude.end());
  const long long budget = static_cast<long long>(options.budget_factor) * target;
  const int batch = std::max(1, options.batch);
  const std::string policy = HarvestPolicy(options);
  const int greedy_steps = options.length - 1 - options.sampled_tokens;

  long long next = 0;
  while (next < budget && static_cast<int>(dataset.items.size()) < target) {
    const int n = static_cast<int>(std::min<long long>(batch, budget - next));
    std::vector<GenerationRequest> requests(n);
    for (int i = 0; i < n; ++i) {
      requests[i].prompt = {kBos};
      requests[i].n_steps = options.sampled_tokens;
      requests[i].policy = DecodePolicy::Sample(
          options.temperature, DeriveSeed(seed, static_cast<std::uint64_t>(next + i)));
    }
    const auto prefixes = GenerateBatch(model, requests);
    for (int i = 0; i < n; ++i) {
      requests[i].prompt = prefixes[i].tokens;
      requests[i].n_steps = greedy_steps;
      requests[i].policy = DecodePolicy::Greedy();
    }
    const auto texts = GenerateBatch(model, requests);
    for (int i = 0; i < n; ++i) {
      const TokenSequence& tokens = texts[i].tokens;
      auto span = FindRepetition(tokens, params);
      if (keep(tokens, span) && !excluded.contains(tokens)) {
        dataset.items.push_back(
            {tokens, span, DeriveSeed(seed, static_cast<std::uint64_t>(next + i)), policy});
        if (static_cast<int>(dataset.items.size()) == target) {
          dataset.attempts = next + i + 1;
          return dataset;
        }
      }
    }
    next += n;
  }
  dataset.attempts = next;
  std::ostringstream message;
  message << what << ": " << dataset.items.size() << " of " << target << " items after "
          << next << " attempts";
  throw PartialDatasetError(message.str(), std::move(dataset));
}

}  // namespace

Dataset BuildRepetitionDataset(const Model& model, const RepetitionParams& params,
                               int target_size, std::uint64_t seed,
                               const HarvestOptions& options) {
  return Harvest(model, params, target_size, seed, options, "repetition dataset",
                 [&](const TokenSequence& tokens, const std::optional<RepetitionSpan>& span) {
                   return span.has_value() && IsEligible(tokens, *span, params);
                 });
}

HarvestOptions CleanHarvestDefaults() {
  HarvestOptions options;
  options.length = 210;
  return options;
}

Dataset BuildCleanDataset(const Model& model, const RepetitionParams& params, int count,
                          std::uint64_t seed, const HarvestOptions& options) {
  return Harvest(model, params, count, seed, options, "clean dataset",
                 [](const TokenSequence&, const std::optional<RepetitionSpan>& span) {
                   return !span.has_value();
                 });
}

std::size_t CountShared(std::span<const DatasetItem> a, std::span<const DatasetItem> b) {
  std::set<TokenSequence> seen;
  for (const auto& item : b) seen.insert(item.tokens);
  std::size_t shared = 0;
  for (const auto& item : a) shared += seen.contains(item.tokens) ? 1 : 0;
  return shared;
}

std::vector<TokenSequence> Sequences(const Dataset& dataset) {
  std::vector<TokenSequence> out;
  out.reserve(dataset.items.size());
  for (const auto& item : dataset.items) out.push_back(item.tokens);
  return out;
}

void WriteDatasetJsonl(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kIo, "cannot write " + path);
  for (const auto& item : dataset.items) {
    nlohmann::ordered_json record;
    record["tokens"] = item.tokens;
    if (item.span) {
      record["onset"] = item.span->onset;
      record["period"] = item.span->period;
      record["gram"] = item.span->gram;
    } else {
      record["onset"] = nullptr;
      record["period"] = nullptr;
      record["gram"] = nullptr;
    }
    record["seed"] = item.seed;
    record["policy"] = item.policy;
    out << record.dump() << '\n';
  }
  if (!out) Fail(ErrorKind::kIo, "write failed: " + path);
}

Dataset ReadDatasetJsonl(const std::string& path, const RepetitionParams& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorKind::kIo, "cannot read " + path);
  Dataset dataset;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(line_number);
    DatasetItem item;
    try {
      const auto record = nlohmann::json::parse(line);
      item.tokens = record.at("tokens").get<TokenSequence>();
      item.seed = record.value("seed", std::uint64_t{0});
      item.policy = record.value("policy", std::string());
      const auto& onset = record.at("onset");
      if (!onset.is_null()) {
        RepetitionSpan span;
        span.onset = onset.get<int>();
        span.period = record.at("period").get<int>();
        span.gram = record.at("gram").get<int>();
        for (int i = 0; i < params.occurrences; ++i) {
          span.unit_start_positions.push_back(span.onset - span.period + i * span.period);
        }
        item.span = span;
      }
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorKind::kData, where + ": " + e.what());
    }
    if (FindRepetition(item.tokens, params) != item.span) {
      Fail(ErrorKind::kData, where + ": stored onset disagrees with the detector");
    }
    dataset.items.push_back(std::move(item));
  }
  dataset.attempts = static_cast<long long>(dataset.items.size());
  return dataset;
}

std::vector<TokenSequence> ReadTokenIdFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kIo, "cannot read " + path);
  std::vector<TokenSequence> out;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    std::istringstream fields(line);
    TokenSequence seq;
    std::string field;
    while (fields >> field) {
      std::size_t used = 0;
      long value = 0;
      try {
        value = std::stol(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != field.size() || value < 0 || value > INT32_MAX) {
        Fail(ErrorKind::kData, path + ":" + std::to_string(line_number) + ": bad token id '" +
                                   field + "'");
      }
      seq.push_back(static_cast<Token>(value));
    }
    if (!seq.empty()) out.push_back(std::move(seq));
  }
  return out;
}

WhitespaceTokenizer::WhitespaceTokenizer() : words_{"<bos>", "."} {}

TokenSequence WhitespaceTokenizer::Encode(const std::string& text, bool add_bos) {
  TokenSequence out;
  if (add_bos) out.push_back(kBos);
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    auto it = std::find(words_.begin(), words_.end(), word);
    if (it == words_.end()) {
      words_.push_back(word);
      it = words_.end() - 1;
    }
    out.push_back(static_cast<Token>(it - words_.begin()));
  }
  return out;
}

std::string WhitespaceTokenizer::Decode(std::span<const Token> tokens) const {
  std::string out;
  for (Token t : tokens) {
    if (!out.empty()) out += ' ';
    out += (t >= 0 && t < size()) ? words_[t] : "<" + std::to_string(t) + ">";
  }
  return out;
}

}  // namespace repneuron
