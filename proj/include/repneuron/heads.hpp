#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "repneuron/model.hpp"

namespace repneuron {

// prefix + unit repeated `reps` times, every token distinct within prefix and
// unit. Queries start at the second repetition of the unit (its third
// occurrence); earlier occurrences only serve as attention targets.
struct Probe {
  TokenSequence tokens;
  int prefix_length = 0;
  int unit_length = 0;
  int reps = 0;
  int second_rep_start = 0;  // prefix_length + 2 * unit_length
};

// Tokens are drawn without replacement from [lowest, vocab). When `lead` is
// set it becomes the first prefix token and is never drawn again.
Probe MakeProbe(int prefix_length, int unit_length, int reps, int vocab, std::uint64_t seed,
                std::optional<Token> lead = std::nullopt, Token lowest = 0);

struct QueryTargets {
  int query = 0;
  std::vector<int> induction;  // earlier positions holding the token that comes next
  std::vector<int> self;       // earlier positions holding the query's own token
};

std::vector<QueryTargets> TargetSets(const Probe& probe);

struct HeadScore {
  double induction = 0.0;
  double self = 0.0;
};

// Mean over query positions of the attention mass on each target set.
// `attention(q, k)` is the probability that query q puts on key k.
template <typename Attention>
HeadScore ScoreHead(std::span<const QueryTargets> targets, Attention&& attention) {
  HeadScore score;
  if (targets.empty()) return score;
  for (const auto& t : targets) {
    double induction = 0.0;
    double self = 0.0;
    for (int k : t.induction) induction += attention(t.query, k);
    for (int k : t.self) self += attention(t.query, k);
    score.induction += induction;
    score.self += self;
  }
  score.induction /= static_cast<double>(targets.size());
  score.self /= static_cast<double>(targets.size());
  return score;
}

// Row-major [length x length] attention matrix.
HeadScore ScoreAttentionMatrix(const Probe& probe, std::span<const double> matrix);

enum class HeadLabel { kInduction, kSelfFinding, kOther };

std::string HeadLabelName(HeadLabel label);

// Above 0.5 qualifies; if both qualify the larger wins, an exact tie goes to
// induction.
HeadLabel LabelHead(const HeadScore& score, double threshold = 0.5);

struct HeadClassification {
  int layer = 0;
  int head = 0;
  HeadLabel label = HeadLabel::kOther;
  double induction_score = 0.0;
  double self_score = 0.0;
};

// Scores are averaged per probe first, then across probes.
std::vector<HeadClassification> ClassifyHeads(const Model& model, std::span<const Probe> probes,
                                              double threshold = 0.5);

// Unit lengths 1..8, reps 3..5, `seeds_per_shape` seeds each. Every probe
// begins with `lead` when set.
std::vector<Probe> ProbeBattery(int vocab, std::uint64_t seed, int prefix_length = 2,
                                int seeds_per_shape = 2, std::optional<Token> lead = std::nullopt,
                                Token lowest = 0);

struct HeadLayerCount {
  int layer = 0;
  int induction = 0;
  int self_finding = 0;
};

std::vector<HeadLayerCount> HeadLayerHistogram(std::span<const HeadClassification> heads,
                                               int n_layers);

}  // namespace repneuron
