#include "repneuron/heads.hpp"

#include <algorithm>

#include "repneuron/error.hpp"
#include "repneuron/rng.hpp"

namespace repneuron {

Probe MakeProbe(int prefix_length, int unit_length, int reps, int vocab, std::uint64_t seed,
                std::optional<Token> lead, Token lowest) {
  if (prefix_length < 0 || unit_length < 1 || reps < 1) {
    Fail(ErrorKind::kConfig, "probe needs prefix >= 0, unit >= 1, reps >= 1");
  }
  if (lead && prefix_length < 1) Fail(ErrorKind::kConfig, "probe lead token needs a prefix");
  std::vector<Token> pool;
  for (Token t = lowest; t < vocab; ++t) {
    if (!lead || t != *lead) pool.push_back(t);
  }
  const int drawn = prefix_length + unit_length - (lead ? 1 : 0);
  if (static_cast<int>(pool.size()) < drawn) {
    Fail(ErrorKind::kConfig, "vocab of " + std::to_string(vocab) + " too small for a probe of " +
                                 std::to_string(prefix_length + unit_length) + " distinct tokens");
  }
  Rng rng(seed);
  for (int i = 0; i < drawn; ++i) {
    const int j = i + static_cast<int>(rng.Below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  Probe probe;
  probe.prefix_length = prefix_length;
  probe.unit_length = unit_length;
  probe.reps = reps;
  probe.second_rep_start = prefix_length + 2 * unit_length;
  int next = 0;
  if (lead) probe.tokens.push_back(*lead);
  while (static_cast<int>(probe.tokens.size()) < prefix_length) probe.tokens.push_back(pool[next++]);
  const TokenSequence unit(pool.begin() + next, pool.begin() + next + unit_length);
  for (int r = 0; r < reps; ++r) probe.tokens.insert(probe.tokens.end(), unit.begin(), unit.end());
  return probe;
}

std::vector<QueryTargets> TargetSets(const Probe& probe) {
  std::vector<QueryTargets> out;
  const int length = static_cast<int>(probe.tokens.size());
  const int u = probe.unit_length;
  for (int q = probe.second_rep_start; q < length; ++q) {
    const int phase = (q - probe.prefix_length) % u;
    const Token self_token = probe.tokens[q];
    const Token next_token = probe.tokens[probe.prefix_length + (phase + 1) % u];
    QueryTargets t;
    t.query = q;
    for (int k = 0; k < q; ++k) {
      if (probe.tokens[k] == next_token) t.induction.push_back(k);
      if (probe.tokens[k] == self_token) t.self.push_back(k);
    }
    out.push_back(std::move(t));
  }
  return out;
}

HeadScore ScoreAttentionMatrix(const Probe& probe, std::span<const double> matrix) {
  const std::size_t length = probe.tokens.size();
  if (matrix.size() != length * length) {
    Fail(ErrorKind::kData, "attention matrix does not match probe length");
  }
  const auto targets = TargetSets(probe);
  return ScoreHead(targets, [&](int q, int k) { return matrix[q * length + k]; });
}

std::string HeadLabelName(HeadLabel label) {
  switch (label) {
    case HeadLabel::kInduction: return "induction";
    case HeadLabel::kSelfFinding: return "self_finding";
    case HeadLabel::kOther: return "other";
  }
  return "other";
}

HeadLabel LabelHead(const HeadScore& score, double threshold) {
  const bool induction = score.induction > threshold;
  const bool self = score.self > threshold;
  if (induction && self) {
    return score.self > score.induction ? HeadLabel::kSelfFinding : HeadLabel::kInduction;
  }
  if (induction) return HeadLabel::kInduction;
  if (self) return HeadLabel::kSelfFinding;
  return HeadLabel::kOther;
}

std::vector<HeadClassification> ClassifyHeads(const Model& model, std::span<const Probe> probes,
                                              double threshold) {
  const auto& c = model.config();
  std::vector<HeadScore> sums(static_cast<std::size_t>(c.n_layers) * c.n_heads);
  for (const auto& probe : probes) {
    const auto out = Forward(model, probe.tokens, /*record_attention=*/true);
    const auto targets = TargetSets(probe);
    for (int l = 0; l < c.n_layers; ++l) {
      for (int h = 0; h < c.n_heads; ++h) {
        const auto s = ScoreHead(targets, [&](int q, int k) { return out.attention->at(l, h, q, k); });
        sums[l * c.n_heads + h].induction += s.induction;
        sums[l * c.n_heads + h].self += s.self;
      }
    }
  }
  std::vector<HeadClassification> result;
  const double n = probes.empty() ? 1.0 : static_cast<double>(probes.size());
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      const HeadScore mean{sums[l * c.n_heads + h].induction / n, sums[l * c.n_heads + h].self / n};
      result.push_back({l, h, LabelHead(mean, threshold), mean.induction, mean.self});
    }
  }
  return result;
}

std::vector<Probe> ProbeBattery(int vocab, std::uint64_t seed, int prefix_length,
                                int seeds_per_shape, std::optional<Token> lead, Token lowest) {
  std::vector<Probe> probes;
  std::uint64_t stream = 0;
  for (int unit = 1; unit <= 8; ++unit) {
    for (int reps = 3; reps <= 5; ++reps) {
      for (int s = 0; s < seeds_per_shape; ++s) {
        probes.push_back(MakeProbe(prefix_length, unit, reps, vocab, DeriveSeed(seed, stream++),
                                   lead, lowest));
      }
    }
  }
  return probes;
}

std::vector<HeadLayerCount> HeadLayerHistogram(std::span<const HeadClassification> heads,
                                               int n_layers) {
  std::vector<HeadLayerCount> out(n_layers);
  for (int l = 0; l < n_layers; ++l) out[l].layer = l;
  for (const auto& h : heads) {
    if (h.layer < 0 || h.layer >= n_layers) Fail(ErrorKind::kData, "head layer out of range");
    if (h.label == HeadLabel::kInduction) ++out[h.layer].induction;
    if (h.label == HeadLabel::kSelfFinding) ++out[h.layer].self_finding;
  }
  return out;
}

}  // namespace repneuron
