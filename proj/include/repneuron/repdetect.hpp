#pragma once

#include <optional>
#include <span>
#include <vector>

#include "repneuron/model.hpp"

namespace repneuron {

// A text "contains repetition" when the same `gram`-token sequence occurs
// `occurrences` times at equal spacing, the whole run fitting in `window`
// tokens. Overlapping occurrences (period < gram) are allowed.
struct RepetitionParams {
  int gram = 10;
  int occurrences = 3;
  int window = 100;
  int min_margin = 50;

  void Validate() const;
  bool operator==(const RepetitionParams&) const = default;
};

struct RepetitionSpan {
  std::vector<int> unit_start_positions;  // p_1 < p_2 < ... equally spaced
  int period = 0;
  int gram = 0;
  int onset = 0;  // p_2: where the repeated sequence appears the second time

  bool operator==(const RepetitionSpan&) const = default;
};

// Earliest onset wins, then the smallest period (which fixes p_1).
std::optional<RepetitionSpan> FindRepetition(std::span<const Token> tokens,
                                             const RepetitionParams& params);

// At least min_margin tokens before and from the onset.
bool IsEligible(std::span<const Token> tokens, const RepetitionSpan& span,
                const RepetitionParams& params);

}  // namespace repneuron
