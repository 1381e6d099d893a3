#include "repneuron/repdetect.hpp"

#include <string>

#include "repneuron/error.hpp"

namespace repneuron {

void RepetitionParams::Validate() const {
  if (gram < 1) Fail(ErrorKind::kConfig, "gram must be >= 1");
  if (occurrences < 2) Fail(ErrorKind::kConfig, "occurrences must be >= 2");
  if (window < gram) Fail(ErrorKind::kConfig, "window must be >= gram");
  if (min_margin < 0) Fail(ErrorKind::kConfig, "min_margin must be >= 0");
}

std::optional<RepetitionSpan> FindRepetition(std::span<const Token> tokens,
                                             const RepetitionParams& params) {
  params.Validate();
  const int length = static_cast<int>(tokens.size());
  const int k = params.occurrences;
  const int gram = params.gram;
  // (k-1) * period + gram <= window
  const int max_period = (params.window - gram) / (k - 1);

  // For a fixed period P, occurrences at p, p+P, ..., p+(k-1)P carry the same
  // gram iff each neighbouring pair agrees on gram tokens, i.e.
  // equal_run[p + jP] >= gram for j in [0, k-2], where equal_run[t] counts the
  // consecutive t' >= t with tokens[t'] == tokens[t'+P].
  std::vector<int> equal_run(static_cast<std::size_t>(length) + 1, 0);
  int best_onset = -1;
  int best_period = 0;
  for (int period = 1; period <= max_period; ++period) {
    const int last_start = length - ((k - 1) * period + gram);
    if (last_start < 0) break;
    equal_run[length - period] = 0;
    for (int t = length - period - 1; t >= 0; --t) {
      equal_run[t] = tokens[t] == tokens[t + period] ? equal_run[t + 1] + 1 : 0;
    }
    for (int start = 0; start <= last_start; ++start) {
      const int onset = start + period;
      if (best_onset >= 0 && onset >= best_onset) break;
      bool match = true;
      for (int j = 0; j + 1 < k && match; ++j) match = equal_run[start + j * period] >= gram;
      if (match) {
        best_onset = onset;
        best_period = period;
        break;
      }
    }
  }
  if (best_onset < 0) return std::nullopt;

  RepetitionSpan span;
  span.period = best_period;
  span.gram = gram;
  span.onset = best_onset;
  for (int i = 0; i < k; ++i) {
    span.unit_start_positions.push_back(best_onset - best_period + i * best_period);
  }
  return span;
}

bool IsEligible(std::span<const Token> tokens, const RepetitionSpan& span,
                const RepetitionParams& params) {
  const int length = static_cast<int>(tokens.size());
  return span.onset >= params.min_margin && length - span.onset >= params.min_margin;
}

}  // namespace repneuron
