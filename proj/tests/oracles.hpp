#pragma once

// Slow reference implementations used by the unit tests and the acceptance
// binary. Written straight from the definitions, sharing no code with src/.

#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "repneuron/heads.hpp"
#include "repneuron/model.hpp"
#include "repneuron/repdetect.hpp"

namespace oracle {

using repneuron::Token;

struct Span {
  int onset = 0;
  int period = 0;
  int first = 0;
};

// Every onset from left to right, every period from small to large.
inline std::optional<Span> FindRepetition(std::span<const Token> t, int gram, int occurrences,
                                          int window) {
  const int n = static_cast<int>(t.size());
  for (int onset = 1; onset < n; ++onset) {
    for (int period = 1; period <= onset; ++period) {
      const int first = onset - period;
      const int extent = (occurrences - 1) * period + gram;
      if (extent > window || first + extent > n) continue;
      bool same = true;
      for (int occ = 1; occ < occurrences && same; ++occ) {
        for (int i = 0; i < gram; ++i) {
          if (t[first + occ * period + i] != t[first + i]) {
            same = false;
            break;
          }
        }
      }
      if (same) return Span{onset, period, first};
    }
  }
  return std::nullopt;
}

struct Scores {
  std::vector<double> a, a_bar, delta;
};

// Plain double sums over items and positions, divided once at the end.
inline Scores RangeScores(std::span<const repneuron::ActivationTrace> traces,
                          std::span<const int> onsets, int r) {
  const int layers = traces[0].n_layers();
  const int dff = traces[0].d_ff();
  Scores s;
  for (int l = 0; l < layers; ++l) {
    for (int i = 0; i < dff; ++i) {
      double before = 0.0, after = 0.0;
      for (std::size_t x = 0; x < traces.size(); ++x) {
        for (int j = 0; j < r; ++j) {
          before += traces[x].at(onsets[x] - r + j, {l, i});
          after += traces[x].at(onsets[x] + j, {l, i});
        }
      }
      const double count = static_cast<double>(traces.size()) * r;
      s.a.push_back(before / count);
      s.a_bar.push_back(after / count);
      s.delta.push_back(after / count - before / count);
    }
  }
  return s;
}

// Naive transformer forward, position by position, with the intervention
// applied to the FFN output of each layer. Returns [length][vocab] logits.
inline std::vector<std::vector<double>> Logits(const repneuron::Model& model,
                                               std::span<const Token> tokens,
                                               const repneuron::InterventionPlan* plan = nullptr) {
  const auto& c = model.config();
  const auto& lay = model.layout();
  const double* p = model.parameters().data();
  const int d = c.d_model, ff = c.d_ff, H = c.n_heads, hd = c.d_model / c.n_heads;
  const int T = static_cast<int>(tokens.size());

  std::set<std::pair<int, int>> targets;
  if (plan != nullptr) {
    for (const auto& n : plan->targets) targets.insert({n.layer, n.index});
  }

  auto layer_norm = [&](const std::vector<double>& x, std::size_t gain, std::size_t bias) {
    double mean = 0;
    for (double v : x) mean += v;
    mean /= d;
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= d;
    std::vector<double> out(d);
    for (int i = 0; i < d; ++i) out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * p[gain + i] + p[bias + i];
    return out;
  };
  auto affine = [&](const std::vector<double>& x, std::size_t w, std::size_t b, int cols, int col0,
                    int ncols) {
    std::vector<double> out(ncols);
    for (int j = 0; j < ncols; ++j) {
      double s = p[b + col0 + j];
      for (int i = 0; i < static_cast<int>(x.size()); ++i) s += x[i] * p[w + static_cast<std::size_t>(i) * cols + col0 + j];
      out[j] = s;
    }
    return out;
  };

  std::vector<std::vector<double>> h(T, std::vector<double>(d));
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < d; ++i) {
      h[t][i] = p[lay.token_embedding + static_cast<std::size_t>(tokens[t]) * d + i] +
                p[lay.position_embedding + static_cast<std::size_t>(t) * d + i];
    }
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& o = lay.layers[l];
    std::vector<std::vector<double>> q(T), k(T), v(T);
    for (int t = 0; t < T; ++t) {
      const auto x = layer_norm(h[t], o.ln1_gain, o.ln1_bias);
      q[t] = affine(x, o.qkv_weight, o.qkv_bias, 3 * d, 0, d);
      k[t] = affine(x, o.qkv_weight, o.qkv_bias, 3 * d, d, d);
      v[t] = affine(x, o.qkv_weight, o.qkv_bias, 3 * d, 2 * d, d);
    }
    for (int t = 0; t < T; ++t) {
      std::vector<double> mixed(d, 0.0);
      for (int head = 0; head < H; ++head) {
        std::vector<double> w(t + 1);
        double top = -1e300;
        for (int j = 0; j <= t; ++j) {
          double s = 0;
          for (int e = 0; e < hd; ++e) s += q[t][head * hd + e] * k[j][head * hd + e];
          w[j] = s / std::sqrt(static_cast<double>(hd));
          top = std::max(top, w[j]);
        }
        double z = 0;
        for (double& x : w) z += (x = std::exp(x - top));
        for (int j = 0; j <= t; ++j) {
          for (int e = 0; e < hd; ++e) mixed[head * hd + e] += w[j] / z * v[j][head * hd + e];
        }
      }
      const auto proj = affine(mixed, o.out_weight, o.out_bias, d, 0, d);
      for (int i = 0; i < d; ++i) h[t][i] += proj[i];
    }
    for (int t = 0; t < T; ++t) {
      const auto x = layer_norm(h[t], o.ln2_gain, o.ln2_bias);
      auto act = affine(x, o.up_weight, o.up_bias, ff, 0, ff);
      if (c.activation == repneuron::ActivationKind::kGatedSilu) {
        const auto g = affine(x, o.gate_weight, o.gate_bias, ff, 0, ff);
        for (int i = 0; i < ff; ++i) act[i] *= g[i] / (1.0 + std::exp(-g[i]));
      } else {
        for (double& a : act) a = std::max(a, 0.0);
      }
      if (plan != nullptr && t >= plan->start_step) {
        for (int i = 0; i < ff; ++i) {
          if (!targets.contains({l, i})) continue;
          if (const auto* set = std::get_if<repneuron::SetTo>(&plan->mode)) {
            act[i] = set->value;
          } else {
            act[i] += std::get<repneuron::AddDelta>(plan->mode).delta;
          }
        }
      }
      const auto down = affine(act, o.down_weight, o.down_bias, d, 0, d);
      for (int i = 0; i < d; ++i) h[t][i] += down[i];
    }
  }
  std::vector<std::vector<double>> logits(T);
  for (int t = 0; t < T; ++t) {
    const auto x = layer_norm(h[t], lay.final_gain, lay.final_bias);
    logits[t] = affine(x, lay.unembed_weight, lay.unembed_bias, c.vocab_size, 0, c.vocab_size);
  }
  return logits;
}

// exp of the mean negative log-likelihood of every next token.
inline double Perplexity(const repneuron::Model& model, std::span<const repneuron::TokenSequence> corpus,
                         const repneuron::InterventionPlan* plan = nullptr) {
  double nll = 0;
  long long count = 0;
  for (const auto& seq : corpus) {
    const auto logits = Logits(model, seq, plan);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      double top = -1e300;
      for (double z : logits[t]) top = std::max(top, z);
      double sum = 0;
      for (double z : logits[t]) sum += std::exp(z - top);
      nll += top + std::log(sum) - logits[t][seq[t + 1]];
      ++count;
    }
  }
  return std::exp(nll / count);
}

// Attention mass on the next-to-be-generated token and on the query's own
// token, averaged over queries from the third unit on.
inline repneuron::HeadScore HeadScore(const repneuron::Probe& probe, std::span<const double> matrix) {
  const int n = static_cast<int>(probe.tokens.size());
  const int u = probe.unit_length;
  double induction = 0, self = 0;
  int queries = 0;
  for (int q = probe.prefix_length + 2 * u; q < n; ++q) {
    const int phase = (q - probe.prefix_length) % u;
    const Token next = probe.tokens[probe.prefix_length + (phase + 1) % u];
    for (int k = 0; k < q; ++k) {
      if (probe.tokens[k] == next) induction += matrix[q * n + k];
      if (probe.tokens[k] == probe.tokens[q]) self += matrix[q * n + k];
    }
    ++queries;
  }
  return {induction / queries, self / queries};
}

}  // namespace oracle
