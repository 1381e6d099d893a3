#pragma once

// Forward engine shared by inference, decoding and training.

#include <cmath>
#include <span>
#include <vector>

#include "repneuron/model.hpp"

namespace repneuron::detail {

inline constexpr double kLayerNormEps = 1e-5;

// Plan resolved against a model: per-layer sorted, de-duplicated indices.
struct CompiledPlan {
  bool active = false;
  int start_step = 0;
  bool set = true;
  double amount = 0.0;
  std::vector<std::vector<int>> per_layer;

  static CompiledPlan From(const ModelConfig& config, const InterventionPlan* plan);

  void Apply(int layer, int position, double* act_row) const {
    if (!active || position < start_step) return;
    for (int idx : per_layer[layer]) {
      if (set) {
        act_row[idx] = amount;
      } else {
        act_row[idx] += amount;
      }
    }
  }
};

struct KvCache {
  explicit KvCache(const ModelConfig& config);

  double* keys(int layer, int position) {
    return keys_.data() + (static_cast<std::size_t>(layer) * max_context_ + position) * d_model_;
  }
  double* values(int layer, int position) {
    return values_.data() + (static_cast<std::size_t>(layer) * max_context_ + position) * d_model_;
  }

  int length = 0;

 private:
  int max_context_;
  int d_model_;
  std::vector<double> keys_;
  std::vector<double> values_;
};

struct LayerTape {
  std::vector<double> residual_in;  // [T, d]
  std::vector<double> ln1_out, ln1_mean, ln1_rstd;
  std::vector<double> qkv;      // [T, 3d]
  std::vector<double> att;      // [H, T, T]
  std::vector<double> att_out;  // [T, d]
  std::vector<double> residual_mid;
  std::vector<double> ln2_out, ln2_mean, ln2_rstd;
  std::vector<double> up, gate, act;  // [T, d_ff]
};

// Intermediates of a single-stream forward from position 0, for backprop.
struct Tape {
  int length = 0;
  std::vector<LayerTape> layers;
  std::vector<double> residual_final;
  std::vector<double> lnf_out, lnf_mean, lnf_rstd;
};

struct RowBatch {
  std::vector<int> stream;
  std::vector<int> position;
  std::vector<Token> token;

  std::size_t size() const { return token.size(); }
  void Add(int s, int p, Token t) {
    stream.push_back(s);
    position.push_back(p);
    token.push_back(t);
  }
};

struct RowSinks {
  double* logits = nullptr;                // [rows, vocab]
  ActivationTrace* trace = nullptr;        // indexed by row position
  AttentionTrace* attention = nullptr;     // indexed by row position
  Tape* tape = nullptr;                    // single stream, rows 0..T-1
};

// Runs the rows through every layer. Rows of one stream must be consecutive
// positions starting at that stream's cache length; keys/values of all rows
// are written before attention so a row attends to itself and earlier rows.
void RunRows(const Model& model, std::span<KvCache* const> caches,
             std::span<const CompiledPlan* const> plans, const RowBatch& rows,
             const RowSinks& sinks);

void LayerNormRows(const double* x, std::size_t rows, std::size_t d,
                   const double* gain, const double* bias, double* out,
                   double* mean_out, double* rstd_out);

inline double Silu(double z) { return z / (1.0 + std::exp(-z)); }

}  // namespace repneuron::detail
