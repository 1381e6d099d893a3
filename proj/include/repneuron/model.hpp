#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "repneuron/plan.hpp"

namespace repneuron {

using Token = std::int32_t;
using TokenSequence = std::vector<Token>;

enum class ActivationKind {
  kRelu,       // act = max(0, x W_up + b_up)
  kGatedSilu,  // act = silu(x W_gate + b_gate) * (x W_up + b_up)
};

std::string ActivationKindName(ActivationKind kind);
ActivationKind ParseActivationKind(std::string_view name);

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 512;
  int max_context = 256;
  ActivationKind activation = ActivationKind::kRelu;
  std::uint64_t seed = 0;

  // Throws Error(kConfig) when a dimension is invalid.
  void Validate() const;

  int head_dim() const { return d_model / n_heads; }
  int total_neurons() const { return n_layers * d_ff; }

  bool operator==(const ModelConfig&) const = default;
};

// Offsets of every parameter tensor inside the flat parameter buffer.
struct LayerOffsets {
  std::size_t ln1_gain, ln1_bias;
  std::size_t qkv_weight, qkv_bias;  // [d, 3d], [3d]; columns are q | k | v
  std::size_t out_weight, out_bias;  // [d, d], [d]
  std::size_t ln2_gain, ln2_bias;
  std::size_t up_weight, up_bias;      // [d, d_ff], [d_ff]
  std::size_t gate_weight, gate_bias;  // gated activation only
  std::size_t down_weight, down_bias;  // [d_ff, d], [d]
};

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

struct ParameterLayout {
  std::size_t token_embedding = 0;     // [vocab, d]
  std::size_t position_embedding = 0;  // [max_context, d]
  std::vector<LayerOffsets> layers;
  std::size_t final_gain = 0, final_bias = 0;
  std::size_t unembed_weight = 0;  // [d, vocab]
  std::size_t unembed_bias = 0;    // [vocab]
  std::size_t total = 0;
  std::vector<TensorInfo> tensors;

  static ParameterLayout For(const ModelConfig& config);
};

// Decoder-only, pre-LayerNorm transformer with learned positions. Immutable
// after construction except through mutable_parameters(), which training and
// tests use.
class Model {
 public:
  // Parameters drawn deterministically from config.seed.
  explicit Model(const ModelConfig& config);

  // Adopts an existing parameter buffer (checkpoint loading).
  Model(const ModelConfig& config, std::vector<double> parameters);

  const ModelConfig& config() const { return config_; }
  const ParameterLayout& layout() const { return layout_; }
  std::span<const double> parameters() const { return parameters_; }
  std::span<double> mutable_parameters() { return parameters_; }

  // FNV-1a over the little-endian parameter bytes.
  std::uint64_t Checksum() const;

 private:
  ModelConfig config_;
  ParameterLayout layout_;
  std::vector<double> parameters_;
};

Model InitModel(const ModelConfig& config);

// Per-position, per-layer, per-neuron FFN activations (post-override).
class ActivationTrace {
 public:
  ActivationTrace() = default;
  ActivationTrace(int positions, int n_layers, int d_ff);

  int positions() const { return positions_; }
  int n_layers() const { return n_layers_; }
  int d_ff() const { return d_ff_; }
  int width() const { return n_layers_ * d_ff_; }

  double at(int position, const NeuronId& neuron) const {
    return values_[static_cast<std::size_t>(position) * width() +
                   static_cast<std::size_t>(neuron.layer) * d_ff_ + neuron.index];
  }
  std::span<const double> row(int position) const {
    return {values_.data() + static_cast<std::size_t>(position) * width(),
            static_cast<std::size_t>(width())};
  }
  std::span<double> row(int position) {
    return {values_.data() + static_cast<std::size_t>(position) * width(),
            static_cast<std::size_t>(width())};
  }
  const std::vector<double>& values() const { return values_; }

 private:
  int positions_ = 0;
  int n_layers_ = 0;
  int d_ff_ = 0;
  std::vector<double> values_;
};

// Causal attention probabilities, [layer][head][query][key].
class AttentionTrace {
 public:
  AttentionTrace() = default;
  AttentionTrace(int n_layers, int n_heads, int length);

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int length() const { return length_; }

  double at(int layer, int head, int query, int key) const {
    return probs_[Index(layer, head, query, key)];
  }
  double& at(int layer, int head, int query, int key) {
    return probs_[Index(layer, head, query, key)];
  }
  // Row of one query: `length()` entries, zero beyond the query position.
  std::span<const double> row(int layer, int head, int query) const {
    return {probs_.data() + Index(layer, head, query, 0),
            static_cast<std::size_t>(length_)};
  }

 private:
  std::size_t Index(int layer, int head, int query, int key) const {
    return ((static_cast<std::size_t>(layer) * n_heads_ + head) * length_ + query) *
               length_ + key;
  }

  int n_layers_ = 0;
  int n_heads_ = 0;
  int length_ = 0;
  std::vector<double> probs_;
};

struct ForwardOutput {
  int length = 0;
  int vocab_size = 0;
  std::vector<double> logits;  // [length, vocab]
  ActivationTrace activations;
  std::optional<AttentionTrace> attention;

  std::span<const double> logits_at(int position) const {
    return {logits.data() + static_cast<std::size_t>(position) * vocab_size,
            static_cast<std::size_t>(vocab_size)};
  }
};

// Full-sequence forward pass. `plan` overrides apply at positions >=
// plan->start_step and are visible to the trace and to every later layer.
ForwardOutput Forward(const Model& model, std::span<const Token> tokens,
                      bool record_attention = false,
                      const InterventionPlan* plan = nullptr);

struct DecodePolicy {
  enum class Mode { kGreedy, kSample };
  Mode mode = Mode::kGreedy;
  double temperature = 1.0;    // sampling only
  std::uint64_t rng_seed = 0;  // sampling only

  static DecodePolicy Greedy() { return {}; }
  static DecodePolicy Sample(double temperature, std::uint64_t seed) {
    return {Mode::kSample, temperature, seed};
  }
};

std::string DescribePolicy(const DecodePolicy& policy);

struct GenerationRequest {
  TokenSequence prompt;
  int n_steps = 0;
  DecodePolicy policy;
  std::optional<InterventionPlan> plan;
};

struct GenerationRecord {
  TokenSequence tokens;  // prompt followed by the generated tokens
  int prompt_length = 0;
  DecodePolicy policy;
};

// Incremental decoding with a key/value cache. Overrides are applied to every
// newly computed position >= plan.start_step.
GenerationRecord Generate(const Model& model, const TokenSequence& prompt,
                          int n_steps, const DecodePolicy& policy,
                          const InterventionPlan* plan = nullptr);

// Decodes several independent streams in lockstep; each record equals the
// corresponding single-stream Generate() call bit for bit.
std::vector<GenerationRecord> GenerateBatch(
    const Model& model, std::span<const GenerationRequest> requests);

// Greedy choice with the lowest token id winning ties.
Token ArgMax(std::span<const double> logits);

// exp(mean token NLL) under teacher forcing; plan overrides start at
// plan->start_step (absolute position within each sequence).
double Perplexity(const Model& model, std::span<const TokenSequence> corpus,
                  const InterventionPlan* plan = nullptr);

// Summed NLL and predicted-token count over one sequence (teacher forcing).
struct NllSum {
  double nll = 0.0;
  long long tokens = 0;
};
NllSum SequenceNll(const Model& model, std::span<const Token> tokens,
                   const InterventionPlan* plan = nullptr);

}  // namespace repneuron
