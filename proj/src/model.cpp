#include "repneuron/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

#include "model_internal.hpp"
#include "repneuron/error.hpp"
#include "repneuron/kernels.hpp"
#include "repneuron/rng.hpp"

namespace repneuron {

std::string ActivationKindName(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kRelu:
      return "relu";
    case ActivationKind::kGatedSilu:
      return "gated-silu";
  }
  return "unknown";
}

ActivationKind ParseActivationKind(std::string_view name) {
  if (name == "relu") return ActivationKind::kRelu;
  if (name == "gated-silu" || name == "swiglu") return ActivationKind::kGatedSilu;
  Fail(ErrorKind::kConfig, "unknown activation kind '" + std::string(name) + "'");
}

std::string ToString(const NeuronId& id) {
  return "L" + std::to_string(id.layer) + "N" + std::to_string(id.index);
}

std::string DescribeMode(const OverrideMode& mode) {
  if (const auto* set = std::get_if<SetTo>(&mode)) {
    return "set:" + std::to_string(set->value);
  }
  return "add:" + std::to_string(std::get<AddDelta>(mode).delta);
}

std::string DescribePolicy(const DecodePolicy& policy) {
  if (policy.mode == DecodePolicy::Mode::kGreedy) return "greedy";
  return "sample(t=" + std::to_string(policy.temperature) +
         ",seed=" + std::to_string(policy.rng_seed) + ")";
}

void ModelConfig::Validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) {
      Fail(ErrorKind::kConfig, std::string(name) + " must be positive, got " + std::to_string(v));
    }
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_context, "max_context");
  if (d_model % n_heads != 0) {
    Fail(ErrorKind::kConfig, "d_model " + std::to_string(d_model) +
                                 " is not divisible by n_heads " + std::to_string(n_heads));
  }
}

ParameterLayout ParameterLayout::For(const ModelConfig& config) {
  config.Validate();
  const std::size_t d = config.d_model;
  const std::size_t ff = config.d_ff;
  const std::size_t v = config.vocab_size;
  ParameterLayout layout;
  std::size_t cursor = 0;
  auto add = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    layout.tensors.push_back({name, cursor, rows, cols});
    const std::size_t offset = cursor;
    cursor += rows * cols;
    return offset;
  };
  layout.token_embedding = add("token_embedding", v, d);
  layout.position_embedding = add("position_embedding", config.max_context, d);
  const bool gated = config.activation == ActivationKind::kGatedSilu;
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerOffsets o{};
    o.ln1_gain = add(p + "ln1.gain", 1, d);
    o.ln1_bias = add(p + "ln1.bias", 1, d);
    o.qkv_weight = add(p + "attn.qkv.weight", d, 3 * d);
    o.qkv_bias = add(p + "attn.qkv.bias", 1, 3 * d);
    o.out_weight = add(p + "attn.out.weight", d, d);
    o.out_bias = add(p + "attn.out.bias", 1, d);
    o.ln2_gain = add(p + "ln2.gain", 1, d);
    o.ln2_bias = add(p + "ln2.bias", 1, d);
    o.up_weight = add(p + "ffn.up.weight", d, ff);
    o.up_bias = add(p + "ffn.up.bias", 1, ff);
    if (gated) {
      o.gate_weight = add(p + "ffn.gate.weight", d, ff);
      o.gate_bias = add(p + "ffn.gate.bias", 1, ff);
    } else {
      o.gate_weight = o.gate_bias = 0;
    }
    o.down_weight = add(p + "ffn.down.weight", ff, d);
    o.down_bias = add(p + "ffn.down.bias", 1, d);
    layout.layers.push_back(o);
  }
  layout.final_gain = add("final_ln.gain", 1, d);
  layout.final_bias = add("final_ln.bias", 1, d);
  layout.unembed_weight = add("unembed.weight", d, v);
  layout.unembed_bias = add("unembed.bias", 1, v);
  layout.total = cursor;
  return layout;
}

namespace {

bool EndsWith(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

Model::Model(const ModelConfig& config)
    : config_(config), layout_(ParameterLayout::For(config)) {
  parameters_.assign(layout_.total, 0.0);
  Rng rng(config.seed);
  const double base_std = 0.02;
  const double residual_std = base_std / std::sqrt(2.0 * config.n_layers);
  for (const TensorInfo& t : layout_.tensors) {
    double* data = parameters_.data() + t.offset;
    if (EndsWith(t.name, ".gain")) {
      std::fill(data, data + t.size(), 1.0);
    } else if (EndsWith(t.name, ".bias")) {
      // zero
    } else {
      const bool residual = EndsWith(t.name, "attn.out.weight") ||
                            EndsWith(t.name, "ffn.down.weight");
      const double std_dev = residual ? residual_std : base_std;
      for (std::size_t i = 0; i < t.size(); ++i) data[i] = std_dev * rng.Normal();
    }
  }
}

Model::Model(const ModelConfig& config, std::vector<double> parameters)
    : config_(config), layout_(ParameterLayout::For(config)), parameters_(std::move(parameters)) {
  if (parameters_.size() != layout_.total) {
    Fail(ErrorKind::kData, "parameter buffer has " + std::to_string(parameters_.size()) +
                               " values, layout expects " + std::to_string(layout_.total));
  }
}

std::uint64_t Model::Checksum() const {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (double v : parameters_) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      hash ^= (bits >> (8 * b)) & 0xffU;
      hash *= 0x100000001b3ULL;
    }
  }
  return hash;
}

Model InitModel(const ModelConfig& config) { return Model(config); }

ActivationTrace::ActivationTrace(int positions, int n_layers, int d_ff)
    : positions_(positions), n_layers_(n_layers), d_ff_(d_ff),
      values_(static_cast<std::size_t>(positions) * n_layers * d_ff, 0.0) {}

AttentionTrace::AttentionTrace(int n_layers, int n_heads, int length)
    : n_layers_(n_layers), n_heads_(n_heads), length_(length),
      probs_(static_cast<std::size_t>(n_layers) * n_heads * length * length, 0.0) {}

namespace detail {

CompiledPlan CompiledPlan::From(const ModelConfig& config, const InterventionPlan* plan) {
  CompiledPlan compiled;
  compiled.per_layer.assign(config.n_layers, {});
  if (plan == nullptr) return compiled;
  if (plan->start_step < 0) {
    Fail(ErrorKind::kPlan, "plan start_step must be non-negative");
  }
  for (const NeuronId& n : plan->targets) {
    if (n.layer < 0 || n.layer >= config.n_layers || n.index < 0 || n.index >= config.d_ff) {
      Fail(ErrorKind::kPlan, "plan targets neuron " + ToString(n) + " outside model with " +
                                 std::to_string(config.n_layers) + " layers x " +
                                 std::to_string(config.d_ff) + " neurons");
    }
    compiled.per_layer[n.layer].push_back(n.index);
  }
  for (auto& indices : compiled.per_layer) {
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  }
  compiled.active = !plan->targets.empty();
  compiled.start_step = plan->start_step;
  if (const auto* set = std::get_if<SetTo>(&plan->mode)) {
    compiled.set = true;
    compiled.amount = set->value;
  } else {
    compiled.set = false;
    compiled.amount = std::get<AddDelta>(plan->mode).delta;
  }
  return compiled;
}

KvCache::KvCache(const ModelConfig& config)
    : max_context_(config.max_context), d_model_(config.d_model),
      keys_(static_cast<std::size_t>(config.n_layers) * config.max_context * config.d_model),
      values_(keys_.size()) {}

void LayerNormRows(const double* x, std::size_t rows, std::size_t d, const double* gain,
                   const double* bias, double* out, double* mean_out, double* rstd_out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    double* o = out + r * d;
    for (std::size_t i = 0; i < d; ++i) o[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
    if (mean_out != nullptr) mean_out[r] = mean;
    if (rstd_out != nullptr) rstd_out[r] = rstd;
  }
}

void RunRows(const Model& model, std::span<KvCache* const> caches,
             std::span<const CompiledPlan* const> plans, const RowBatch& rows,
             const RowSinks& sinks) {
  const ModelConfig& cfg = model.config();
  const ParameterLayout& lay = model.layout();
  const double* p = model.parameters().data();
  const std::size_t d = cfg.d_model;
  const std::size_t ff = cfg.d_ff;
  const int heads = cfg.n_heads;
  const std::size_t hd = cfg.head_dim();
  const std::size_t n_rows = rows.size();
  const bool gated = cfg.activation == ActivationKind::kGatedSilu;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> x(n_rows * d);
  for (std::size_t r = 0; r < n_rows; ++r) {
    const double* te = p + lay.token_embedding + static_cast<std::size_t>(rows.token[r]) * d;
    const double* pe = p + lay.position_embedding + static_cast<std::size_t>(rows.position[r]) * d;
    for (std::size_t i = 0; i < d; ++i) x[r * d + i] = te[i] + pe[i];
  }

  Tape* tape = sinks.tape;
  if (tape != nullptr) {
    tape->length = static_cast<int>(n_rows);
    tape->layers.assign(cfg.n_layers, {});
  }

  std::vector<double> ln(n_rows * d), mean(n_rows), rstd(n_rows);
  std::vector<double> qkv(n_rows * 3 * d), att_out(n_rows * d), proj(n_rows * d);
  std::vector<double> up(n_rows * ff), gate(gated ? n_rows * ff : 0), act(n_rows * ff);
  std::vector<double> scores(cfg.max_context);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerOffsets& o = lay.layers[l];
    LayerTape* lt = tape != nullptr ? &tape->layers[l] : nullptr;
    if (lt != nullptr) lt->residual_in = x;

    LayerNormRows(x.data(), n_rows, d, p + o.ln1_gain, p + o.ln1_bias, ln.data(), mean.data(),
                  rstd.data());
    kernels::MatMul(ln.data(), n_rows, d, p + o.qkv_weight, 3 * d, p + o.qkv_bias, qkv.data());
    for (std::size_t r = 0; r < n_rows; ++r) {
      KvCache* cache = caches[rows.stream[r]];
      const double* row = qkv.data() + r * 3 * d;
      std::copy(row + d, row + 2 * d, cache->keys(l, rows.position[r]));
      std::copy(row + 2 * d, row + 3 * d, cache->values(l, rows.position[r]));
    }
    if (lt != nullptr) {
      lt->ln1_out = ln;
      lt->ln1_mean = mean;
      lt->ln1_rstd = rstd;
      lt->qkv = qkv;
      lt->att.assign(static_cast<std::size_t>(heads) * n_rows * n_rows, 0.0);
    }

    for (std::size_t r = 0; r < n_rows; ++r) {
      KvCache* cache = caches[rows.stream[r]];
      const int pos = rows.position[r];
      for (int h = 0; h < heads; ++h) {
        const double* q = qkv.data() + r * 3 * d + h * hd;
        double max_score = -std::numeric_limits<double>::infinity();
        for (int j = 0; j <= pos; ++j) {
          const double* kj = cache->keys(l, j) + h * hd;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += q[c] * kj[c];
          s *= scale;
          scores[j] = s;
          if (s > max_score) max_score = s;
        }
        double total = 0.0;
        for (int j = 0; j <= pos; ++j) {
          scores[j] = std::exp(scores[j] - max_score);
          total += scores[j];
        }
        for (int j = 0; j <= pos; ++j) scores[j] /= total;
        double* out = att_out.data() + r * d + h * hd;
        std::fill(out, out + hd, 0.0);
        for (int j = 0; j <= pos; ++j) {
          const double w = scores[j];
          const double* vj = cache->values(l, j) + h * hd;
          for (std::size_t c = 0; c < hd; ++c) out[c] += w * vj[c];
        }
        if (sinks.attention != nullptr) {
          for (int j = 0; j <= pos; ++j) sinks.attention->at(l, h, pos, j) = scores[j];
        }
        if (lt != nullptr) {
          double* dst = lt->att.data() + (static_cast<std::size_t>(h) * n_rows + pos) * n_rows;
          std::copy(scores.begin(), scores.begin() + pos + 1, dst);
        }
      }
    }
    if (lt != nullptr) lt->att_out = att_out;

    kernels::MatMul(att_out.data(), n_rows, d, p + o.out_weight, d, p + o.out_bias, proj.data());
    for (std::size_t i = 0; i < n_rows * d; ++i) x[i] += proj[i];
    if (lt != nullptr) lt->residual_mid = x;

    LayerNormRows(x.data(), n_rows, d, p + o.ln2_gain, p + o.ln2_bias, ln.data(), mean.data(),
                  rstd.data());
    kernels::MatMul(ln.data(), n_rows, d, p + o.up_weight, ff, p + o.up_bias, up.data());
    if (gated) {
      kernels::MatMul(ln.data(), n_rows, d, p + o.gate_weight, ff, p + o.gate_bias, gate.data());
      for (std::size_t i = 0; i < n_rows * ff; ++i) act[i] = Silu(gate[i]) * up[i];
    } else {
      for (std::size_t i = 0; i < n_rows * ff; ++i) act[i] = up[i] > 0.0 ? up[i] : 0.0;
    }
    for (std::size_t r = 0; r < n_rows; ++r) {
      const CompiledPlan* plan = plans[rows.stream[r]];
      if (plan != nullptr) plan->Apply(l, rows.position[r], act.data() + r * ff);
      if (sinks.trace != nullptr) {
        std::span<double> dst = sinks.trace->row(rows.position[r]);
        std::copy(act.begin() + r * ff, act.begin() + (r + 1) * ff, dst.begin() + l * ff);
      }
    }
    if (lt != nullptr) {
      lt->ln2_out = ln;
      lt->ln2_mean = mean;
      lt->ln2_rstd = rstd;
      lt->up = up;
      lt->gate = gate;
      lt->act = act;
    }
    kernels::MatMul(act.data(), n_rows, ff, p + o.down_weight, d, p + o.down_bias, proj.data());
    for (std::size_t i = 0; i < n_rows * d; ++i) x[i] += proj[i];
  }

  if (tape != nullptr) tape->residual_final = x;
  if (sinks.logits != nullptr || tape != nullptr) {
    LayerNormRows(x.data(), n_rows, d, p + lay.final_gain, p + lay.final_bias, ln.data(),
                  mean.data(), rstd.data());
    if (tape != nullptr) {
      tape->lnf_out = ln;
      tape->lnf_mean = mean;
      tape->lnf_rstd = rstd;
    }
    if (sinks.logits != nullptr) {
      kernels::MatMul(ln.data(), n_rows, d, p + lay.unembed_weight, cfg.vocab_size,
                      p + lay.unembed_bias, sinks.logits);
    }
  }
  for (std::size_t r = 0; r < n_rows; ++r) {
    KvCache* cache = caches[rows.stream[r]];
    cache->length = std::max(cache->length, rows.position[r] + 1);
  }
}

}  // namespace detail

namespace {

void CheckTokens(const ModelConfig& cfg, std::span<const Token> tokens) {
  for (Token t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      Fail(ErrorKind::kData, "token id " + std::to_string(t) + " outside vocabulary of " +
                                 std::to_string(cfg.vocab_size));
    }
  }
}

void CheckContext(const ModelConfig& cfg, std::size_t length) {
  if (length > static_cast<std::size_t>(cfg.max_context)) {
    Fail(ErrorKind::kContextOverflow, "sequence of length " + std::to_string(length) +
                                          " exceeds max_context " +
                                          std::to_string(cfg.max_context));
  }
}

double LogSumExp(std::span<const double> logits) {
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double v : logits) max_logit = std::max(max_logit, v);
  double total = 0.0;
  for (double v : logits) total += std::exp(v - max_logit);
  return max_logit + std::log(total);
}

Token Choose(std::span<const double> logits, const DecodePolicy& policy, Rng& rng,
             std::vector<double>& scratch) {
  if (policy.mode == DecodePolicy::Mode::kGreedy) return ArgMax(logits);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (double v : logits) max_logit = std::max(max_logit, v);
  scratch.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    scratch[i] = std::exp((logits[i] - max_logit) / policy.temperature);
  }
  return static_cast<Token>(rng.Categorical(scratch));
}

}  // namespace

ForwardOutput Forward(const Model& model, std::span<const Token> tokens, bool record_attention,
                      const InterventionPlan* plan) {
  const ModelConfig& cfg = model.config();
  if (tokens.empty()) Fail(ErrorKind::kData, "forward requires a non-empty sequence");
  CheckContext(cfg, tokens.size());
  CheckTokens(cfg, tokens);
  const detail::CompiledPlan compiled = detail::CompiledPlan::From(cfg, plan);

  const int length = static_cast<int>(tokens.size());
  ForwardOutput out;
  out.length = length;
  out.vocab_size = cfg.vocab_size;
  out.logits.assign(static_cast<std::size_t>(length) * cfg.vocab_size, 0.0);
  out.activations = ActivationTrace(length, cfg.n_layers, cfg.d_ff);
  if (record_attention) out.attention.emplace(cfg.n_layers, cfg.n_heads, length);

  detail::KvCache cache(cfg);
  detail::RowBatch rows;
  for (int i = 0; i < length; ++i) rows.Add(0, i, tokens[i]);
  detail::KvCache* cache_ptr = &cache;
  const detail::CompiledPlan* plan_ptr = &compiled;
  detail::RowSinks sinks;
  sinks.logits = out.logits.data();
  sinks.trace = &out.activations;
  sinks.attention = out.attention ? &*out.attention : nullptr;
  detail::RunRows(model, {&cache_ptr, 1}, {&plan_ptr, 1}, rows, sinks);
  return out;
}

Token ArgMax(std::span<const double> logits) {
  Token best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = static_cast<Token>(i);
  }
  return best;
}

std::vector<GenerationRecord> GenerateBatch(const Model& model,
                                            std::span<const GenerationRequest> requests) {
  const ModelConfig& cfg = model.config();
  const std::size_t n = requests.size();
  std::vector<detail::CompiledPlan> plans;
  plans.reserve(n);
  for (const GenerationRequest& req : requests) {
    if (req.prompt.empty()) Fail(ErrorKind::kData, "generation requires a non-empty prompt");
    if (req.n_steps < 0) Fail(ErrorKind::kConfig, "n_steps must be non-negative");
    if (req.policy.mode == DecodePolicy::Mode::kSample && !(req.policy.temperature > 0.0)) {
      Fail(ErrorKind::kConfig, "sampling temperature must be positive");
    }
    CheckContext(cfg, req.prompt.size() + static_cast<std::size_t>(req.n_steps));
    CheckTokens(cfg, req.prompt);
    const InterventionPlan* plan = req.plan ? &*req.plan : nullptr;
    if (plan != nullptr) {
      const long long end = static_cast<long long>(req.prompt.size()) + req.n_steps;
      if (plan->start_step < 0 || plan->start_step >= end) {
        Fail(ErrorKind::kPlan, "plan start_step " + std::to_string(plan->start_step) +
                                   " outside [0, " + std::to_string(end) + ")");
      }
    }
    plans.push_back(detail::CompiledPlan::From(cfg, plan));
  }

  std::vector<GenerationRecord> records(n);
  std::vector<std::unique_ptr<detail::KvCache>> caches;
  std::vector<detail::KvCache*> cache_ptrs;
  std::vector<const detail::CompiledPlan*> plan_ptrs;
  std::vector<Rng> rngs;
  std::vector<std::vector<double>> last_logits(n);
  std::vector<int> remaining(n);
  for (std::size_t s = 0; s < n; ++s) {
    caches.push_back(std::make_unique<detail::KvCache>(cfg));
    cache_ptrs.push_back(caches.back().get());
    plan_ptrs.push_back(&plans[s]);
    rngs.emplace_back(requests[s].policy.rng_seed);
    records[s].tokens = requests[s].prompt;
    records[s].prompt_length = static_cast<int>(requests[s].prompt.size());
    records[s].policy = requests[s].policy;
    remaining[s] = requests[s].n_steps;
  }

  // Prefill each stream on its own; the trailing logits seed decoding.
  for (std::size_t s = 0; s < n; ++s) {
    if (remaining[s] == 0) continue;
    const TokenSequence& prompt = requests[s].prompt;
    detail::RowBatch rows;
    for (std::size_t i = 0; i < prompt.size(); ++i) rows.Add(0, static_cast<int>(i), prompt[i]);
    std::vector<double> logits(prompt.size() * cfg.vocab_size);
    detail::RowSinks sinks;
    sinks.logits = logits.data();
    detail::KvCache* cache = cache_ptrs[s];
    const detail::CompiledPlan* plan = plan_ptrs[s];
    detail::RunRows(model, {&cache, 1}, {&plan, 1}, rows, sinks);
    last_logits[s].assign(logits.end() - cfg.vocab_size, logits.end());
  }

  std::vector<double> scratch;
  std::vector<double> step_logits;
  while (true) {
    detail::RowBatch rows;
    std::vector<std::size_t> row_stream;
    for (std::size_t s = 0; s < n; ++s) {
      if (remaining[s] == 0) continue;
      const Token next = Choose(last_logits[s], requests[s].policy, rngs[s], scratch);
      records[s].tokens.push_back(next);
      --remaining[s];
      if (remaining[s] > 0) {
        rows.Add(static_cast<int>(s), static_cast<int>(records[s].tokens.size()) - 1, next);
        row_stream.push_back(s);
      }
    }
    if (rows.size() == 0) break;
    step_logits.assign(rows.size() * cfg.vocab_size, 0.0);
    detail::RowSinks sinks;
    sinks.logits = step_logits.data();
    detail::RunRows(model, cache_ptrs, plan_ptrs, rows, sinks);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto begin = step_logits.begin() + static_cast<std::ptrdiff_t>(r * cfg.vocab_size);
      last_logits[row_stream[r]].assign(begin, begin + cfg.vocab_size);
    }
  }
  return records;
}

GenerationRecord Generate(const Model& model, const TokenSequence& prompt, int n_steps,
                          const DecodePolicy& policy, const InterventionPlan* plan) {
  GenerationRequest req{prompt, n_steps, policy, std::nullopt};
  if (plan != nullptr) req.plan = *plan;
  return std::move(GenerateBatch(model, {&req, 1}).front());
}

NllSum SequenceNll(const Model& model, std::span<const Token> tokens,
                   const InterventionPlan* plan) {
  if (tokens.size() < 2) {
    Fail(ErrorKind::kData, "perplexity needs sequences of length >= 2");
  }
  const ForwardOutput out = Forward(model, tokens, false, plan);
  NllSum sum;
  for (std::size_t m = 0; m + 1 < tokens.size(); ++m) {
    const auto logits = out.logits_at(static_cast<int>(m));
    sum.nll += LogSumExp(logits) - logits[tokens[m + 1]];
    ++sum.tokens;
  }
  return sum;
}

double Perplexity(const Model& model, std::span<const TokenSequence> corpus,
                  const InterventionPlan* plan) {
  if (corpus.empty()) Fail(ErrorKind::kData, "perplexity corpus is empty");
  double nll = 0.0;
  long long count = 0;
  for (const TokenSequence& seq : corpus) {
    const NllSum s = SequenceNll(model, seq, plan);
    nll += s.nll;
    count += s.tokens;
  }
  return std::exp(nll / static_cast<double>(count));
}

}  // namespace repneuron
