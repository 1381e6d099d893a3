#include "repneuron/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "model_internal.hpp"
#include "repneuron/error.hpp"
#include "repneuron/kernels.hpp"
#include "repneuron/rng.hpp"

namespace repneuron {

namespace {

using detail::LayerTape;
using detail::Tape;

// Transposed copies of the weight matrices, built once per gradient call.
struct TransposedWeights {
  std::vector<std::vector<double>> qkv, out, up, gate, down;
  std::vector<double> unembed;

  explicit TransposedWeights(const Model& model) {
    const ModelConfig& cfg = model.config();
    const ParameterLayout& lay = model.layout();
    const double* p = model.parameters().data();
    const std::size_t d = cfg.d_model, ff = cfg.d_ff;
    auto t = [&](std::size_t offset, std::size_t rows, std::size_t cols) {
      std::vector<double> out_buf(rows * cols);
      kernels::Transpose(p + offset, rows, cols, out_buf.data());
      return out_buf;
    };
    for (const LayerOffsets& o : lay.layers) {
      qkv.push_back(t(o.qkv_weight, d, 3 * d));
      out.push_back(t(o.out_weight, d, d));
      up.push_back(t(o.up_weight, d, ff));
      gate.push_back(cfg.activation == ActivationKind::kGatedSilu ? t(o.gate_weight, d, ff)
                                                                  : std::vector<double>{});
      down.push_back(t(o.down_weight, ff, d));
    }
    unembed = t(lay.unembed_weight, d, cfg.vocab_size);
  }
};

// dW[k x n] += A[m x k]^T dY[m x n];  db[n] += column sums of dY.
void LinearWeightGrad(const double* a, std::size_t m, std::size_t k, const double* dy,
                      std::size_t n, double* dw, double* db, std::vector<double>& scratch) {
  scratch.resize(k * m);
  kernels::Transpose(a, m, k, scratch.data());
  kernels::MatMulAccumulate(scratch.data(), k, m, dy, n, dw);
  if (db != nullptr) {
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t j = 0; j < n; ++j) db[j] += dy[r * n + j];
    }
  }
}

// Accumulates gain/bias grads and writes dx (overwrites) for a LayerNorm.
void LayerNormBackward(const double* dout, const double* x, const double* mean,
                       const double* rstd, const double* gain, std::size_t rows, std::size_t d,
                       double* dgain, double* dbias, double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* dr = dout + r * d;
    const double* xr = x + r * d;
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double xhat = (xr[i] - mean[r]) * rstd[r];
      const double dxhat = dr[i] * gain[i];
      dgain[i] += dr[i] * xhat;
      dbias[i] += dr[i];
      mean_dxhat += dxhat;
      mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    double* out = dx + r * d;
    for (std::size_t i = 0; i < d; ++i) {
      const double xhat = (xr[i] - mean[r]) * rstd[r];
      const double dxhat = dr[i] * gain[i];
      out[i] = rstd[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
  }
}

// Forward + backward of one sequence. Adds (1/normalizer)-scaled gradients
// into `grad` and returns the summed NLL.
double SequenceBackward(const Model& model, const TransposedWeights& wt,
                        std::span<const Token> tokens, double normalizer,
                        std::vector<double>& grad) {
  const ModelConfig& cfg = model.config();
  const ParameterLayout& lay = model.layout();
  const double* p = model.parameters().data();
  double* g = grad.data();
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.d_model, ff = cfg.d_ff, V = cfg.vocab_size;
  const int heads = cfg.n_heads;
  const std::size_t hd = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const bool gated = cfg.activation == ActivationKind::kGatedSilu;

  Tape tape;
  detail::KvCache cache(cfg);
  detail::RowBatch rows;
  for (std::size_t i = 0; i < T; ++i) rows.Add(0, static_cast<int>(i), tokens[i]);
  std::vector<double> logits(T * V);
  detail::RowSinks sinks;
  sinks.logits = logits.data();
  sinks.tape = &tape;
  detail::KvCache* cache_ptr = &cache;
  const detail::CompiledPlan* no_plan = nullptr;
  detail::RunRows(model, {&cache_ptr, 1}, {&no_plan, 1}, rows, sinks);

  // Softmax cross-entropy; the last position has no target.
  double nll = 0.0;
  std::vector<double> dlogits(T * V, 0.0);
  for (std::size_t m = 0; m + 1 < T; ++m) {
    const double* lr = logits.data() + m * V;
    double max_logit = lr[0];
    for (std::size_t v = 1; v < V; ++v) max_logit = std::max(max_logit, lr[v]);
    double total = 0.0;
    for (std::size_t v = 0; v < V; ++v) total += std::exp(lr[v] - max_logit);
    const double lse = max_logit + std::log(total);
    const Token target = tokens[m + 1];
    nll += lse - lr[target];
    double* dr = dlogits.data() + m * V;
    for (std::size_t v = 0; v < V; ++v) dr[v] = std::exp(lr[v] - lse) / normalizer;
    dr[target] -= 1.0 / normalizer;
  }

  std::vector<double> scratch;
  std::vector<double> dln(T * d), dx(T * d), dtmp(T * d);
  LinearWeightGrad(tape.lnf_out.data(), T, d, dlogits.data(), V, g + lay.unembed_weight,
                   g + lay.unembed_bias, scratch);
  kernels::MatMul(dlogits.data(), T, V, wt.unembed.data(), d, nullptr, dln.data());
  LayerNormBackward(dln.data(), tape.residual_final.data(), tape.lnf_mean.data(),
                    tape.lnf_rstd.data(), p + lay.final_gain, T, d, g + lay.final_gain,
                    g + lay.final_bias, dx.data());

  std::vector<double> dact(T * ff), dup(T * ff), dgate(gated ? T * ff : 0);
  std::vector<double> datt_out(T * d), dqkv(T * 3 * d), dprobs(T);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerOffsets& o = lay.layers[l];
    const LayerTape& lt = tape.layers[l];

    // FFN: x_out = x_mid + act W_down + b_down
    LinearWeightGrad(lt.act.data(), T, ff, dx.data(), d, g + o.down_weight, g + o.down_bias,
                     scratch);
    kernels::MatMul(dx.data(), T, d, wt.down[l].data(), ff, nullptr, dact.data());
    if (gated) {
      for (std::size_t i = 0; i < T * ff; ++i) {
        const double z = lt.gate[i];
        const double sig = 1.0 / (1.0 + std::exp(-z));
        const double silu = z * sig;
        dup[i] = dact[i] * silu;
        dgate[i] = dact[i] * lt.up[i] * sig * (1.0 + z * (1.0 - sig));
      }
    } else {
      for (std::size_t i = 0; i < T * ff; ++i) dup[i] = lt.up[i] > 0.0 ? dact[i] : 0.0;
    }
    LinearWeightGrad(lt.ln2_out.data(), T, d, dup.data(), ff, g + o.up_weight, g + o.up_bias,
                     scratch);
    kernels::MatMul(dup.data(), T, ff, wt.up[l].data(), d, nullptr, dln.data());
    if (gated) {
      LinearWeightGrad(lt.ln2_out.data(), T, d, dgate.data(), ff, g + o.gate_weight,
                       g + o.gate_bias, scratch);
      kernels::MatMulAccumulate(dgate.data(), T, ff, wt.gate[l].data(), d, dln.data());
    }
    LayerNormBackward(dln.data(), lt.residual_mid.data(), lt.ln2_mean.data(),
                      lt.ln2_rstd.data(), p + o.ln2_gain, T, d, g + o.ln2_gain, g + o.ln2_bias,
                      dtmp.data());
    for (std::size_t i = 0; i < T * d; ++i) dx[i] += dtmp[i];

    // Attention: x_mid = x_in + att_out W_out + b_out
    LinearWeightGrad(lt.att_out.data(), T, d, dx.data(), d, g + o.out_weight, g + o.out_bias,
                     scratch);
    kernels::MatMul(dx.data(), T, d, wt.out[l].data(), d, nullptr, datt_out.data());
    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    for (int h = 0; h < heads; ++h) {
      const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
      for (std::size_t i = 0; i < T; ++i) {
        const double* probs = lt.att.data() + (static_cast<std::size_t>(h) * T + i) * T;
        const double* dout = datt_out.data() + i * d + h * hd;
        double weighted = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = lt.qkv.data() + j * 3 * d + vo;
          double dp = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dp += dout[c] * vj[c];
          dprobs[j] = dp;
          weighted += probs[j] * dp;
          double* dvj = dqkv.data() + j * 3 * d + vo;
          for (std::size_t c = 0; c < hd; ++c) dvj[c] += probs[j] * dout[c];
        }
        const double* qi = lt.qkv.data() + i * 3 * d + qo;
        double* dqi = dqkv.data() + i * 3 * d + qo;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = probs[j] * (dprobs[j] - weighted) * scale;
          const double* kj = lt.qkv.data() + j * 3 * d + ko;
          double* dkj = dqkv.data() + j * 3 * d + ko;
          for (std::size_t c = 0; c < hd; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
    LinearWeightGrad(lt.ln1_out.data(), T, d, dqkv.data(), 3 * d, g + o.qkv_weight,
                     g + o.qkv_bias, scratch);
    kernels::MatMul(dqkv.data(), T, 3 * d, wt.qkv[l].data(), d, nullptr, dln.data());
    LayerNormBackward(dln.data(), lt.residual_in.data(), lt.ln1_mean.data(),
                      lt.ln1_rstd.data(), p + o.ln1_gain, T, d, g + o.ln1_gain, g + o.ln1_bias,
                      dtmp.data());
    for (std::size_t i = 0; i < T * d; ++i) dx[i] += dtmp[i];
  }

  for (std::size_t m = 0; m < T; ++m) {
    double* te = g + lay.token_embedding + static_cast<std::size_t>(tokens[m]) * d;
    double* pe = g + lay.position_embedding + m * d;
    for (std::size_t i = 0; i < d; ++i) {
      te[i] += dx[m * d + i];
      pe[i] += dx[m * d + i];
    }
  }
  return nll;
}

void CheckSequences(const ModelConfig& cfg, std::span<const TokenSequence> seqs) {
  for (const TokenSequence& s : seqs) {
    if (s.size() < 2) Fail(ErrorKind::kData, "training sequences need length >= 2");
    if (s.size() > static_cast<std::size_t>(cfg.max_context)) {
      Fail(ErrorKind::kContextOverflow, "training sequence of length " +
                                            std::to_string(s.size()) + " exceeds max_context");
    }
  }
}

bool IsMatrix(const TensorInfo& t) {
  return t.rows > 1 && t.name.find("embedding") == std::string::npos;
}

}  // namespace

double LossAndGradient(const Model& model, std::span<const TokenSequence> batch,
                       std::vector<double>& gradient) {
  CheckSequences(model.config(), batch);
  gradient.assign(model.layout().total, 0.0);
  long long count = 0;
  for (const TokenSequence& s : batch) count += static_cast<long long>(s.size()) - 1;
  const double normalizer = static_cast<double>(count);
  const TransposedWeights wt(model);
  double nll = 0.0;
  for (const TokenSequence& s : batch) {
    nll += SequenceBackward(model, wt, s, normalizer, gradient);
  }
  return nll / normalizer;
}

double MeanLoss(const Model& model, std::span<const TokenSequence> corpus) {
  if (corpus.empty()) Fail(ErrorKind::kData, "loss corpus is empty");
  double nll = 0.0;
  long long count = 0;
  for (const TokenSequence& s : corpus) {
    const NllSum part = SequenceNll(model, s);
    nll += part.nll;
    count += part.tokens;
  }
  return nll / static_cast<double>(count);
}

double ScheduledLearningRate(const TrainConfig& config, int step) {
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    return config.learning_rate * static_cast<double>(step + 1) / config.warmup_steps;
  }
  const int decay_steps = std::max(1, config.steps - config.warmup_steps);
  const double progress =
      std::min(1.0, static_cast<double>(step - config.warmup_steps) / decay_steps);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  const double floor = config.min_lr_fraction;
  return config.learning_rate * (floor + (1.0 - floor) * cosine);
}

TrainResult Train(const Model& init, std::span<const TokenSequence> corpus,
                  const TrainConfig& config) {
  if (corpus.empty()) Fail(ErrorKind::kData, "training corpus is empty");
  if (config.steps < 0 || config.batch_size <= 0) {
    Fail(ErrorKind::kConfig, "train steps must be >= 0 and batch_size > 0");
  }
  if (config.holdout_fraction < 0.0 || config.holdout_fraction >= 1.0) {
    Fail(ErrorKind::kConfig, "holdout_fraction must lie in [0, 1)");
  }
  CheckSequences(init.config(), corpus);

  std::size_t holdout = static_cast<std::size_t>(
      std::ceil(config.holdout_fraction * static_cast<double>(corpus.size())));
  if (holdout >= corpus.size()) holdout = corpus.size() > 1 ? 1 : 0;
  const std::span<const TokenSequence> train_set = corpus.first(corpus.size() - holdout);
  const std::span<const TokenSequence> holdout_set =
      holdout > 0 ? corpus.last(holdout) : train_set;

  TrainResult result{init, {}};
  Model& model = result.model;
  TrainReport& report = result.report;
  report.train_sequences = train_set.size();
  report.holdout_sequences = holdout;
  report.initial_holdout_loss = MeanLoss(model, holdout_set);

  const std::size_t n_params = model.layout().total;
  std::vector<double> m1(n_params, 0.0), m2(n_params, 0.0), grad;
  std::vector<char> decay(n_params, 0);
  for (const TensorInfo& t : model.layout().tensors) {
    if (IsMatrix(t)) std::fill(decay.begin() + t.offset, decay.begin() + t.offset + t.size(), 1);
  }

  Rng rng(config.seed);
  std::vector<TokenSequence> batch(config.batch_size);
  for (int step = 0; step < config.steps; ++step) {
    for (int b = 0; b < config.batch_size; ++b) batch[b] = train_set[rng.Below(train_set.size())];
    const double loss = LossAndGradient(model, batch, grad);

    double clip = 1.0;
    if (config.grad_clip > 0.0) {
      double norm_sq = 0.0;
      for (double v : grad) norm_sq += v * v;
      const double norm = std::sqrt(norm_sq);
      if (norm > config.grad_clip) clip = config.grad_clip / norm;
    }
    const double lr = ScheduledLearningRate(config, step);
    const double bc1 = 1.0 - std::pow(config.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(config.beta2, step + 1);
    std::span<double> params = model.mutable_parameters();
    for (std::size_t i = 0; i < n_params; ++i) {
      const double gi = grad[i] * clip;
      m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * gi;
      m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * gi * gi;
      const double update = (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + config.adam_eps);
      if (decay[i]) params[i] -= lr * config.weight_decay * params[i];
      params[i] -= lr * update;
    }
    if (config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps)) {
      report.log.push_back({step, lr, loss});
    }
  }
  report.final_holdout_loss = MeanLoss(model, holdout_set);
  return result;
}

}  // namespace repneuron
