#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "repneuron/model.hpp"

namespace repneuron {

struct TrainConfig {
  int steps = 600;
  int batch_size = 8;
  double learning_rate = 3e-3;
  int warmup_steps = 30;
  double min_lr_fraction = 0.1;  // cosine floor relative to learning_rate
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;        // global-norm clip; <= 0 disables
  double holdout_fraction = 0.05;
  int log_every = 25;
  std::uint64_t seed = 1;
};

struct TrainLogEntry {
  int step = 0;
  double learning_rate = 0.0;
  double batch_loss = 0.0;
};

struct TrainReport {
  double initial_holdout_loss = 0.0;
  double final_holdout_loss = 0.0;
  std::size_t train_sequences = 0;
  std::size_t holdout_sequences = 0;
  std::vector<TrainLogEntry> log;
};

struct TrainResult {
  Model model;
  TrainReport report;
};

// AdamW on mean next-token cross-entropy. Batches are drawn with a seeded
// generator and gradients are reduced in batch order, so the result is a
// deterministic function of (init, corpus, config).
TrainResult Train(const Model& init, std::span<const TokenSequence> corpus,
                  const TrainConfig& config);

// Mean next-token cross-entropy over every predicted token of the batch, and
// its gradient with respect to the flat parameter buffer (overwritten).
double LossAndGradient(const Model& model, std::span<const TokenSequence> batch,
                       std::vector<double>& gradient);

// Token-weighted mean cross-entropy (natural log).
double MeanLoss(const Model& model, std::span<const TokenSequence> corpus);

// Learning rate at a step under warmup + cosine decay.
double ScheduledLearningRate(const TrainConfig& config, int step);

}  // namespace repneuron
