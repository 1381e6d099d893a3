#pragma once

#include <span>
#include <variant>
#include <vector>

#include "repneuron/model.hpp"

namespace repneuron {

// Per-neuron means over the r positions before the onset (a), from the onset
// (a_bar), and their difference. Entries are indexed layer * d_ff + index.
struct NeuronScoreTable {
  int n_layers = 0;
  int d_ff = 0;
  std::vector<double> a;
  std::vector<double> a_bar;
  std::vector<double> delta;

  int size() const { return n_layers * d_ff; }
  NeuronId id(int flat) const { return {flat / d_ff, flat % d_ff}; }
  int flat(const NeuronId& n) const { return n.layer * d_ff + n.index; }
};

// Sums of one item's activations over [onset - r, onset) and [onset, onset + r).
struct RangeSums {
  std::vector<double> normal;
  std::vector<double> repetition;
};

// Throws Error(kRange) naming `item` when the trace does not cover the window.
RangeSums ItemRangeSums(const ActivationTrace& trace, int onset, int r, int item = 0);

// Means with divisor |items| * r. Each neuron's per-item sums are added in
// ascending order of value, so the table does not depend on item order.
NeuronScoreTable ReduceRangeSums(std::span<const RangeSums> items, int r, int n_layers, int d_ff);

NeuronScoreTable RangeMeans(std::span<const ActivationTrace> traces, std::span<const int> onsets,
                            int r = 30);

struct TopCount {
  int k = 1;
};
struct TopFraction {
  double fraction = 0.005;
};
using SelectionRule = std::variant<TopCount, TopFraction>;

// ceil(fraction * total), at least 1.
int SelectionSize(const SelectionRule& rule, int total);

struct RepetitionNeuronSet {
  std::vector<NeuronId> neurons;  // descending delta, ties by ascending NeuronId
  std::vector<double> deltas;

  std::vector<NeuronId> Top(int k) const;
};

RepetitionNeuronSet SelectTop(const NeuronScoreTable& table, const SelectionRule& rule);

struct LayerHistogram {
  std::vector<int> counts;               // one per layer
  std::vector<double> relative_position;  // (layer + 1) / n_layers
};

LayerHistogram MakeLayerHistogram(std::span<const NeuronId> neurons, int n_layers);

struct CurvePoint {
  double relative_rank = 0.0;  // (i + 1) / N
  double delta = 0.0;
};

// Ascending deltas; equal deltas ordered by NeuronId.
std::vector<CurvePoint> SortedDeltaCurve(const NeuronScoreTable& table);

// Mean activation of each selected neuron at offsets -half_window ..
// half_window - 1 from the onset, averaged over items in item order.
struct ActivationProfile {
  int half_window = 0;
  std::vector<NeuronId> neurons;
  std::vector<std::vector<double>> means;  // [neuron][offset + half_window]
};

class ProfileAccumulator {
 public:
  ProfileAccumulator(std::vector<NeuronId> neurons, int half_window);
  void Add(const ActivationTrace& trace, int onset, int item = 0);
  ActivationProfile Finish() const;

 private:
  std::vector<NeuronId> neurons_;
  int half_window_;
  std::vector<std::vector<double>> sums_;
  int items_ = 0;
};

ActivationProfile MakeActivationProfile(std::span<const ActivationTrace> traces,
                                        std::span<const int> onsets,
                                        std::span<const NeuronId> neurons, int half_window = 30);

// Layer histograms of the top set recomputed on the first |X| items and with
// different r. X values use default_r; r values use every item.
struct SweepPoint {
  int items = 0;
  int r = 0;
  LayerHistogram histogram;
};

class ScoreSweep {
 public:
  // Throws Error(kConfig) when an r value exceeds min_margin.
  ScoreSweep(std::vector<int> r_values, int n_layers, int d_ff, int min_margin);
  void Add(const ActivationTrace& trace, int onset);
  int items() const { return items_; }
  // Table over the first `items` items for one of the configured r values.
  NeuronScoreTable Table(int items, int r) const;
  std::vector<SweepPoint> Run(std::span<const int> x_values, std::span<const int> r_values,
                              int default_r, const SelectionRule& rule) const;

 private:
  std::vector<int> r_values_;
  int n_layers_;
  int d_ff_;
  int items_ = 0;
  std::vector<std::vector<RangeSums>> sums_;  // [r index][item]
};

}  // namespace repneuron
