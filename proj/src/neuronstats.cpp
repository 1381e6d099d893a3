#include "repneuron/neuronstats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "repneuron/error.hpp"

namespace repneuron {

RangeSums ItemRangeSums(const ActivationTrace& trace, int onset, int r, int item) {
  if (r < 1) Fail(ErrorKind::kConfig, "r must be >= 1");
  if (onset - r < 0 || onset + r > trace.positions()) {
    Fail(ErrorKind::kRange, "item " + std::to_string(item) + ": trace of " +
                                std::to_string(trace.positions()) + " positions does not cover [" +
                                std::to_string(onset - r) + ", " + std::to_string(onset + r) +
                                ")");
  }
  const int width = trace.width();
  RangeSums sums{std::vector<double>(width, 0.0), std::vector<double>(width, 0.0)};
  for (int p = onset - r; p < onset; ++p) {
    const auto row = trace.row(p);
    for (int n = 0; n < width; ++n) sums.normal[n] += row[n];
  }
  for (int p = onset; p < onset + r; ++p) {
    const auto row = trace.row(p);
    for (int n = 0; n < width; ++n) sums.repetition[n] += row[n];
  }
  return sums;
}

NeuronScoreTable ReduceRangeSums(std::span<const RangeSums> items, int r, int n_layers, int d_ff) {
  NeuronScoreTable table;
  table.n_layers = n_layers;
  table.d_ff = d_ff;
  const int width = n_layers * d_ff;
  table.a.assign(width, 0.0);
  table.a_bar.assign(width, 0.0);
  table.delta.assign(width, 0.0);
  if (items.empty()) return table;
  const double divisor = static_cast<double>(items.size()) * r;
  std::vector<double> column(items.size());
  auto sorted_sum = [&](auto member, int n) {
    for (std::size_t i = 0; i < items.size(); ++i) column[i] = (items[i].*member)[n];
    std::sort(column.begin(), column.end());
    double total = 0.0;
    for (double v : column) total += v;
    return total;
  };
  for (int n = 0; n < width; ++n) {
    const double normal = sorted_sum(&RangeSums::normal, n);
    const double repetition = sorted_sum(&RangeSums::repetition, n);
    table.a[n] = normal / divisor;
    table.a_bar[n] = repetition / divisor;
    // one rounding after the difference: an exact common offset cancels exactly
    table.delta[n] = (repetition - normal) / divisor;
  }
  return table;
}

NeuronScoreTable RangeMeans(std::span<const ActivationTrace> traces, std::span<const int> onsets,
                            int r) {
  if (traces.size() != onsets.size()) Fail(ErrorKind::kData, "one onset per trace required");
  if (traces.empty()) Fail(ErrorKind::kData, "no traces to score");
  std::vector<RangeSums> sums;
  sums.reserve(traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i) {
    sums.push_back(ItemRangeSums(traces[i], onsets[i], r, static_cast<int>(i)));
  }
  return ReduceRangeSums(sums, r, traces[0].n_layers(), traces[0].d_ff());
}

int SelectionSize(const SelectionRule& rule, int total) {
  if (const auto* count = std::get_if<TopCount>(&rule)) {
    if (count->k < 1 || count->k > total) {
      Fail(ErrorKind::kConfig, "K=" + std::to_string(count->k) + " outside [1, " +
                                   std::to_string(total) + "]");
    }
    return count->k;
  }
  const double f = std::get<TopFraction>(rule).fraction;
  if (!(f > 0.0 && f <= 1.0)) Fail(ErrorKind::kConfig, "fraction must be in (0, 1]");
  // The epsilon keeps products such as 0.01 * 100 from rounding up to 2.
  const int k = static_cast<int>(std::ceil(f * total - 1e-9));
  return std::clamp(k, 1, total);
}

std::vector<NeuronId> RepetitionNeuronSet::Top(int k) const {
  if (k < 0 || k > static_cast<int>(neurons.size())) {
    Fail(ErrorKind::kConfig, "requested top " + std::to_string(k) + " of a set of " +
                                 std::to_string(neurons.size()));
  }
  return {neurons.begin(), neurons.begin() + k};
}

namespace {

std::vector<int> RankDescending(const NeuronScoreTable& table) {
  std::vector<int> order(table.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return table.delta[x] > table.delta[y]; });
  return order;
}

}  // namespace

RepetitionNeuronSet SelectTop(const NeuronScoreTable& table, const SelectionRule& rule) {
  const int k = SelectionSize(rule, table.size());
  const auto order = RankDescending(table);
  RepetitionNeuronSet set;
  for (int i = 0; i < k; ++i) {
    set.neurons.push_back(table.id(order[i]));
    set.deltas.push_back(table.delta[order[i]]);
  }
  return set;
}

LayerHistogram MakeLayerHistogram(std::span<const NeuronId> neurons, int n_layers) {
  LayerHistogram h;
  h.counts.assign(n_layers, 0);
  for (int l = 0; l < n_layers; ++l) h.relative_position.push_back((l + 1.0) / n_layers);
  for (const auto& n : neurons) {
    if (n.layer < 0 || n.layer >= n_layers) Fail(ErrorKind::kPlan, "neuron outside layer range");
    ++h.counts[n.layer];
  }
  return h;
}

std::vector<CurvePoint> SortedDeltaCurve(const NeuronScoreTable& table) {
  std::vector<int> order(table.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return table.delta[x] < table.delta[y]; });
  std::vector<CurvePoint> curve;
  curve.reserve(order.size());
  const double n = static_cast<double>(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    curve.push_back({(i + 1.0) / n, table.delta[order[i]]});
  }
  return curve;
}

ProfileAccumulator::ProfileAccumulator(std::vector<NeuronId> neurons, int half_window)
    : neurons_(std::move(neurons)), half_window_(half_window) {
  if (half_window_ < 1) Fail(ErrorKind::kConfig, "half_window must be >= 1");
  sums_.assign(neurons_.size(), std::vector<double>(2 * half_window_, 0.0));
}

void ProfileAccumulator::Add(const ActivationTrace& trace, int onset, int item) {
  if (onset - half_window_ < 0 || onset + half_window_ > trace.positions()) {
    Fail(ErrorKind::kRange, "item " + std::to_string(item) + ": profile window of " +
                                std::to_string(half_window_) + " exceeds the trace around onset " +
                                std::to_string(onset));
  }
  for (std::size_t j = 0; j < neurons_.size(); ++j) {
    for (int o = 0; o < 2 * half_window_; ++o) {
      sums_[j][o] += trace.at(onset - half_window_ + o, neurons_[j]);
    }
  }
  ++items_;
}

ActivationProfile ProfileAccumulator::Finish() const {
  ActivationProfile p;
  p.half_window = half_window_;
  p.neurons = neurons_;
  p.means = sums_;
  if (items_ > 0) {
    for (auto& row : p.means) {
      for (double& v : row) v /= items_;
    }
  }
  return p;
}

ActivationProfile MakeActivationProfile(std::span<const ActivationTrace> traces,
                                        std::span<const int> onsets,
                                        std::span<const NeuronId> neurons, int half_window) {
  if (traces.size() != onsets.size()) Fail(ErrorKind::kData, "one onset per trace required");
  ProfileAccumulator acc({neurons.begin(), neurons.end()}, half_window);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    acc.Add(traces[i], onsets[i], static_cast<int>(i));
  }
  return acc.Finish();
}

ScoreSweep::ScoreSweep(std::vector<int> r_values, int n_layers, int d_ff, int min_margin)
    : r_values_(std::move(r_values)), n_layers_(n_layers), d_ff_(d_ff) {
  for (int r : r_values_) {
    if (r < 1 || r > min_margin) {
      Fail(ErrorKind::kConfig, "sweep r=" + std::to_string(r) + " outside [1, min_margin=" +
                                   std::to_string(min_margin) + "]");
    }
  }
  sums_.resize(r_values_.size());
}

void ScoreSweep::Add(const ActivationTrace& trace, int onset) {
  for (std::size_t j = 0; j < r_values_.size(); ++j) {
    sums_[j].push_back(ItemRangeSums(trace, onset, r_values_[j], items_));
  }
  ++items_;
}

NeuronScoreTable ScoreSweep::Table(int items, int r) const {
  const auto it = std::find(r_values_.begin(), r_values_.end(), r);
  if (it == r_values_.end()) Fail(ErrorKind::kConfig, "r=" + std::to_string(r) + " not in sweep");
  if (items < 1 || items > items_) {
    Fail(ErrorKind::kConfig, "|X|=" + std::to_string(items) + " outside [1, " +
                                 std::to_string(items_) + "]");
  }
  const auto& all = sums_[it - r_values_.begin()];
  return ReduceRangeSums(std::span(all).first(items), r, n_layers_, d_ff_);
}

std::vector<SweepPoint> ScoreSweep::Run(std::span<const int> x_values,
                                        std::span<const int> r_values, int default_r,
                                        const SelectionRule& rule) const {
  std::vector<SweepPoint> points;
  auto add = [&](int items, int r) {
    const auto set = SelectTop(Table(items, r), rule);
    points.push_back({items, r, MakeLayerHistogram(set.neurons, n_layers_)});
  };
  for (int x : x_values) add(x, default_r);
  for (int r : r_values) add(items_, r);
  return points;
}

}  // namespace repneuron
