#include <gtest/gtest.h>

#include <algorithm>

#include "oracles.hpp"
#include "repneuron/error.hpp"
#include "repneuron/neuronstats.hpp"
#include "repneuron/rng.hpp"

using namespace repneuron;

namespace {

ActivationTrace RandomTrace(Rng& rng, int positions, int layers, int dff, bool dyadic = false) {
  ActivationTrace t(positions, layers, dff);
  for (int p = 0; p < positions; ++p) {
    for (double& v : t.row(p)) {
      v = dyadic ? static_cast<double>(rng.Below(256)) / 64.0 : rng.Normal();
    }
  }
  return t;
}

struct Batch {
  std::vector<ActivationTrace> traces;
  std::vector<int> onsets;
};

Batch RandomBatch(std::uint64_t seed, int items, int layers, int dff, int r, bool dyadic = false) {
  Rng rng(seed);
  Batch b;
  for (int i = 0; i < items; ++i) {
    const int positions = 2 * r + 10 + static_cast<int>(rng.Below(40));
    b.onsets.push_back(r + static_cast<int>(rng.Below(positions - 2 * r + 1)));
    b.traces.push_back(RandomTrace(rng, positions, layers, dff, dyadic));
  }
  return b;
}

NeuronScoreTable TableFromDeltas(std::vector<double> deltas, int layers) {
  NeuronScoreTable t;
  t.n_layers = layers;
  t.d_ff = static_cast<int>(deltas.size()) / layers;
  t.a.assign(deltas.size(), 0.0);
  t.a_bar = deltas;
  t.delta = std::move(deltas);
  return t;
}

}  // namespace

TEST(RangeMeans, HandComputedTwoItems) {
  // one layer, two neurons, r = 2
  ActivationTrace x(4, 1, 2), y(5, 1, 2);
  const double xv[4][2] = {{1, 0}, {3, 0}, {5, 2}, {7, 2}};
  const double yv[5][2] = {{9, 9}, {0, 1}, {2, 1}, {4, 1}, {6, 1}};
  for (int p = 0; p < 4; ++p) std::copy(xv[p], xv[p] + 2, x.row(p).begin());
  for (int p = 0; p < 5; ++p) std::copy(yv[p], yv[p] + 2, y.row(p).begin());
  const std::vector<ActivationTrace> traces = {x, y};
  const std::vector<int> onsets = {2, 3};
  const auto t = RangeMeans(traces, onsets, 2);
  // neuron 0: before {1,3,0,2} -> 1.5, after {5,7,4,6} -> 5.5
  EXPECT_DOUBLE_EQ(t.a[0], 1.5);
  EXPECT_DOUBLE_EQ(t.a_bar[0], 5.5);
  EXPECT_DOUBLE_EQ(t.delta[0], 4.0);
  // neuron 1: before {0,0,1,1} -> 0.5, after {2,2,1,1} -> 1.5
  EXPECT_DOUBLE_EQ(t.delta[1], 1.0);
}

TEST(RangeMeans, MatchesDoubleSumOracle) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto b = RandomBatch(seed, 5, 3, 16, 30);
    const auto got = RangeMeans(b.traces, b.onsets, 30);
    const auto want = oracle::RangeScores(b.traces, b.onsets, 30);
    ASSERT_EQ(got.size(), 48);
    for (int n = 0; n < got.size(); ++n) {
      EXPECT_NEAR(got.a[n], want.a[n], 1e-12);
      EXPECT_NEAR(got.a_bar[n], want.a_bar[n], 1e-12);
      EXPECT_NEAR(got.delta[n], want.delta[n], 1e-12);
    }
  }
}

TEST(RangeMeans, ConstantOffsetLeavesDeltaUnchanged) {
  // 4 items of 8 positions: every mean divides by 32, so the sums stay exact
  auto b = RandomBatch(7, 4, 2, 8, 8, /*dyadic=*/true);
  const auto before = RangeMeans(b.traces, b.onsets, 8);
  for (auto& t : b.traces) {
    for (int p = 0; p < t.positions(); ++p) {
      for (double& v : t.row(p)) v += 0.75;
    }
  }
  const auto after = RangeMeans(b.traces, b.onsets, 8);
  EXPECT_EQ(before.delta, after.delta);
  for (int n = 0; n < before.size(); ++n) EXPECT_EQ(after.a[n], before.a[n] + 0.75);

  // delta alone stays exact for any divisor
  auto c = RandomBatch(11, 5, 2, 8, 10, /*dyadic=*/true);
  const auto base = RangeMeans(c.traces, c.onsets, 10);
  for (auto& t : c.traces) {
    for (int p = 0; p < t.positions(); ++p) {
      for (double& v : t.row(p)) v -= 1.625;
    }
  }
  EXPECT_EQ(RangeMeans(c.traces, c.onsets, 10).delta, base.delta);
}

TEST(RangeMeans, ItemOrderDoesNotChangeBits) {
  auto b = RandomBatch(8, 9, 2, 8, 12);
  const auto reference = RangeMeans(b.traces, b.onsets, 12);
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> order(b.traces.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.Shuffle(order);
    Batch shuffled;
    for (int i : order) {
      shuffled.traces.push_back(b.traces[i]);
      shuffled.onsets.push_back(b.onsets[i]);
    }
    const auto t = RangeMeans(shuffled.traces, shuffled.onsets, 12);
    EXPECT_EQ(t.a, reference.a);
    EXPECT_EQ(t.a_bar, reference.a_bar);
    EXPECT_EQ(t.delta, reference.delta);
  }
}

TEST(RangeMeans, WindowOutsideTraceIsARangeError) {
  Rng rng(1);
  const std::vector<ActivationTrace> traces = {RandomTrace(rng, 40, 1, 2)};
  for (int onset : {29, 11}) {
    const std::vector<int> onsets = {onset};
    try {
      RangeMeans(traces, onsets, 30);
      FAIL() << "onset " << onset;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kRange);
    }
  }
}

TEST(SelectionSize, FractionsRoundUp) {
  EXPECT_EQ(SelectionSize(TopFraction{0.005}, 2048), 11);
  EXPECT_EQ(SelectionSize(TopFraction{0.05}, 2048), 103);
  EXPECT_EQ(SelectionSize(TopFraction{0.01}, 100), 1);
  EXPECT_EQ(SelectionSize(TopFraction{0.001}, 10), 1);
  EXPECT_EQ(SelectionSize(TopFraction{1.0}, 10), 10);
  EXPECT_EQ(SelectionSize(TopCount{4}, 10), 4);
  EXPECT_THROW(SelectionSize(TopCount{11}, 10), Error);
  EXPECT_THROW(SelectionSize(TopCount{0}, 10), Error);
  EXPECT_THROW(SelectionSize(TopFraction{0.0}, 10), Error);
}

TEST(SelectTop, DescendingWithTiesByNeuronId) {
  const auto t = TableFromDeltas({0.5, 2.0, -1.0, 2.0, 0.5, 3.0}, 2);
  const auto s = SelectTop(t, TopCount{4});
  const std::vector<NeuronId> want = {{1, 2}, {0, 1}, {1, 0}, {0, 0}};
  EXPECT_EQ(s.neurons, want);
  EXPECT_EQ(s.deltas, (std::vector<double>{3.0, 2.0, 2.0, 0.5}));
  EXPECT_EQ(s.Top(2), (std::vector<NeuronId>{{1, 2}, {0, 1}}));
  EXPECT_THROW(s.Top(5), Error);
}

TEST(SelectTop, SelectedDeltasDominateTheRest) {
  Rng rng(4);
  std::vector<double> deltas(300);
  for (double& d : deltas) d = static_cast<double>(rng.Below(20));
  const auto t = TableFromDeltas(deltas, 3);
  const auto s = SelectTop(t, TopFraction{0.1});
  ASSERT_EQ(s.neurons.size(), 30u);
  const double floor = s.deltas.back();
  std::vector<NeuronId> chosen = s.neurons;
  std::sort(chosen.begin(), chosen.end());
  for (int n = 0; n < t.size(); ++n) {
    if (!std::binary_search(chosen.begin(), chosen.end(), t.id(n))) {
      EXPECT_LE(t.delta[n], floor);
    }
  }
}

TEST(LayerHistogram, CountsAndPositions) {
  const std::vector<NeuronId> ns = {{0, 1}, {3, 2}, {3, 0}, {1, 5}};
  const auto h = MakeLayerHistogram(ns, 4);
  EXPECT_EQ(h.counts, (std::vector<int>{1, 1, 0, 2}));
  EXPECT_EQ(h.relative_position, (std::vector<double>{0.25, 0.5, 0.75, 1.0}));
  const std::vector<NeuronId> bad = {{4, 0}};
  EXPECT_THROW(MakeLayerHistogram(bad, 4), Error);
}

TEST(SortedDeltaCurve, AscendingWithStrictRanks) {
  Rng rng(5);
  std::vector<double> deltas(64);
  for (double& d : deltas) d = static_cast<double>(rng.Below(5)) - 2.0;
  const auto curve = SortedDeltaCurve(TableFromDeltas(deltas, 2));
  ASSERT_EQ(curve.size(), 64u);
  for (std::size_t i = 1; i < curve.size(); ++i) {
    EXPECT_LT(curve[i - 1].relative_rank, curve[i].relative_rank);
    EXPECT_LE(curve[i - 1].delta, curve[i].delta);
  }
  EXPECT_DOUBLE_EQ(curve.back().relative_rank, 1.0);
}

TEST(ActivationProfile, AlignsAtOnset) {
  ActivationTrace a(10, 1, 1), b(12, 1, 1);
  for (int p = 0; p < 10; ++p) a.row(p)[0] = p;
  for (int p = 0; p < 12; ++p) b.row(p)[0] = 10 * p;
  const std::vector<ActivationTrace> traces = {a, b};
  const std::vector<int> onsets = {4, 6};
  const std::vector<NeuronId> ns = {{0, 0}};
  const auto profile = MakeActivationProfile(traces, onsets, ns, 3);
  // offsets -3..2: a gives 1..6, b gives 30..80
  EXPECT_EQ(profile.means[0], (std::vector<double>{15.5, 21.0, 26.5, 32.0, 37.5, 43.0}));
  const std::vector<int> late = {8, 6};
  EXPECT_THROW(MakeActivationProfile(traces, late, ns, 3), Error);
}

TEST(ScoreSweep, AgreesWithDirectScoring) {
  const auto b = RandomBatch(9, 6, 2, 8, 20);
  ScoreSweep sweep({5, 20}, 2, 8, 50);
  for (std::size_t i = 0; i < b.traces.size(); ++i) sweep.Add(b.traces[i], b.onsets[i]);
  const std::span<const ActivationTrace> first4(b.traces.data(), 4);
  const std::span<const int> onsets4(b.onsets.data(), 4);
  EXPECT_EQ(sweep.Table(4, 20).delta, RangeMeans(first4, onsets4, 20).delta);
  EXPECT_EQ(sweep.Table(6, 5).delta, RangeMeans(b.traces, b.onsets, 5).delta);

  const std::vector<int> xs = {3, 6}, rs = {5};
  const auto points = sweep.Run(xs, rs, 20, TopCount{3});
  ASSERT_EQ(points.size(), 3u);
  for (const auto& p : points) {
    int total = 0;
    for (int c : p.histogram.counts) total += c;
    EXPECT_EQ(total, 3);
  }
  EXPECT_THROW(ScoreSweep({60}, 2, 8, 50), Error);
}
