#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "repneuron/corpus.hpp"
#include "repneuron/error.hpp"

using namespace repneuron;

namespace {

std::string TempPath(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "repneuron_test_corpus";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

CorpusSpec SmallSpec() {
  CorpusSpec s;
  s.num_sequences = 300;
  return s;
}

ModelConfig TinyModel() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_ff = 16;
  c.vocab_size = 20;
  c.max_context = 80;
  c.seed = 3;
  return c;
}

RepetitionParams TinyParams() {
  RepetitionParams p;
  p.gram = 4;
  p.occurrences = 3;
  p.window = 40;
  p.min_margin = 10;
  return p;
}

HarvestOptions TinyHarvest() {
  HarvestOptions o;
  o.length = 60;
  o.sampled_tokens = 5;
  o.budget_factor = 50;
  return o;
}

}  // namespace

TEST(SyntheticLanguage, CycleCoversEveryWordOnce) {
  const SyntheticLanguage lang(CorpusSpec{});
  std::set<Token> words(lang.cycle().begin(), lang.cycle().end());
  EXPECT_EQ(words.size(), 510u);
  EXPECT_EQ(*words.begin(), 2);
  EXPECT_EQ(*words.rbegin(), 511);
  for (std::size_t i = 0; i < lang.cycle().size(); ++i) {
    EXPECT_EQ(lang.Successor(lang.cycle()[i]), lang.cycle()[(i + 1) % lang.cycle().size()]);
  }
  EXPECT_EQ(lang.loop_enders().size(), 3u);
  for (Token w : lang.loop_enders()) EXPECT_TRUE(lang.IsEnder(w));
}

TEST(SyntheticLanguage, SentenceLengthsWithinRange) {
  const CorpusSpec spec;
  const SyntheticLanguage lang(spec);
  int run = 0;
  std::vector<int> lengths;
  for (Token w : lang.cycle()) {
    ++run;
    if (lang.IsEnder(w)) {
      lengths.push_back(run);
      run = 0;
    }
  }
  EXPECT_EQ(run, 0);
  for (int len : lengths) {
    EXPECT_GE(len, spec.min_sentence_words);
    EXPECT_LT(len, 2 * spec.max_sentence_words);
  }
}

TEST(SynthTrainingCorpus, DeterministicAndWellFormed) {
  const auto spec = SmallSpec();
  const auto a = SynthTrainingCorpus(spec, 4);
  EXPECT_EQ(a, SynthTrainingCorpus(spec, 4));
  EXPECT_NE(a, SynthTrainingCorpus(spec, 5));
  ASSERT_EQ(a.size(), 300u);
  for (const auto& s : a) {
    ASSERT_EQ(static_cast<int>(s.size()), spec.sequence_length);
    EXPECT_EQ(s[0], kBos);
    for (std::size_t i = 1; i < s.size(); ++i) {
      EXPECT_NE(s[i], kBos);
      EXPECT_LT(s[i], spec.vocab_size);
    }
  }
}

TEST(SynthTrainingCorpus, MarkovTextHasNoRepetitionSpan) {
  auto spec = SmallSpec();
  spec.markov_weight = 1;
  spec.loop_weight = 0;
  spec.copy_weight = 0;
  const SyntheticLanguage lang(spec);
  for (const auto& s : SynthTrainingCorpus(spec, 6)) {
    EXPECT_FALSE(FindRepetition(s, RepetitionParams{}));
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
      if (lang.IsEnder(s[i])) EXPECT_EQ(s[i + 1], kPeriod);
    }
  }
}

TEST(SynthTrainingCorpus, LoopTextMostlyRepeats) {
  auto spec = SmallSpec();
  spec.markov_weight = 0;
  spec.loop_weight = 1;
  spec.copy_weight = 0;
  const auto corpus = SynthTrainingCorpus(spec, 7);
  const SyntheticLanguage lang(spec);
  int with_span = 0;
  for (const auto& s : corpus) {
    const auto span = FindRepetition(s, RepetitionParams{});
    if (!span) continue;
    ++with_span;
    // one pass of the loop holds exactly one loop-prone ender
    int enders = 0;
    for (int p = span->onset - span->period; p < span->onset; ++p) enders += lang.IsLoopEnder(s[p]);
    EXPECT_EQ(enders, 1);
  }
  EXPECT_GE(with_span, static_cast<int>(0.9 * corpus.size()));
}

TEST(SynthTrainingCorpus, CopyTextsRepeatTheirUnit) {
  auto spec = SmallSpec();
  spec.markov_weight = 0;
  spec.loop_weight = 0;
  spec.copy_weight = 1;
  for (const auto& s : SynthTrainingCorpus(spec, 8)) {
    EXPECT_TRUE(FindRepetition(s, RepetitionParams{}));
  }
}

TEST(SynthTrainingCorpus, RejectsBadSpec) {
  auto spec = SmallSpec();
  spec.markov_weight = spec.loop_weight = spec.copy_weight = 0;
  EXPECT_THROW(SynthTrainingCorpus(spec, 1), Error);
  spec = SmallSpec();
  spec.vocab_size = 8;
  EXPECT_THROW(SynthTrainingCorpus(spec, 1), Error);
}

TEST(Harvest, ItemsCarryVerifiedEligibleSpans) {
  const Model model(TinyModel());
  const auto params = TinyParams();
  const auto d = BuildRepetitionDataset(model, params, 12, 21, TinyHarvest());
  ASSERT_EQ(d.items.size(), 12u);
  EXPECT_GE(d.attempts, 12);
  for (const auto& item : d.items) {
    ASSERT_TRUE(item.span);
    EXPECT_EQ(item.tokens.size(), 60u);
    EXPECT_EQ(item.tokens[0], kBos);
    EXPECT_EQ(FindRepetition(item.tokens, params), item.span);
    EXPECT_TRUE(IsEligible(item.tokens, *item.span, params));
  }
}

TEST(Harvest, SameSeedSameDatasetAtAnyBatchSize) {
  const Model model(TinyModel());
  auto opts = TinyHarvest();
  const auto a = BuildRepetitionDataset(model, TinyParams(), 8, 22, opts);
  opts.batch = 3;
  const auto b = BuildRepetitionDataset(model, TinyParams(), 8, 22, opts);
  EXPECT_EQ(Sequences(a), Sequences(b));
  EXPECT_EQ(a.attempts, b.attempts);
  const auto c = BuildRepetitionDataset(model, TinyParams(), 8, 23, opts);
  EXPECT_NE(Sequences(a), Sequences(c));
}

TEST(Harvest, ExcludedSequencesNeverReturn) {
  const Model model(TinyModel());
  auto opts = TinyHarvest();
  const auto first = BuildRepetitionDataset(model, TinyParams(), 10, 24, opts);
  const auto taken = Sequences(first);
  opts.exclude = taken;
  const auto second = BuildRepetitionDataset(model, TinyParams(), 10, 24, opts);
  EXPECT_EQ(CountShared(first.items, second.items), 0u);
  EXPECT_EQ(CountShared(first.items, first.items), 10u);
}

TEST(Harvest, BudgetExhaustionReportsPartialResult) {
  const Model model(TinyModel());
  auto params = TinyParams();
  params.min_margin = 40;  // no span can sit 40 tokens from both ends of 60
  auto opts = TinyHarvest();
  opts.budget_factor = 2;
  try {
    BuildRepetitionDataset(model, params, 5, 25, opts);
    FAIL();
  } catch (const PartialDatasetError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kPartialDataset);
    EXPECT_TRUE(e.partial().items.empty());
    EXPECT_EQ(e.partial().attempts, 10);
  }
}

TEST(Harvest, CleanItemsHaveNoSpan) {
  const Model model(TinyModel());
  auto params = TinyParams();
  params.gram = 8;
  auto opts = TinyHarvest();
  opts.length = 30;
  const auto d = BuildCleanDataset(model, params, 4, 26, opts);
  for (const auto& item : d.items) {
    EXPECT_FALSE(item.span);
    EXPECT_FALSE(FindRepetition(item.tokens, params));
  }
}

TEST(DatasetJsonl, RoundTripAndSpanCheck) {
  const Model model(TinyModel());
  const auto params = TinyParams();
  Dataset d = BuildRepetitionDataset(model, params, 4, 27, TinyHarvest());
  d.items.push_back({{0, 5, 6, 7}, std::nullopt, 9, "manual"});
  const auto path = TempPath("round.jsonl");
  WriteDatasetJsonl(path, d);
  const auto back = ReadDatasetJsonl(path, params);
  ASSERT_EQ(back.items.size(), d.items.size());
  for (std::size_t i = 0; i < d.items.size(); ++i) {
    EXPECT_EQ(back.items[i].tokens, d.items[i].tokens);
    EXPECT_EQ(back.items[i].span, d.items[i].span);
    EXPECT_EQ(back.items[i].seed, d.items[i].seed);
    EXPECT_EQ(back.items[i].policy, d.items[i].policy);
  }

  // A stored onset that the detector does not reproduce is rejected.
  Dataset bad = d;
  bad.items[0].span->onset += 1;
  WriteDatasetJsonl(path, bad);
  try {
    ReadDatasetJsonl(path, params);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
  }
  std::ofstream(path) << "{\"tokens\": [1, 2], \"onset\": null}\n";
  EXPECT_EQ(ReadDatasetJsonl(path, params).items.size(), 1u);
  std::ofstream(path) << "{\"tokens\": [1, 2]}\n";
  EXPECT_THROW(ReadDatasetJsonl(path, params), Error);
}

TEST(TokenIdFile, ParsesAndRejects) {
  const auto path = TempPath("ids.txt");
  std::ofstream(path) << "0 5 6\n\n7 8\n";
  const auto seqs = ReadTokenIdFile(path);
  ASSERT_EQ(seqs.size(), 2u);
  EXPECT_EQ(seqs[1], (TokenSequence{7, 8}));
  std::ofstream(path) << "0 5 x\n";
  EXPECT_THROW(ReadTokenIdFile(path), Error);
  std::ofstream(path) << "0 -1\n";
  EXPECT_THROW(ReadTokenIdFile(path), Error);
}

TEST(WhitespaceTokenizer, RoundTrip) {
  WhitespaceTokenizer tok;
  const auto ids = tok.Encode("the cat sat . the cat sat .");
  EXPECT_EQ(ids[0], kBos);
  EXPECT_EQ(ids[4], kPeriod);
  EXPECT_EQ(ids[1], ids[5]);
  EXPECT_EQ(tok.Decode(std::span(ids).subspan(1)), "the cat sat . the cat sat .");
  EXPECT_EQ(tok.size(), 5);
}
