// Acceptance run: one PASS/FAIL line per criterion. Tolerances live here.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"
#include "repneuron/checkpoint.hpp"
#include "repneuron/corpus.hpp"
#include "repneuron/heads.hpp"
#include "repneuron/model.hpp"
#include "repneuron/neuronstats.hpp"
#include "repneuron/pipeline.hpp"
#include "repneuron/repdetect.hpp"
#include "repneuron/rng.hpp"
#include "repneuron/traceio.hpp"
#include "repneuron/train.hpp"

using namespace repneuron;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kDetectorSeconds = 60.0;
constexpr double kScoreTolerance = 1e-12;
constexpr double kLogitTolerance = 1e-9;
constexpr double kPipelineSeconds = 30 * 60.0;
constexpr int kDeactivationMinWins = 3;
constexpr double kSparsityRatio = 3.0;
constexpr int kGeneralizationMin = 8;
constexpr double kHeadOracleTolerance = 1e-9;
constexpr double kPerplexityTolerance = 1e-6;
constexpr double kGradientTolerance = 1e-3;
constexpr double kGradientSample = 0.01;

int failures = 0;

void Report(const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
}

double Since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string Format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

TokenSequence RandomTokens(Rng& rng, int n, int vocab) {
  TokenSequence t(static_cast<std::size_t>(n));
  for (auto& x : t) x = static_cast<Token>(rng.Below(static_cast<std::uint64_t>(vocab)));
  return t;
}

bool SameAsOracle(const TokenSequence& t, const RepetitionParams& p) {
  const auto got = FindRepetition(t, p);
  const auto want = oracle::FindRepetition(t, p.gram, p.occurrences, p.window);
  if (got.has_value() != want.has_value()) return false;
  return !got || (got->onset == want->onset && got->period == want->period);
}

// ---------------------------------------------------------------------------

void DetectorCriterion() {
  const auto t0 = Clock::now();
  Rng rng(101);
  int agree = 0, total = 0, present = 0;
  const int vocabs[3] = {4, 20, 200};
  for (int i = 0; i < 1000; ++i) {
    RepetitionParams p;
    p.gram = 1 + static_cast<int>(rng.Below(10));
    p.occurrences = 2 + static_cast<int>(rng.Below(3));
    p.window = p.gram + static_cast<int>(rng.Below(100));
    const auto t = RandomTokens(rng, static_cast<int>(rng.Below(301)), vocabs[i % 3]);
    agree += SameAsOracle(t, p);
    present += oracle::FindRepetition(t, p.gram, p.occurrences, p.window).has_value();
    ++total;
  }
  // planted loops under the default parameters, half of them broken by one token
  for (int i = 0; i < 200; ++i) {
    const int unit = 1 + static_cast<int>(rng.Below(40));
    const int reps = 1 + static_cast<int>(rng.Below(5));
    auto t = RandomTokens(rng, static_cast<int>(rng.Below(80)), 200);
    const auto u = RandomTokens(rng, unit, 200);
    for (int r = 0; r < reps; ++r) t.insert(t.end(), u.begin(), u.end());
    const auto tail = RandomTokens(rng, static_cast<int>(rng.Below(60)), 200);
    t.insert(t.end(), tail.begin(), tail.end());
    if (i % 2 == 1 && !t.empty()) t[rng.Below(t.size())] = static_cast<Token>(200 + rng.Below(3));
    const RepetitionParams p;
    agree += SameAsOracle(t, p);
    present += oracle::FindRepetition(t, p.gram, p.occurrences, p.window).has_value();
    ++total;
  }
  const double s = Since(t0);
  Report("detector-oracle", agree == total && s < kDetectorSeconds,
         Format("%d/%d agree (%d with a span), %.1fs", agree, total, present, s));
}

void ScoreTableCriterion() {
  const auto t0 = Clock::now();
  Rng rng(202);
  double worst = 0;
  bool shift_exact = true;
  for (int trial = 0; trial < 20; ++trial) {
    const int r = 1 + static_cast<int>(rng.Below(30));
    const int layers = 1 + static_cast<int>(rng.Below(4));
    const int dff = 1 + static_cast<int>(rng.Below(32));
    std::vector<ActivationTrace> traces;
    std::vector<int> onsets;
    for (int i = 0; i < 5; ++i) {
      const int positions = 2 * r + static_cast<int>(rng.Below(40));
      ActivationTrace t(positions, layers, dff);
      for (int p = 0; p < positions; ++p) {
        // multiples of 1/256 in [-4, 4): every sum is exact
        for (double& v : t.row(p)) v = (static_cast<double>(rng.Below(2048)) - 1024.0) / 256.0;
      }
      traces.push_back(std::move(t));
      onsets.push_back(r + static_cast<int>(rng.Below(static_cast<std::uint64_t>(positions - 2 * r + 1))));
    }
    const auto got = RangeMeans(traces, onsets, r);
    const auto want = oracle::RangeScores(traces, onsets, r);
    for (int n = 0; n < got.size(); ++n) {
      worst = std::max({worst, std::abs(got.a[n] - want.a[n]), std::abs(got.a_bar[n] - want.a_bar[n]),
                        std::abs(got.delta[n] - want.delta[n])});
    }
    const double offset = (static_cast<double>(rng.Below(64)) - 32.0) / 8.0;
    for (auto& t : traces) {
      for (int p = 0; p < t.positions(); ++p) {
        for (double& v : t.row(p)) v += offset;
      }
    }
    const auto shifted = RangeMeans(traces, onsets, r);
    shift_exact = shift_exact && shifted.delta == got.delta &&
                  SelectTop(shifted, TopCount{1}).neurons == SelectTop(got, TopCount{1}).neurons;
  }
  const double s = Since(t0);
  Report("score-table-oracle", worst <= kScoreTolerance && shift_exact && s < 60,
         Format("max |diff| %.3g over 20 five-item batches, shift invariance %s, %.1fs", worst,
                shift_exact ? "exact" : "BROKEN", s));
}

double MaxGap(const ForwardOutput& got, const std::vector<std::vector<double>>& want) {
  double gap = 0;
  for (int t = 0; t < got.length; ++t) {
    for (int v = 0; v < got.vocab_size; ++v) gap = std::max(gap, std::abs(got.logits_at(t)[v] - want[t][v]));
  }
  return gap;
}

void OverrideCriterion(const Model& model, const TokenSequence& text) {
  const auto t0 = Clock::now();
  const int last = static_cast<int>(text.size()) - 1;
  const int dff = model.config().d_ff;
  const int layers = model.config().n_layers;
  std::vector<NeuronId> some;
  for (int l = 0; l < layers; ++l) {
    for (int i = 0; i < 5; ++i) some.push_back({l, (i * 97 + l * 31) % dff});
  }
  const std::vector<InterventionPlan> plans = {
      {some, SetTo{0.0}, 50},
      {some, AddDelta{1.0}, 50},
      {some, SetTo{2.5}, 0},
      {{some.front(), some.front(), some.back()}, AddDelta{-0.75}, last},
  };
  double worst = MaxGap(Forward(model, text), oracle::Logits(model, text));
  for (const auto& plan : plans) worst = std::max(worst, MaxGap(Forward(model, text, false, &plan), oracle::Logits(model, text, &plan)));

  const auto base = Forward(model, text);
  bool noop = true;
  for (const auto& n : some) {
    const InterventionPlan plan{{n}, SetTo{base.activations.at(last, n)}, last};
    const auto hooked = Forward(model, text, false, &plan);
    noop = noop && hooked.logits == base.logits && hooked.activations.values() == base.activations.values();
  }
  const double s = Since(t0);
  Report("override-exactness", worst <= kLogitTolerance && noop && s < 60,
         Format("max logit gap %.3g vs naive recompute, SetTo(recorded) %s over %zu neurons, %.1fs", worst,
                noop ? "bit-exact" : "CHANGED OUTPUT", some.size(), s));
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> TreeHashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = Sha256File(e.path().string());
  }
  return out;
}

double RunPipeline(const std::string& cli, const std::string& config, const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cmd = cli + " --config " + config + " --out " + dir.string() + " run > " +
                          (dir.parent_path() / (dir.filename().string() + ".log")).string() + " 2>&1";
  const auto t0 = Clock::now();
  const int status = std::system(cmd.c_str());
  const double s = Since(t0);
  if (status != 0) std::fprintf(stderr, "pipeline failed (%d): %s\n", status, cmd.c_str());
  return status == 0 ? s : -1.0;
}

void DeterminismCriterion(const fs::path& a, const fs::path& b, double sa, double sb, const RunConfig& config) {
  if (sa < 0 || sb < 0) {
    Report("determinism", false, "pipeline run failed, see the run logs");
    return;
  }
  const auto ha = TreeHashes(a);
  const auto hb = TreeHashes(b);
  std::string first_diff;
  for (const auto& [name, hash] : ha) {
    const auto it = hb.find(name);
    if (it == hb.end() || it->second != hash) {
      first_diff = name;
      break;
    }
  }
  if (first_diff.empty() && ha.size() != hb.size()) first_diff = "(file sets differ)";
  const bool shape = config.model.n_layers == 4 && config.model.d_ff == 512 && config.sizes.scoring >= 200;
  Report("determinism", first_diff.empty() && sa <= kPipelineSeconds && sb <= kPipelineSeconds && shape,
         Format("%zu files, %s; run times %.0fs and %.0fs; %d layers, d_ff %d, %d scoring texts", ha.size(),
                first_diff.empty() ? "byte-identical" : ("differs at " + first_diff).c_str(), sa, sb,
                config.model.n_layers, config.model.d_ff, config.sizes.scoring));
}

std::string Series(const std::vector<int>& k, const std::vector<double>& treated, const std::vector<double>& random) {
  std::string s;
  for (std::size_t i = 0; i < k.size(); ++i) {
    s += Format("%sk=%d %.1f/%.1f", i ? ", " : "", k[i], treated[i], random[i]);
  }
  return s;
}

void DirectionalCriteria(const RunSummary& s, const RunConfig& config) {
  int wins = 0, strict = 0, compared = 0;
  for (std::size_t i = 0; i < s.deactivate_k.size(); ++i) {
    if (s.deactivate_k[i] == 0) continue;
    ++compared;
    wins += s.deactivate_treated[i] <= s.deactivate_random[i];
    strict += s.deactivate_treated[i] < s.deactivate_random[i];
  }
  Report("deactivation", wins >= kDeactivationMinWins && config.random_seeds == 5,
         Format("treated <= random at %d of %d k (%d strictly); %s; %d random seeds", wins, compared, strict,
                Series(s.deactivate_k, s.deactivate_treated, s.deactivate_random).c_str(), config.random_seeds));

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < s.activate_k.size(); ++i) {
    if (s.activate_k[i] > 0) order.push_back(i);
  }
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return s.activate_k[x] > s.activate_k[y]; });
  bool ok = order.size() >= 2 && config.random_seeds == 5;
  for (std::size_t j = 0; j < 2 && j < order.size(); ++j) {
    ok = ok && s.activate_treated[order[j]] >= s.activate_random[order[j]];
  }
  Report("activation", ok,
         "treated >= random at the two largest k; " + Series(s.activate_k, s.activate_treated, s.activate_random));

  Report("sparsity", s.sparsity_ratio >= kSparsityRatio,
         Format("mean delta of top 0.5%% / next 4.5%% = %.3f (need >= %.1f)", s.sparsity_ratio, kSparsityRatio));
  Report("generalization", s.generalization_positive >= kGeneralizationMin && s.generalization_total == 10 &&
                               config.sizes.heldout >= 50,
         Format("%d of %d top neurons have a_bar > a on %d held-out texts", s.generalization_positive,
                s.generalization_total, config.sizes.heldout));
}

// ---------------------------------------------------------------------------

void HeadCriterion() {
  // The 11-token probe: 2 prefix tokens, a 3-token unit, three times.
  const auto small = MakeProbe(2, 3, 3, 50, 9);
  const int n = static_cast<int>(small.tokens.size());
  std::vector<double> uniform(static_cast<std::size_t>(n * n), 0.0);
  for (int q = 0; q < n; ++q) {
    for (int k = 0; k <= q; ++k) uniform[q * n + k] = 1.0 / (q + 1);
  }
  const auto u = ScoreAttentionMatrix(small, uniform);
  const auto uo = oracle::HeadScore(small, uniform);
  const bool uniform_ok = u.induction < 0.5 && u.self < 0.5 &&
                          std::abs(u.induction - uo.induction) <= kHeadOracleTolerance &&
                          std::abs(u.self - uo.self) <= kHeadOracleTolerance;

  double worst_perfect = 0, worst_oracle = 0;
  const auto battery = ProbeBattery(512, 77);
  for (const auto& p : battery) {
    const int m = static_cast<int>(p.tokens.size());
    std::vector<double> perfect(static_cast<std::size_t>(m * m), 0.0);
    for (int q = 0; q < m; ++q) {
      int target = q;
      for (int k = q - 1; k >= 1; --k) {
        if (p.tokens[k - 1] == p.tokens[q]) {
          target = k;
          break;
        }
      }
      perfect[q * m + target] = 1.0;
    }
    const auto s = ScoreAttentionMatrix(p, perfect);
    const auto o = oracle::HeadScore(p, perfect);
    worst_perfect = std::max(worst_perfect, std::abs(s.induction - 1.0));
    worst_oracle = std::max({worst_oracle, std::abs(s.induction - o.induction), std::abs(s.self - o.self)});
  }
  Report("head-classifier", worst_perfect == 0.0 && worst_oracle <= kHeadOracleTolerance && uniform_ok,
         Format("perfect induction -> %.12f on %zu probes; uniform on the 11-token probe -> induction %.6f, "
                "self %.6f; oracle gap %.3g",
                1.0 - worst_perfect, battery.size(), u.induction, u.self,
                std::max({worst_oracle, std::abs(u.induction - uo.induction), std::abs(u.self - uo.self)})));
}

void PerplexityCriterion(const Model& toy, const std::vector<TokenSequence>& eval) {
  const auto t0 = Clock::now();
  const double got = Perplexity(toy, eval);
  const double want = oracle::Perplexity(toy, eval);
  const double rel = std::abs(got - want) / want;

  int checked = 0, bad = 0, sampled = 0;
  double worst = 0;
  for (auto act : {ActivationKind::kRelu, ActivationKind::kGatedSilu}) {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 32;
    c.d_ff = 64;
    c.vocab_size = 64;
    c.max_context = 32;
    c.activation = act;
    c.seed = 11;
    Model model(c);
    Rng rng(12);
    const std::vector<TokenSequence> batch = {RandomTokens(rng, 16, 64), RandomTokens(rng, 11, 64)};
    std::vector<double> grad;
    LossAndGradient(model, batch, grad);
    const std::size_t total = grad.size();
    const auto count = static_cast<std::size_t>(std::ceil(kGradientSample * static_cast<double>(total)));
    for (std::size_t s = 0; s < count; ++s) {
      const std::size_t i = rng.Below(total);
      auto p = model.mutable_parameters();
      const double keep = p[i];
      const double h = 1e-5;
      p[i] = keep + h;
      const double up = MeanLoss(model, batch);
      p[i] = keep - h;
      const double down = MeanLoss(model, batch);
      p[i] = keep;
      const double fd = (up - down) / (2 * h);
      ++sampled;
      const double scale = std::max(std::abs(fd), std::abs(grad[i]));
      if (scale < 1e-6) continue;  // both effectively zero
      const double err = std::abs(fd - grad[i]) / scale;
      worst = std::max(worst, err);
      bad += err > kGradientTolerance;
      ++checked;
    }
  }
  Report("perplexity-identity", rel <= kPerplexityTolerance && bad == 0 && checked > sampled / 2,
         Format("toy ppl %.6f vs teacher-forcing %.6f (rel %.2g); gradient %d/%d sampled parameters checked, "
                "worst rel err %.2g, %.1fs",
                got, want, rel, checked - bad, sampled, worst, Since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"repneuron acceptance run"};
  std::string config_path = REPNEURON_TOY_CONFIG;
  std::string cli = REPNEURON_CLI;
  std::string work = "acceptance_runs";
  bool reuse = false;
  app.add_option("--config", config_path, "pipeline config");
  app.add_option("--work", work, "directory for the two pipeline runs");
  app.add_flag("--reuse", reuse, "score existing runs instead of running the pipeline");
  CLI11_PARSE(app, argc, argv);

  const auto start = Clock::now();
  DetectorCriterion();
  ScoreTableCriterion();
  HeadCriterion();

  const RunConfig config = LoadRunConfig(config_path);
  const fs::path a = fs::path(work) / "run_a";
  const fs::path b = fs::path(work) / "run_b";
  double sa = 0, sb = 0;
  if (!reuse) {
    sa = RunPipeline(cli, config_path, a);
    sb = RunPipeline(cli, config_path, b);
  }
  DeterminismCriterion(a, b, sa, sb, config);
  if (sa < 0) return 1;

  const auto summary = ReadRunSummary((a / "summary.json").string());
  DirectionalCriteria(summary, config);

  const Model toy = LoadCheckpoint((a / run_files::kModel).string());
  const auto scoring = ReadDatasetJsonl((a / run_files::kScoring).string(), config.detection);
  OverrideCriterion(toy, scoring.items.front().tokens);
  const auto eval = Sequences(ReadDatasetJsonl((a / run_files::kEval).string(), config.detection));
  PerplexityCriterion(toy, std::vector<TokenSequence>(eval.begin(), eval.begin() + std::min<std::size_t>(10, eval.size())));

  std::printf("%d criteria failed, %.0fs total\n", failures, Since(start));
  return failures == 0 ? 0 : 1;
}
