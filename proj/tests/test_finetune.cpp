// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "mmt/checks.hpp"
#include "mmt/finetune.hpp"
#include "test_util.hpp"

using namespace mmt;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Per-emotion columns of the hand-built evaluation set (4 examples).
const std::vector<std::vector<int>> kTargetCols{{1, 0, 1, 0}, {0, 1, 0, 1}, {1, 1, 0, 0},
                                                {1, 0, 0, 0}, {0, 0, 1, 1}, {1, 1, 1, 1}};
const std::vector<std::vector<int>> kPredCols{{1, 0, 0, 0}, {0, 1, 0, 1}, {0, 0, 1, 1},
                                              {1, 1, 0, 0}, {0, 0, 0, 0}, {1, 1, 0, 1}};

std::vector<std::vector<int>> rows_of(const std::vector<std::vector<int>>& cols) {
  std::vector<std::vector<int>> rows(cols.front().size(), std::vector<int>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < cols[j].size(); ++i) rows[i][j] = cols[j][i];
  return rows;
}

ModelConfig small_config() {
  ModelConfig c = ModelConfig::toy();
  c.batch_size = 2;
  c.warmup_steps = 4;
  return c;
}

}  // namespace

// --- labels and loss --------------------------------------------------------

TEST(Binarize, PresentMeansPositiveScore) {
  EXPECT_EQ(binarize({0, 0.33, 1, 2, 3, 0}), (std::vector<int>{0, 1, 1, 1, 1, 0}));
  EXPECT_THROW(binarize({0, -0.5}), DataError);
  EXPECT_THROW(binarize({3.5}), DataError);
  EXPECT_THROW(binarize({std::nan("")}), DataError);
}

TEST(ClassWeights, ThreePositivesOneNegative) {
  const ClassWeights w = class_weights({{1}, {1}, {1}, {0}});
  EXPECT_DOUBLE_EQ(w.positive[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(w.negative[0], 2.0);
}

TEST(ClassWeights, BothClassesCarryHalfTheMass) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 40;
    std::vector<std::vector<int>> t(n, std::vector<int>(6));
    for (auto& row : t)
      for (int& v : row) v = static_cast<int>(rng() % 2);
    for (std::size_t j = 0; j < 6; ++j) t[0][j] = 1, t[1][j] = 0;
    const ClassWeights w = class_weights(t);
    for (std::size_t j = 0; j < 6; ++j) {
      double pos = 0.0, neg = 0.0;
      for (const auto& row : t) (row[j] ? pos : neg) += row[j] ? w.positive[j] : w.negative[j];
      EXPECT_NEAR(pos, n / 2.0, 1e-12);
      EXPECT_NEAR(neg, n / 2.0, 1e-12);
    }
  }
}

TEST(ClassWeights, MissingClassIsNamed) {
  try {
    class_weights({{1, 1}, {0, 1}});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("sad"), std::string::npos) << e.what();
  }
}

TEST(WeightedBce, HandComputed) {
  const ClassWeights w{{2.0, 0.5}, {1.0, 3.0}};
  const double loss = weighted_bce_value({0.8, 0.25}, {1, 0}, w);
  EXPECT_NEAR(loss, -2.0 * std::log(0.8) - 3.0 * std::log(0.75), 1e-15);
}

TEST(WeightedBce, ClampsAndCounts) {
  const ClassWeights w{{1.0}, {1.0}};
  std::size_t clamped = 0;
  const double loss = weighted_bce_value({0.0}, {1}, w, &clamped);
  EXPECT_EQ(clamped, 1u);
  EXPECT_NEAR(loss, -std::log(1e-12), 1e-9);
  EXPECT_TRUE(std::isfinite(loss));
}

TEST(WeightedBce, GradientMatchesFiniteDifferences) {
  const ClassWeights w{{1.5, 0.7, 2.0}, {0.6, 1.1, 0.9}};
  const std::vector<int> t{1, 0, 1};
  const double err = test::op_gradient_error(
      [&](Graph&, const std::vector<Var>& v) { return weighted_bce(v[0], t, w); },
      {Tensor::vector({0.3, 0.6, 0.85})});
  EXPECT_LT(err, 1e-6);
}

// --- metrics ----------------------------------------------------------------

TEST(Metrics, PerfectPredictions) {
  const std::vector<int> t{1, 0, 1, 1, 0};
  EXPECT_EQ(weighted_accuracy(t, t), 1.0);
  EXPECT_EQ(f1_score(t, t), 1.0);
}

TEST(Metrics, SingleClassLeavesWaUndefined) {
  EXPECT_FALSE(weighted_accuracy({1, 0, 1}, {1, 1, 1}).has_value());
  EXPECT_FALSE(weighted_accuracy({0, 0}, {0, 0}).has_value());
  EXPECT_EQ(f1_score({0, 0}, {0, 0}), 0.0);
}

TEST(Metrics, NoTruePositivesGivesZeroF1) {
  EXPECT_EQ(f1_score({0, 1, 0}, {1, 0, 0}), 0.0);
}

TEST(Metrics, RandomVectorsMatchReducedFractions) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 60;
    std::vector<int> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<int>(rng() % 2), t[i] = static_cast<int>(rng() % 2);
    // TPR and TNR as separate fractions; WA = (a/b + c/d) / 2 in lowest terms.
    std::int64_t hit_pos = 0, pos = 0, hit_neg = 0, neg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (t[i]) pos++, hit_pos += p[i];
      else neg++, hit_neg += 1 - p[i];
    }
    const auto wa = weighted_accuracy(p, t);
    if (pos == 0 || neg == 0) {
      EXPECT_FALSE(wa.has_value());
    } else {
      std::int64_t num = hit_pos * neg + hit_neg * pos, den = 2 * pos * neg;
      const std::int64_t g = std::gcd(num, den);
      ASSERT_TRUE(wa.has_value());
      EXPECT_EQ(*wa, static_cast<double>(num / g) / static_cast<double>(den / g));
    }
    std::int64_t fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) fp += p[i] && !t[i], fn += !p[i] && t[i];
    if (hit_pos == 0) {
      EXPECT_EQ(f1_score(p, t), 0.0);
    } else {
      std::int64_t num = 2 * hit_pos, den = 2 * hit_pos + fp + fn;
      const std::int64_t g = std::gcd(num, den);
      EXPECT_EQ(f1_score(p, t), static_cast<double>(num / g) / static_cast<double>(den / g));
    }
  }
}

TEST(Metrics, MacroAveragesSkipUndefinedWa) {
  const EvalReport r = make_report(rows_of(kPredCols), rows_of(kTargetCols));
  ASSERT_EQ(r.emotions.size(), 6u);
  EXPECT_EQ(r.wa_excluded, (std::vector<std::string>{"fear"}));
  EXPECT_NEAR(r.macro_wa, (0.75 + 1.0 + 0.0 + 5.0 / 6.0 + 0.5) / 5.0, 1e-15);
  EXPECT_NEAR(r.macro_f1, (2.0 / 3.0 + 1.0 + 0.0 + 2.0 / 3.0 + 0.0 + 6.0 / 7.0) / 6.0, 1e-15);
  EXPECT_EQ(r.emotions[5].counts, (Confusion{3, 0, 0, 1}));
}

TEST(Report, TextMatchesGoldenFile) {
  const EvalReport r = make_report(rows_of(kPredCols), rows_of(kTargetCols));
  const std::string golden = slurp(std::string(MMT_TEST_DATA_DIR) + "/report_golden.txt");
  ASSERT_FALSE(golden.empty());
  EXPECT_EQ(format_report_text(r), golden);
}

TEST(Report, KeyValueRoundTripsDoubles) {
  const EvalReport r = make_report(rows_of(kPredCols), rows_of(kTargetCols));
  const std::string kv = format_report_kv(r);
  EXPECT_NE(kv.find("fear.wa=undefined\n"), std::string::npos);
  EXPECT_NE(kv.find("macro.wa_excluded=fear\n"), std::string::npos);
  const auto pos = kv.find("macro.f1=");
  ASSERT_NE(pos, std::string::npos);
  const double f1 = std::stod(kv.substr(pos + 9, kv.find('\n', pos) - pos - 9));
  EXPECT_EQ(f1, r.macro_f1);
}

// --- ablation ---------------------------------------------------------------

TEST(Ablation, ParseDrop) {
  EXPECT_EQ(parse_drop(""), DropSet{});
  EXPECT_EQ(parse_drop("audio"), (DropSet{true, false}));
  EXPECT_EQ(parse_drop(" visual , audio "), (DropSet{true, true}));
  EXPECT_THROW(parse_drop("text"), UnsupportedError);
  EXPECT_THROW(parse_drop("audio,text"), UnsupportedError);
  EXPECT_THROW(parse_drop("video"), ConfigError);
  EXPECT_EQ(drop_name(parse_drop("visual,audio")), "audio,visual");
}

TEST(Ablation, ZeroesOnlyDroppedModalities) {
  const ModelConfig c = small_config();
  const PreparedExample ex = make_toy_batch(c, 3, 1).front();
  const PreparedExample a = ablate(ex, DropSet{true, false});
  EXPECT_EQ(a.input.audio, Tensor(ex.input.audio.shape()));
  EXPECT_EQ(a.input.visual, ex.input.visual);
  EXPECT_EQ(a.input.text, ex.input.text);
  EXPECT_EQ(ablate(ex, DropSet{}).input.audio, ex.input.audio);
}

TEST(Ablation, EvaluateWithDropEqualsEvaluateOnZeroedData) {
  const ModelConfig c = small_config();
  const auto data = make_toy_batch(c, 4, 6);
  const ModelWeights w = random_finetune_init(c, 4);
  for (const DropSet d : {DropSet{true, false}, DropSet{false, true}, DropSet{true, true}}) {
    std::vector<PreparedExample> zeroed;
    for (const auto& ex : data) zeroed.push_back(ablate(ex, d));
    EXPECT_EQ(format_report_kv(evaluate(w, data, c, d)), format_report_kv(evaluate(w, zeroed, c)));
  }
}

// --- split and training -----------------------------------------------------

TEST(Split, PartitionsWithRequestedSizes) {
  const DataSplit s = split_dataset(100, 7);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.dev.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
  std::vector<std::size_t> all = s.train;
  all.insert(all.end(), s.dev.begin(), s.dev.end());
  all.insert(all.end(), s.test.begin(), s.test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(split_dataset(100, 7).dev, s.dev);
  EXPECT_NE(split_dataset(100, 8).dev, s.dev);
  EXPECT_EQ(split_dataset(3, 1).train.size(), 1u);
  EXPECT_THROW(split_dataset(2, 1), DataError);
}

TEST(Split, CustomFractions) {
  const DataSplit s = split_dataset(200, 1, 0.25, 0.05);
  EXPECT_EQ(s.dev.size(), 50u);
  EXPECT_EQ(s.test.size(), 10u);
  EXPECT_EQ(s.train.size(), 140u);
}

TEST(FinetuneInit, KeepsEncodersAndReplacesHeads) {
  const ModelConfig c = small_config();
  const ModelWeights pre = init_weights(c, 1);
  const ModelWeights w = finetune_init(pre, c, 9);
  EXPECT_FALSE(w.contains(keys::mlm_head + ".weight"));
  EXPECT_TRUE(w.contains(keys::emotion_head + ".weight"));
  for (const auto& [k, t] : w.params())
    if (k.rfind(keys::emotion_head, 0) != 0) {
      EXPECT_EQ(t, pre.at(k)) << k;
    }
}

namespace {

struct Splits {
  std::vector<PreparedExample> train, dev, test;
};

Splits toy_splits() {
  const ModelConfig c = small_config();
  auto all = make_toy_batch(c, 11, 12, 3);
  return {{all.begin(), all.begin() + 8}, {all.begin() + 8, all.begin() + 10}, {all.begin() + 10, all.end()}};
}

}  // namespace

TEST(FinetuneLoop, SelectedRunHasHighestDevScore) {
  const ModelConfig c = small_config();
  const Splits s = toy_splits();
  FinetuneOptions o;
  o.epochs = 3;
  o.runs = 4;
  const FinetuneResult r = finetune_loop(s.train, s.dev, s.test, c, o);
  ASSERT_EQ(r.runs.size(), 4u);
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    EXPECT_LE(r.runs[i].dev_score, r.runs[r.best_run].dev_score);
    if (i < r.best_run) {
      EXPECT_LT(r.runs[i].dev_score, r.runs[r.best_run].dev_score);
    }
    EXPECT_EQ(r.runs[i].seed, o.seed + i);
    EXPECT_EQ(r.runs[i].train_loss.size(), 3u);
  }
  // The returned weights reproduce the selected run's test report.
  EXPECT_EQ(format_report_kv(evaluate(r.weights, s.test, c)), format_report_kv(r.test_report));
  EXPECT_EQ(format_report_kv(evaluate(r.weights, s.dev, c)), format_report_kv(r.runs[r.best_run].dev_report));
}

TEST(FinetuneLoop, SingleRunHasZeroSpread) {
  const Splits s = toy_splits();
  FinetuneOptions o;
  o.epochs = 2;
  o.runs = 1;
  const FinetuneResult r = finetune_loop(s.train, s.dev, s.test, small_config(), o);
  EXPECT_EQ(r.best_run, 0u);
  EXPECT_EQ(r.test_macro_wa_std, 0.0);
  EXPECT_EQ(r.test_macro_f1_std, 0.0);
}

TEST(FinetuneLoop, DeterministicUnderSeed) {
  const ModelConfig c = small_config();
  const Splits s = toy_splits();
  FinetuneOptions o;
  o.epochs = 2;
  o.runs = 2;
  o.pretrained = init_weights(c, 5);
  const FinetuneResult a = finetune_loop(s.train, s.dev, s.test, c, o);
  const FinetuneResult b = finetune_loop(s.train, s.dev, s.test, c, o);
  EXPECT_TRUE(a.weights == b.weights);
  EXPECT_EQ(a.runs[1].train_loss, b.runs[1].train_loss);
  EXPECT_EQ(format_report_text(a.test_report), format_report_text(b.test_report));
}

TEST(FinetuneLoop, TrainingLossDecreasesOnSmallSet) {
  ModelConfig c = small_config();
  c.dropout = 0.0;
  const Splits s = toy_splits();
  FinetuneOptions o;
  o.epochs = 30;
  o.runs = 1;
  const FinetuneResult r = finetune_loop(s.train, s.dev, s.test, c, o);
  EXPECT_LT(r.runs[0].train_loss.back(), 0.5 * r.runs[0].train_loss.front());
}

TEST(FinetuneLoop, RejectsBadArguments) {
  const Splits s = toy_splits();
  FinetuneOptions o;
  o.runs = 0;
  EXPECT_THROW(finetune_loop(s.train, s.dev, s.test, small_config(), o), ConfigError);
  o.runs = 1;
  EXPECT_THROW(finetune_loop(s.train, {}, s.test, small_config(), o), DataError);
}

TEST(EpochsToF1, FirstEpochReachingTarget) {
  RunSummary s;
  s.dev_macro_f1 = {0.2, 0.5, 0.7, 0.6, 0.9};
  EXPECT_EQ(s.epochs_to_f1(0.7), 3u);
  EXPECT_EQ(s.epochs_to_f1(0.1), 1u);
  EXPECT_FALSE(s.epochs_to_f1(0.95).has_value());
}
