// SPDX-License-Identifier: Apache-2.0
//
// Emotion fine-tuning and evaluation: Likert binarization, class-weighted
// multi-label BCE, weighted accuracy / F1, run selection and modality ablation.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/config.hpp"
#include "mmt/data.hpp"
#include "mmt/errors.hpp"
#include "mmt/log.hpp"
#include "mmt/model.hpp"
#include "mmt/optim.hpp"
#include "mmt/weights.hpp"

namespace mmt {

inline constexpr double kLikertMax = 3.0;
inline constexpr double kDecisionThreshold = 0.5;
inline constexpr double kProbClamp = 1e-12;

inline std::vector<int> binarize(const std::vector<double>& scores) {
  std::vector<int> out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    if (!(s >= 0.0 && s <= kLikertMax))
      throw DataError("emotion score " + std::to_string(i) + " = " + detail::format_double(s) +
                      " is outside the Likert range [0,3]");
    out.push_back(s > 0.0 ? 1 : 0);
  }
  return out;
}

struct ClassWeights {
  std::vector<double> positive;
  std::vector<double> negative;
};

// w_pos = n / (2 n_pos), w_neg = n / (2 n_neg) per emotion, so both classes
// carry total weight n/2.
inline ClassWeights class_weights(const std::vector<std::vector<int>>& targets) {
  if (targets.empty()) throw DataError("class_weights: empty training split");
  const std::size_t e = targets.front().size();
  ClassWeights w;
  const double n = static_cast<double>(targets.size());
  for (std::size_t j = 0; j < e; ++j) {
    std::size_t pos = 0;
    for (const auto& t : targets) {
      if (t.size() != e) throw DimensionError("class_weights: inconsistent label width");
      pos += t[j] != 0;
    }
    const std::size_t neg = targets.size() - pos;
    if (pos == 0 || neg == 0) {
      const std::string name = j < kNumEmotions ? kEmotionNames[j] : std::to_string(j);
      throw DataError("class_weights: emotion '" + name + "' has " + std::to_string(pos) + " positive and " +
                      std::to_string(neg) + " negative training examples; resample the split so both are present");
    }
    w.positive.push_back(n / (2.0 * static_cast<double>(pos)));
    w.negative.push_back(n / (2.0 * static_cast<double>(neg)));
  }
  return w;
}

// Sum over emotions of weight(target) * BCE(p, target). Probabilities are
// clamped to [1e-12, 1 - 1e-12]; each clamped entry bumps *clamp_count.
inline Var weighted_bce(Var probs, const std::vector<int>& targets, const ClassWeights& w,
                        std::size_t* clamp_count = nullptr) {
  Graph& g = *probs.graph;
  const Tensor& p = probs.value();
  const std::size_t e = p.size();
  if (targets.size() != e || w.positive.size() != e || w.negative.size() != e)
    throw DimensionError("weighted_bce: " + std::to_string(e) + " probabilities, " +
                         std::to_string(targets.size()) + " targets, " + std::to_string(w.positive.size()) +
                         " weights");
  double loss = 0.0;
  std::vector<double> dp(e, 0.0);
  std::size_t clamped = 0;
  for (std::size_t j = 0; j < e; ++j) {
    double q = p[j];
    bool hit = false;
    if (q < kProbClamp) q = kProbClamp, hit = true;
    if (q > 1.0 - kProbClamp) q = 1.0 - kProbClamp, hit = true;
    clamped += hit;
    if (targets[j]) {
      loss -= w.positive[j] * std::log(q);
      if (!hit) dp[j] = -w.positive[j] / q;
    } else {
      loss -= w.negative[j] * std::log(1.0 - q);
      if (!hit) dp[j] = w.negative[j] / (1.0 - q);
    }
  }
  if (clamped) {
    if (clamp_count) *clamp_count += clamped;
    log().debug("weighted_bce: clamped {} probabilities", clamped);
  }
  return g.record(Tensor({1}, std::vector<double>{loss}), g.requires_grad(probs),
                  [probs, dp = std::move(dp)](Graph& gr, std::size_t self) {
                    const double up = gr.grad(self)[0];
                    Tensor& d = gr.grad(probs);
                    for (std::size_t j = 0; j < dp.size(); ++j) d[j] += up * dp[j];
                  });
}

inline double weighted_bce_value(const std::vector<double>& probs, const std::vector<int>& targets,
                                 const ClassWeights& w, std::size_t* clamp_count = nullptr) {
  Graph g;
  return weighted_bce(g.constant(Tensor({probs.size()}, probs)), targets, w, clamp_count).value()[0];
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Confusion {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

inline Confusion confusion(const std::vector<int>& preds, const std::vector<int>& targets) {
  if (preds.size() != targets.size()) throw DimensionError("confusion: prediction/target length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (targets[i]) (preds[i] ? c.tp : c.fn)++;
    else (preds[i] ? c.fp : c.tn)++;
  }
  return c;
}

// Balanced accuracy (TPR + TNR) / 2 as one division of integers,
//   (TP (TN+FP) + TN (TP+FN)) / (2 (TP+FN) (TN+FP)),
// so the value is the correctly rounded rational. Undefined (nullopt) when a
// class is absent.
inline std::optional<double> weighted_accuracy(const Confusion& c) {
  const std::uint64_t p = c.tp + c.fn, n = c.tn + c.fp;
  if (p == 0 || n == 0) return std::nullopt;
  return static_cast<double>(c.tp * n + c.tn * p) / static_cast<double>(2 * p * n);
}

// 2TP / (2TP + FP + FN); 0 when there are no true positives.
inline double f1_score(const Confusion& c) {
  const std::uint64_t den = 2 * c.tp + c.fp + c.fn;
  if (c.tp == 0) return 0.0;
  return static_cast<double>(2 * c.tp) / static_cast<double>(den);
}

inline std::optional<double> weighted_accuracy(const std::vector<int>& preds, const std::vector<int>& targets) {
  return weighted_accuracy(confusion(preds, targets));
}

inline double f1_score(const std::vector<int>& preds, const std::vector<int>& targets) {
  return f1_score(confusion(preds, targets));
}

struct EmotionMetrics {
  std::string name;
  Confusion counts;
  std::optional<double> wa;
  double f1 = 0.0;
};

struct EvalReport {
  std::vector<EmotionMetrics> emotions;
  double macro_wa = 0.0;  // over emotions with a defined WA
  double macro_f1 = 0.0;
  std::vector<std::string> wa_excluded;

  double selection_score() const { return 0.5 * (macro_wa + macro_f1); }
};

inline EvalReport make_report(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& targets) {
  if (preds.size() != targets.size()) throw DimensionError("make_report: prediction/target count mismatch");
  EvalReport r;
  const std::size_t e = targets.empty() ? kNumEmotions : targets.front().size();
  double wa_sum = 0.0, f1_sum = 0.0;
  std::size_t wa_n = 0;
  for (std::size_t j = 0; j < e; ++j) {
    std::vector<int> pj, tj;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      pj.push_back(preds[i].at(j));
      tj.push_back(targets[i].at(j));
    }
    EmotionMetrics m;
    m.name = j < kNumEmotions ? kEmotionNames[j] : "emotion" + std::to_string(j);
    m.counts = confusion(pj, tj);
    m.wa = weighted_accuracy(m.counts);
    m.f1 = f1_score(m.counts);
    if (m.wa) {
      wa_sum += *m.wa;
      ++wa_n;
    } else {
      r.wa_excluded.push_back(m.name);
    }
    f1_sum += m.f1;
    r.emotions.push_back(std::move(m));
  }
  r.macro_wa = wa_n ? wa_sum / static_cast<double>(wa_n) : 0.0;
  r.macro_f1 = e ? f1_sum / static_cast<double>(e) : 0.0;
  return r;
}

namespace detail {

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

}  // namespace detail

// Human-readable table: one row per emotion, then the macro footer.
inline std::string format_report_text(const EvalReport& r) {
  using detail::pad;
  std::string out = pad("emotion", 10) + pad("WA", 8) + pad("F1", 8) + pad("TP", 7) + pad("FP", 7) + pad("TN", 7) +
                    "FN\n";
  for (const auto& m : r.emotions) {
    out += pad(m.name, 10) + pad(m.wa ? detail::fixed(*m.wa) : "n/a", 8) + pad(detail::fixed(m.f1), 8) +
           pad(std::to_string(m.counts.tp), 7) + pad(std::to_string(m.counts.fp), 7) +
           pad(std::to_string(m.counts.tn), 7) + std::to_string(m.counts.fn) + "\n";
  }
  out += pad("macro", 10) + pad(detail::fixed(r.macro_wa), 8) + detail::fixed(r.macro_f1) + "\n";
  if (!r.wa_excluded.empty()) {
    out += "note: WA undefined (single class present) for:";
    for (const auto& n : r.wa_excluded) out += " " + n;
    out += "; excluded from macro WA\n";
  }
  return out;
}

// key=value lines with round-trip doubles.
inline std::string format_report_kv(const EvalReport& r) {
  std::string out;
  for (const auto& m : r.emotions) {
    out += m.name + ".wa=" + (m.wa ? detail::format_double(*m.wa) : std::string("undefined")) + "\n";
    out += m.name + ".f1=" + detail::format_double(m.f1) + "\n";
    out += m.name + ".tp=" + std::to_string(m.counts.tp) + "\n";
    out += m.name + ".fp=" + std::to_string(m.counts.fp) + "\n";
    out += m.name + ".tn=" + std::to_string(m.counts.tn) + "\n";
    out += m.name + ".fn=" + std::to_string(m.counts.fn) + "\n";
  }
  out += "macro.wa=" + detail::format_double(r.macro_wa) + "\n";
  out += "macro.f1=" + detail::format_double(r.macro_f1) + "\n";
  std::string excl;
  for (const auto& n : r.wa_excluded) excl += (excl.empty() ? "" : ",") + n;
  out += "macro.wa_excluded=" + excl + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct DropSet {
  bool audio = false;
  bool visual = false;

  bool empty() const { return !audio && !visual; }
  friend bool operator==(const DropSet&, const DropSet&) = default;
};

// Comma-separated subset of {audio, visual}; "" is the empty set.
inline DropSet parse_drop(const std::string& spec) {
  DropSet d;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t comma = std::min(spec.find(',', start), spec.size());
    const std::string item(detail::trim(std::string_view(spec).substr(start, comma - start)));
    if (item == "audio") d.audio = true;
    else if (item == "visual") d.visual = true;
    else if (item == "text")
      throw UnsupportedError("cannot drop text: text is the anchor modality that supplies every cross-modal query");
    else if (!item.empty()) throw ConfigError("unknown modality '" + item + "' in drop list (expected audio, visual)");
    start = comma + 1;
  }
  return d;
}

inline std::string drop_name(const DropSet& d) {
  if (d.audio && d.visual) return "audio,visual";
  if (d.audio) return "audio";
  if (d.visual) return "visual";
  return "";
}

// Replaces dropped modalities with zeros of the same shape.
inline ModelInput ablate(const ModelInput& in, const DropSet& drop) {
  ModelInput out = in;
  if (drop.audio) out.audio = Tensor(in.audio.shape());
  if (drop.visual) out.visual = Tensor(in.visual.shape());
  return out;
}

inline PreparedExample ablate(const PreparedExample& ex, const DropSet& drop) {
  PreparedExample out = ex;
  out.input = ablate(ex.input, drop);
  return out;
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

inline std::vector<int> example_targets(const PreparedExample& ex) {
  if (!ex.emotion_scores) throw DataError("example '" + ex.id + "' has no emotion scores");
  try {
    return binarize(*ex.emotion_scores);
  } catch (const DataError& e) {
    throw DataError("example '" + ex.id + "': " + e.what());
  }
}

inline std::vector<int> threshold(const Tensor& probs) {
  std::vector<int> out;
  for (double p : probs.values()) out.push_back(p >= kDecisionThreshold ? 1 : 0);
  return out;
}

inline EvalReport evaluate(const ModelWeights& w, const std::vector<PreparedExample>& data, const ModelConfig& config,
                           const DropSet& drop = {}) {
  std::vector<std::vector<int>> preds, targets;
  for (const auto& ex : data) {
    targets.push_back(example_targets(ex));
    preds.push_back(threshold(predict_emotions(w, ablate(ex.input, drop), config)));
  }
  return make_report(preds, targets);
}

struct DataSplit {
  std::vector<std::size_t> train, dev, test;
};

// Seeded shuffle, then 80/10/10; dev and test get at least one example each.
inline DataSplit split_dataset(std::size_t n, std::uint64_t seed, double dev_fraction = 0.1,
                               double test_fraction = 0.1) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x73706c6974ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto count = [&](double f) {
    auto c = static_cast<std::size_t>(std::lround(f * static_cast<double>(n)));
    return std::max<std::size_t>(c, 1);
  };
  const std::size_t nd = count(dev_fraction), nt = count(test_fraction);
  if (nd + nt >= n) throw DataError("split: " + std::to_string(n) + " examples are too few for train/dev/test");
  DataSplit s;
  s.train.assign(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(nd + nt));
  s.dev.assign(idx.end() - static_cast<std::ptrdiff_t>(nd + nt), idx.end() - static_cast<std::ptrdiff_t>(nt));
  s.test.assign(idx.end() - static_cast<std::ptrdiff_t>(nt), idx.end());
  return s;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v.at(i));
  return out;
}

// Head replacement: keep the encoders, drop the masked-LM head, add a fresh
// emotion head.
inline ModelWeights finetune_init(const ModelWeights& pretrained, const ModelConfig& config, std::uint64_t seed) {
  ModelWeights w = pretrained;
  w.erase(keys::mlm_head + ".weight");
  w.erase(keys::mlm_head + ".bias");
  w.erase(keys::emotion_head + ".weight");
  w.erase(keys::emotion_head + ".bias");
  init_emotion_head(w, config, seed);
  return w;
}

inline ModelWeights random_finetune_init(const ModelConfig& config, std::uint64_t seed) {
  ModelWeights w = init_weights(config, seed);
  w.erase(keys::mlm_head + ".weight");
  w.erase(keys::mlm_head + ".bias");
  return w;
}

inline Var emotion_example_loss(ParamBinder& bind, const PreparedExample& ex, const std::vector<int>& targets,
                                const ClassWeights& cw, const ModelConfig& config,
                                std::mt19937_64* dropout_rng = nullptr, std::size_t* clamp_count = nullptr) {
  ForwardContext ctx{config, dropout_rng};
  return weighted_bce(emotion_head(bind, encode(bind, ex.input, ctx).fused), targets, cw, clamp_count);
}

struct FinetuneOptions {
  std::size_t epochs = 10;
  std::size_t runs = 10;
  std::uint64_t seed = 1;
  // Pre-trained weights; nullopt means random initialization.
  std::optional<ModelWeights> pretrained;
  std::function<void(std::size_t run, std::size_t epoch, double train_loss, const EvalReport& dev)> on_epoch;
};

struct RunSummary {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;  // 0 means the initialization was never improved on
  double dev_score = 0.0;      // selection score of the run's returned weights
  std::vector<double> train_loss;       // per epoch
  std::vector<double> dev_macro_f1;     // per epoch
  std::vector<double> dev_macro_wa;     // per epoch
  EvalReport dev_report;
  EvalReport test_report;

  // First epoch whose dev macro F1 reaches `target`, or nullopt.
  std::optional<std::size_t> epochs_to_f1(double target) const {
    for (std::size_t i = 0; i < dev_macro_f1.size(); ++i)
      if (dev_macro_f1[i] >= target) return i + 1;
    return std::nullopt;
  }
};

struct FinetuneResult {
  ModelWeights weights;
  std::size_t best_run = 0;
  std::vector<RunSummary> runs;
  EvalReport test_report;  // of the selected run
  double test_macro_wa_std = 0.0;  // across runs
  double test_macro_f1_std = 0.0;
  std::size_t clamp_count = 0;
};

inline double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// One seeded training run: per-epoch shuffle and Adam steps under the
// warmup schedule; keeps the epoch with the best dev selection score.
inline RunSummary finetune_run(const std::vector<PreparedExample>& train, const std::vector<PreparedExample>& dev,
                               const ModelConfig& config, const FinetuneOptions& opts, std::size_t run,
                               ModelWeights& out_weights, std::size_t* clamp_count) {
  RunSummary s;
  s.seed = opts.seed + run;
  ModelWeights w = opts.pretrained ? finetune_init(*opts.pretrained, config, s.seed) : random_finetune_init(config, s.seed);
  std::vector<std::vector<int>> targets;
  for (const auto& ex : train) targets.push_back(example_targets(ex));
  const ClassWeights cw = class_weights(targets);

  const LrSchedule schedule = LrSchedule::from(config);
  Adam adam = Adam::from(config);
  std::mt19937_64 rng(s.seed);
  std::mt19937_64 dropout_rng(s.seed ^ 0xd20u);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  s.dev_report = evaluate(w, dev, config);
  s.dev_score = s.dev_report.selection_score();
  out_weights = w;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<std::size_t> items(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      const double lr = schedule.at(++step);
      try {
        loss_sum += static_cast<double>(items.size()) *
                    train_batch(
                        w, adam, lr, items,
                        [&](ParamBinder& bind, std::size_t i) {
                          return emotion_example_loss(bind, train[i], targets[i], cw, config, &dropout_rng,
                                                      clamp_count);
                        },
                        config.grad_clip);
      } catch (const NumericError& e) {
        throw NumericError("finetune run " + std::to_string(run) + ": epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + e.what());
      }
    }
    const double train_loss = loss_sum / static_cast<double>(order.size());
    const EvalReport dev_report = evaluate(w, dev, config);
    s.train_loss.push_back(train_loss);
    s.dev_macro_f1.push_back(dev_report.macro_f1);
    s.dev_macro_wa.push_back(dev_report.macro_wa);
    if (opts.on_epoch) opts.on_epoch(run, epoch, train_loss, dev_report);
    if (dev_report.selection_score() > s.dev_score || s.best_epoch == 0) {
      s.dev_score = dev_report.selection_score();
      s.dev_report = dev_report;
      s.best_epoch = epoch;
      out_weights = w;
    }
  }
  return s;
}

// Independent runs with seeds seed, seed+1, ...; the run with the highest
// dev selection score (mean of macro WA and macro F1) is returned, ties going
// to the earlier run.
inline FinetuneResult finetune_loop(const std::vector<PreparedExample>& train, const std::vector<PreparedExample>& dev,
                                    const std::vector<PreparedExample>& test, const ModelConfig& config,
                                    const FinetuneOptions& opts) {
  config.validate();
  if (opts.runs == 0) throw ConfigError("finetune: runs must be >= 1");
  if (train.empty() || dev.empty() || test.empty()) throw DataError("finetune: train, dev and test must be non-empty");
  FinetuneResult res;
  std::vector<double> test_wa, test_f1;
  for (std::size_t run = 0; run < opts.runs; ++run) {
    ModelWeights w;
    RunSummary s = finetune_run(train, dev, config, opts, run, w, &res.clamp_count);
    s.test_report = evaluate(w, test, config);
    test_wa.push_back(s.test_report.macro_wa);
    test_f1.push_back(s.test_report.macro_f1);
    if (run == 0 || s.dev_score > res.runs[res.best_run].dev_score) {
      res.best_run = run;
      res.weights = std::move(w);
    }
    res.runs.push_back(std::move(s));
  }
  res.test_report = res.runs[res.best_run].test_report;
  res.test_macro_wa_std = stddev(test_wa);
  res.test_macro_f1_std = stddev(test_f1);
  if (res.clamp_count) log().warn("finetune: {} probabilities clamped in the loss", res.clamp_count);
  return res;
}

}  // namespace mmt
