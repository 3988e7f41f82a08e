// SPDX-License-Identifier: Apache-2.0
//
// Multimodal masked-LM pre-training: masking plans that zero words together
// with their aligned audio and visual frames, losses evaluated at masked
// positions only (full softmax or noise-contrastive estimation with a fixed
// normaliser), and the seeded training loop.
#pragma once

#include <algorithm>
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
#include "mmt/model.hpp"
#include "mmt/optim.hpp"
#include "mmt/weights.hpp"

namespace mmt {

struct MaskingPlan {
  std::string example_id;
  std::vector<std::size_t> positions;  // sorted word indices
  std::vector<Span> audio_spans;       // stacked audio rows, parallel to positions
  std::vector<Span> visual_spans;

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }
};

inline std::size_t mask_count(std::size_t num_words, double fraction) {
  const auto r = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(num_words)));
  return std::clamp<std::size_t>(r, 1, num_words);
}

// Plan over explicit positions; spans come from `spans`.
inline MaskingPlan plan_for_positions(const std::string& id, std::vector<std::size_t> positions,
                                      const std::vector<WordSpans>& spans) {
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  MaskingPlan plan;
  plan.example_id = id;
  for (std::size_t p : positions) {
    if (p >= spans.size())
      throw DataError("masking plan for '" + id + "': position " + std::to_string(p) + " out of range");
    plan.audio_spans.push_back(spans[p].audio);
    plan.visual_spans.push_back(spans[p].visual);
  }
  plan.positions = std::move(positions);
  return plan;
}

// Samples max(1, round(fraction * n)) word positions uniformly without
// replacement.
template <typename Rng>
MaskingPlan make_masking_plan(const PreparedExample& ex, double fraction, Rng& rng) {
  const std::size_t n = ex.word_ids.size();
  if (n == 0) throw DataError("masking plan for '" + ex.id + "': example has no words");
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> chosen;
  chosen.reserve(mask_count(n, fraction));
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), mask_count(n, fraction), rng);
  return plan_for_positions(ex.id, std::move(chosen), ex.spans);
}

// Same, from the on-disk example: spans are derived from the word boundaries
// (invalid boundaries raise an AlignmentError naming the word).
template <typename Rng>
MaskingPlan make_masking_plan(const MultimodalExample& ex, double fraction, Rng& rng,
                              const AlignmentParams& ap = {}) {
  const std::size_t n = ex.tokens.size();
  if (n == 0) throw DataError("masking plan for '" + ex.id + "': example has no words");
  if (ex.boundaries.size() != n)
    throw AlignmentError("example '" + ex.id + "': word " + std::to_string(ex.boundaries.size()) +
                         " has no boundary");
  auto spans = align(ex.boundaries, ap.audio_hop_ms, ap.visual_fps,
                     ex.audio.rank() == 2 ? ex.audio.rows() : 0, ex.visual.rank() == 2 ? ex.visual.rows() : 0);
  for (auto& s : spans) s.audio = stacked_span(s.audio, ap.audio_stack);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> chosen;
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), mask_count(n, fraction), rng);
  return plan_for_positions(ex.id, std::move(chosen), spans);
}

inline void zero_rows(Tensor& t, Span s) {
  const std::size_t end = std::min(s.end, t.rows());
  for (std::size_t r = s.begin; r < end; ++r) std::fill(t.row(r).begin(), t.row(r).end(), 0.0);
}

// Zeroes the masked words' text rows and their aligned audio/visual rows.
// Nothing else changes; no mask token is introduced.
inline ModelInput apply_mask(const ModelInput& in, const MaskingPlan& plan) {
  ModelInput out = in;
  for (std::size_t i = 0; i < plan.positions.size(); ++i) {
    zero_rows(out.text, {plan.positions[i], plan.positions[i] + 1});
    zero_rows(out.audio, plan.audio_spans[i]);
    zero_rows(out.visual, plan.visual_spans[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace detail {

inline void check_targets(const Tensor& logits, const std::vector<int>& targets, const MaskingPlan& plan) {
  require_matrix(logits, "masked loss");
  if (plan.empty()) throw DataError("masked loss: empty masking plan");
  if (targets.size() != logits.rows())
    throw DimensionError("masked loss: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " positions");
  for (std::size_t p : plan.positions) {
    if (p >= logits.rows()) throw DimensionError("masked loss: position out of range");
    const int t = targets[p];
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols())
      throw DataError("masked loss: target id " + std::to_string(t) + " outside vocabulary");
  }
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

// Mean over masked positions of -log softmax(logits[p])[target[p]]. Rows and
// targets at unmasked positions are never read.
inline Var masked_softmax_loss(Var logits, const std::vector<int>& targets, const MaskingPlan& plan) {
  Graph& g = *logits.graph;
  const Tensor& lv = logits.value();
  detail::check_targets(lv, targets, plan);
  const std::size_t v = lv.cols();
  const double inv_m = 1.0 / static_cast<double>(plan.size());
  double total = 0.0;
  std::vector<double> probs;  // softmax rows of masked positions, in plan order
  probs.reserve(plan.size() * v);
  for (std::size_t p : plan.positions) {
    auto row = lv.row(p);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double x : row) z += std::exp(x - mx);
    const double lse = mx + std::log(z);
    total += lse - row[static_cast<std::size_t>(targets[p])];
    for (double x : row) probs.push_back(std::exp(x - lse));
  }
  std::vector<std::size_t> positions = plan.positions;
  std::vector<int> tgt;
  for (std::size_t p : positions) tgt.push_back(targets[p]);
  return g.record(Tensor({1}, std::vector<double>{total * inv_m}), g.requires_grad(logits),
                  [logits, v, inv_m, positions = std::move(positions), tgt = std::move(tgt),
                   probs = std::move(probs)](Graph& gr, std::size_t self) {
                    const double d = gr.grad(self)[0] * inv_m;
                    Tensor& dl = gr.grad(logits);
                    for (std::size_t i = 0; i < positions.size(); ++i) {
                      double* row = dl.data() + positions[i] * v;
                      for (std::size_t j = 0; j < v; ++j) row[j] += d * probs[i * v + j];
                      row[static_cast<std::size_t>(tgt[i])] -= d;
                    }
                  });
}

inline double masked_softmax_loss_value(const Tensor& logits, const std::vector<int>& targets,
                                        const MaskingPlan& plan) {
  Graph g;
  return masked_softmax_loss(g.constant(logits), targets, plan).value()[0];
}

// Add-one smoothed unigram distribution with a cumulative table for sampling.
class NoiseDistribution {
 public:
  NoiseDistribution() = default;

  explicit NoiseDistribution(const std::vector<std::uint64_t>& counts) {
    if (counts.empty()) throw ConfigError("noise distribution: empty vocabulary");
    double total = 0.0;
    for (auto c : counts) total += static_cast<double>(c) + 1.0;
    probs_.reserve(counts.size());
    for (auto c : counts) probs_.push_back((static_cast<double>(c) + 1.0) / total);
    cdf_.resize(probs_.size());
    std::partial_sum(probs_.begin(), probs_.end(), cdf_.begin());
    cdf_.back() = 1.0;
  }

  static NoiseDistribution uniform(std::size_t vocab) { return NoiseDistribution(std::vector<std::uint64_t>(vocab, 0)); }

  std::size_t size() const { return probs_.size(); }
  double prob(std::size_t w) const { return probs_.at(w); }
  const std::vector<double>& probabilities() const { return probs_; }

  template <typename Rng>
  int sample(Rng& rng) const {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return static_cast<int>(it - cdf_.begin());
  }

 private:
  std::vector<double> probs_;
  std::vector<double> cdf_;
};

// k noise ids per masked position, drawn in plan order.
template <typename Rng>
std::vector<std::vector<int>> draw_noise(const NoiseDistribution& noise, std::size_t k, std::size_t positions,
                                         Rng& rng) {
  if (k == 0) throw ConfigError("NCE: k_noise must be >= 1");
  std::vector<std::vector<int>> out(positions);
  for (auto& row : out) {
    row.resize(k);
    for (int& id : row) id = noise.sample(rng);
  }
  return out;
}

namespace detail {

struct NceTerms {
  double loss = 0.0;
  // d loss / d logit for the target and each noise sample (before averaging).
  double d_target = 0.0;
  std::vector<double> d_noise;
};

// Per-position NCE with model score s(w) = logit(w) - ln Z and
// delta(w) = s(w) - ln(k * P_n(w)):
//   loss = -ln sigma(delta(target)) - sum_i ln(1 - sigma(delta(noise_i)))
inline NceTerms nce_terms(double target_logit, int target, const std::vector<double>& noise_logits,
                          const std::vector<int>& noise_ids, const NoiseDistribution& noise, double log_z) {
  const double k = static_cast<double>(noise_ids.size());
  NceTerms t;
  const double dt = target_logit - log_z - std::log(k * noise.prob(static_cast<std::size_t>(target)));
  t.loss += softplus(-dt);
  t.d_target = sigmoid_value(dt) - 1.0;
  t.d_noise.resize(noise_ids.size());
  for (std::size_t i = 0; i < noise_ids.size(); ++i) {
    const double dn = noise_logits[i] - log_z - std::log(k * noise.prob(static_cast<std::size_t>(noise_ids[i])));
    t.loss += softplus(dn);
    t.d_noise[i] = sigmoid_value(dn);
  }
  return t;
}

}  // namespace detail

// NCE over full logits [L x V], averaged over masked positions. `normalizer`
// is the fixed partition-function value Z (the vocabulary size by default).
inline Var nce_loss(Var logits, const std::vector<int>& targets, const MaskingPlan& plan,
                    const NoiseDistribution& noise, const std::vector<std::vector<int>>& noise_ids,
                    double normalizer) {
  Graph& g = *logits.graph;
  const Tensor& lv = logits.value();
  detail::check_targets(lv, targets, plan);
  if (noise_ids.size() != plan.size()) throw DimensionError("NCE: need one noise row per masked position");
  if (noise.size() != lv.cols()) throw DimensionError("NCE: noise distribution size differs from vocabulary");
  const double log_z = std::log(normalizer);
  const double inv_m = 1.0 / static_cast<double>(plan.size());
  double total = 0.0;
  std::vector<detail::NceTerms> terms;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const std::size_t p = plan.positions[i];
    std::vector<double> nl;
    for (int id : noise_ids[i]) nl.push_back(lv.at(p, static_cast<std::size_t>(id)));
    terms.push_back(detail::nce_terms(lv.at(p, static_cast<std::size_t>(targets[p])), targets[p], nl, noise_ids[i],
                                      noise, log_z));
    total += terms.back().loss;
  }
  std::vector<std::size_t> positions = plan.positions;
  std::vector<int> tgt;
  for (std::size_t p : positions) tgt.push_back(targets[p]);
  return g.record(Tensor({1}, std::vector<double>{total * inv_m}), g.requires_grad(logits),
                  [logits, inv_m, positions = std::move(positions), tgt = std::move(tgt), noise_ids,
                   terms = std::move(terms)](Graph& gr, std::size_t self) {
                    const double d = gr.grad(self)[0] * inv_m;
                    Tensor& dl = gr.grad(logits);
                    for (std::size_t i = 0; i < positions.size(); ++i) {
                      dl.at(positions[i], static_cast<std::size_t>(tgt[i])) += d * terms[i].d_target;
                      for (std::size_t j = 0; j < noise_ids[i].size(); ++j)
                        dl.at(positions[i], static_cast<std::size_t>(noise_ids[i][j])) += d * terms[i].d_noise[j];
                    }
                  });
}

template <typename Rng>
Var nce_loss(Var logits, const std::vector<int>& targets, const MaskingPlan& plan, const NoiseDistribution& noise,
             std::size_t k_noise, double normalizer, Rng& rng) {
  return nce_loss(logits, targets, plan, noise, draw_noise(noise, k_noise, plan.size(), rng), normalizer);
}

// Same loss computed from the fused representation and the head parameters,
// evaluating only the logits of targets and noise samples. This avoids the
// [L x V] product of the full head.
inline Var nce_loss_sampled(Var hidden, Var head_weight, Var head_bias, const std::vector<int>& targets,
                            const MaskingPlan& plan, const NoiseDistribution& noise,
                            const std::vector<std::vector<int>>& noise_ids, double normalizer) {
  Graph& g = detail::graph_of(hidden, head_weight);
  const Tensor& h = hidden.value();
  const Tensor& w = head_weight.value();
  const Tensor& b = head_bias.value();
  require_matrix(h, "nce_loss_sampled");
  require_matrix(w, "nce_loss_sampled");
  const std::size_t d = h.cols(), v = w.cols();
  if (w.rows() != d || b.size() != v) throw DimensionError("nce_loss_sampled: head shape mismatch");
  if (plan.empty()) throw DataError("NCE: empty masking plan");
  if (noise_ids.size() != plan.size()) throw DimensionError("NCE: need one noise row per masked position");
  auto logit = [&](std::size_t p, int id) {
    const auto col = static_cast<std::size_t>(id);
    double s = b[col];
    for (std::size_t j = 0; j < d; ++j) s += h.at(p, j) * w.at(j, col);
    return s;
  };
  const double log_z = std::log(normalizer);
  const double inv_m = 1.0 / static_cast<double>(plan.size());
  double total = 0.0;
  std::vector<detail::NceTerms> terms;
  std::vector<int> tgt;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const std::size_t p = plan.positions[i];
    if (p >= h.rows()) throw DimensionError("NCE: position out of range");
    const int t = targets.at(p);
    if (t < 0 || static_cast<std::size_t>(t) >= v) throw DataError("NCE: target outside vocabulary");
    tgt.push_back(t);
    std::vector<double> nl;
    for (int id : noise_ids[i]) nl.push_back(logit(p, id));
    terms.push_back(detail::nce_terms(logit(p, t), t, nl, noise_ids[i], noise, log_z));
    total += terms.back().loss;
  }
  std::vector<std::size_t> positions = plan.positions;
  return g.record(
      Tensor({1}, std::vector<double>{total * inv_m}), detail::any_grad(g, {hidden, head_weight, head_bias}),
      [hidden, head_weight, head_bias, d, v, inv_m, positions = std::move(positions), tgt = std::move(tgt),
       noise_ids, terms = std::move(terms)](Graph& gr, std::size_t self) {
        const double up = gr.grad(self)[0] * inv_m;
        const Tensor& hv = gr.value(hidden);
        const Tensor& wv = gr.value(head_weight);
        const bool gh = gr.requires_grad(hidden), gw = gr.requires_grad(head_weight),
                   gb = gr.requires_grad(head_bias);
        auto push = [&](std::size_t p, int id, double coeff) {
          const auto col = static_cast<std::size_t>(id);
          if (gb) gr.grad(head_bias)[col] += coeff;
          if (gw) {
            Tensor& dw = gr.grad(head_weight);
            for (std::size_t j = 0; j < d; ++j) dw[j * v + col] += coeff * hv.at(p, j);
          }
          if (gh) {
            Tensor& dh = gr.grad(hidden);
            for (std::size_t j = 0; j < d; ++j) dh.at(p, j) += coeff * wv.at(j, col);
          }
        };
        for (std::size_t i = 0; i < positions.size(); ++i) {
          push(positions[i], tgt[i], up * terms[i].d_target);
          for (std::size_t j = 0; j < noise_ids[i].size(); ++j) push(positions[i], noise_ids[i][j], up * terms[i].d_noise[j]);
        }
      });
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum class LossKind { Softmax, Nce };

inline const char* loss_kind_name(LossKind k) { return k == LossKind::Softmax ? "softmax" : "nce"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "softmax") return LossKind::Softmax;
  if (s == "nce") return LossKind::Nce;
  throw ConfigError("unknown loss '" + s + "' (expected softmax or nce)");
}

struct LossLogRow {
  std::size_t epoch = 0;
  std::string split;  // "train" or "heldout"
  double loss = 0.0;
  double lr = 0.0;

  friend bool operator==(const LossLogRow&, const LossLogRow&) = default;
};

inline std::string format_loss_log(const std::vector<LossLogRow>& rows) {
  std::string out = "epoch\tsplit\tloss\tlr\n";
  for (const auto& r : rows)
    out += std::to_string(r.epoch) + "\t" + r.split + "\t" + detail::format_double(r.loss) + "\t" +
           detail::format_double(r.lr) + "\n";
  return out;
}

// Builds the masked-LM loss of one example in `bind`'s graph.
template <typename Rng>
Var masked_lm_example_loss(ParamBinder& bind, const PreparedExample& ex, const MaskingPlan& plan,
                           const ModelConfig& config, LossKind kind, const NoiseDistribution* noise, Rng& rng,
                           std::mt19937_64* dropout_rng = nullptr) {
  ForwardContext ctx{config, dropout_rng};
  const ModelInput masked = apply_mask(ex.input, plan);
  EncoderOutputs enc = encode(bind, masked, ctx);
  if (kind == LossKind::Softmax) return masked_softmax_loss(mlm_head(bind, enc.fused), ex.word_ids, plan);
  if (!noise) throw ConfigError("NCE loss requires a noise distribution");
  auto ids = draw_noise(*noise, config.noise_samples, plan.size(), rng);
  return nce_loss_sampled(enc.fused.values, bind(keys::mlm_head + ".weight"), bind(keys::mlm_head + ".bias"),
                          ex.word_ids, plan, *noise, ids, static_cast<double>(config.vocab_size));
}

struct PretrainOptions {
  LossKind loss = LossKind::Softmax;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  double heldout_fraction = 0.05;
  std::optional<ModelWeights> init;  // defaults to init_weights(config, seed)
  std::function<void(const LossLogRow&)> on_row;
};

struct PretrainResult {
  ModelWeights weights;   // lowest held-out loss
  std::size_t best_epoch = 0;  // 0 means the initialization
  std::vector<LossLogRow> log;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> heldout_indices;
};

// Deterministic split: shuffle under `seed`, the tail fraction is held out.
inline void split_heldout(std::size_t n, double fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                          std::vector<std::size_t>& heldout) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t h = 0;
  if (n >= 2) h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n))), 1, n - 1);
  train.assign(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(h));
  heldout.assign(idx.end() - static_cast<std::ptrdiff_t>(h), idx.end());
}

inline double heldout_loss(const ModelWeights& w, const std::vector<PreparedExample>& data,
                           const std::vector<std::size_t>& idx, const ModelConfig& config, LossKind kind,
                           const NoiseDistribution* noise, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x68656c64ULL);
  double total = 0.0;
  for (std::size_t i : idx) {
    const MaskingPlan plan = make_masking_plan(data[i], config.mask_fraction, rng);
    Graph g;
    ParamBinder bind(g, w, false);
    total += masked_lm_example_loss(bind, data[i], plan, config, kind, noise, rng).value()[0];
  }
  return idx.empty() ? 0.0 : total / static_cast<double>(idx.size());
}

// Seeded pre-training. Each epoch shuffles the train split, draws fresh
// masking plans (and noise samples for NCE), and applies one Adam step per
// batch under the warmup schedule. Returns the weights with the lowest
// held-out loss (train loss when there is no held-out split).
inline PretrainResult pretrain_loop(const std::vector<PreparedExample>& data, const ModelConfig& config,
                                    const NoiseDistribution& noise, PretrainOptions opts) {
  config.validate();
  if (data.empty()) throw DataError("pretrain: empty dataset");
  PretrainResult res;
  split_heldout(data.size(), opts.heldout_fraction, opts.seed, res.train_indices, res.heldout_indices);
  ModelWeights w = opts.init ? std::move(*opts.init) : init_weights(config, opts.seed);
  res.weights = w;
  if (opts.epochs == 0) return res;

  const LrSchedule schedule = LrSchedule::from(config);
  Adam adam = Adam::from(config);
  std::mt19937_64 rng(opts.seed);
  std::mt19937_64 dropout_rng(opts.seed ^ 0xd20u);
  const NoiseDistribution* noise_ptr = opts.loss == LossKind::Nce ? &noise : nullptr;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order = res.train_indices;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<MaskingPlan> plans;
      for (std::size_t i = start; i < end; ++i) plans.push_back(make_masking_plan(data[order[i]], config.mask_fraction, rng));
      lr = schedule.at(++step);
      std::vector<std::size_t> items(end - start);
      std::iota(items.begin(), items.end(), start);
      double batch_loss = 0.0;
      try {
        batch_loss = train_batch(
            w, adam, lr, items,
            [&](ParamBinder& bind, std::size_t item) {
              return masked_lm_example_loss(bind, data[order[item]], plans[item - start], config, opts.loss,
                                            noise_ptr, rng, &dropout_rng);
            },
            config.grad_clip);
      } catch (const NumericError& e) {
        throw NumericError("pretrain: epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                           ": " + e.what());
      }
      epoch_loss += batch_loss * static_cast<double>(end - start);
    }
    epoch_loss /= static_cast<double>(order.size());
    LossLogRow train_row{epoch, "train", epoch_loss, lr};
    res.log.push_back(train_row);
    if (opts.on_row) opts.on_row(train_row);
    double select = epoch_loss;
    if (!res.heldout_indices.empty()) {
      select = heldout_loss(w, data, res.heldout_indices, config, opts.loss, noise_ptr, opts.seed);
      LossLogRow row{epoch, "heldout", select, lr};
      res.log.push_back(row);
      if (opts.on_row) opts.on_row(row);
    }
    if (!std::isfinite(select)) throw NumericError("pretrain: non-finite held-out loss at epoch " + std::to_string(epoch));
    if (select < best) {
      best = select;
      res.best_epoch = epoch;
      res.weights = w;
    }
  }
  return res;
}

// Argmax predictions at the plan's positions after masking.
inline std::vector<int> predict_masked(const ModelWeights& w, const PreparedExample& ex, const MaskingPlan& plan,
                                       const ModelConfig& config) {
  const Tensor logits = predict_mlm_logits(w, apply_mask(ex.input, plan), config);
  std::vector<int> out;
  for (std::size_t p : plan.positions) {
    auto row = logits.row(p);
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

}  // namespace mmt
