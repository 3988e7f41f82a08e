// SPDX-License-Identifier: Apache-2.0
//
// End-to-end gradient checks of the two training losses on a tiny random
// batch.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmt/data.hpp"
#include "mmt/finetune.hpp"
#include "mmt/grad_check.hpp"
#include "mmt/pretrain.hpp"

namespace mmt {

// Random examples whose shapes match `config`: `words` text positions, two
// stacked audio rows and two visual frames per word, and emotion scores with
// both classes present for every emotion across the batch.
inline std::vector<PreparedExample> make_toy_batch(const ModelConfig& config, std::uint64_t seed,
                                                   std::size_t count = 2, std::size_t words = 4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> token(0, static_cast<int>(config.vocab_size) - 1);
  auto fill = [&](Tensor& t) {
    for (double& v : t.storage()) v = normal(rng);
  };
  std::vector<PreparedExample> out;
  for (std::size_t n = 0; n < count; ++n) {
    PreparedExample ex;
    ex.id = "toy" + std::to_string(n);
    const std::size_t len = words + n;  // distinct lengths per example
    ex.input.audio = Tensor::matrix(2 * len + 1, config.audio_input_dim);
    ex.input.visual = Tensor::matrix(2 * len, config.visual_input_dim);
    ex.input.text = Tensor::matrix(len, config.text_embedding_dim);
    fill(ex.input.audio);
    fill(ex.input.visual);
    fill(ex.input.text);
    for (std::size_t i = 0; i < len; ++i) {
      ex.word_ids.push_back(token(rng));
      ex.spans.push_back({{2 * i, 2 * i + 2}, {2 * i, 2 * i + 2}});
    }
    std::vector<double> scores(config.num_emotions);
    for (std::size_t j = 0; j < scores.size(); ++j) scores[j] = ((j + n) % 2) ? 2.0 : 0.0;
    ex.emotion_scores = scores;
    out.push_back(std::move(ex));
  }
  return out;
}

struct GradCheckReport {
  GradCheckResult masked_softmax;
  GradCheckResult nce;
  GradCheckResult finetune;

  double max_rel_error() const {
    return std::max({masked_softmax.max_rel_error, nce.max_rel_error, finetune.max_rel_error});
  }
};

inline constexpr double kGradCheckTolerance = 1e-4;

// Deterministic in `seed`: masking plans and noise samples are drawn once and
// held fixed while the loss is perturbed.
inline GradCheckReport run_gradient_checks(const ModelConfig& config, std::uint64_t seed, std::size_t samples = 200,
                                           double h = 1e-5) {
  config.validate();
  const auto batch = make_toy_batch(config, seed);
  ModelWeights w = init_weights(config, seed);
  const ModelWeights w_finetune = finetune_init(w, config, seed);
  w.erase(keys::emotion_head + ".weight");
  w.erase(keys::emotion_head + ".bias");
  std::mt19937_64 rng(seed ^ 0x67636bULL);
  std::vector<MaskingPlan> plans;
  std::vector<std::vector<std::vector<int>>> noise_ids;
  const NoiseDistribution noise = NoiseDistribution::uniform(config.vocab_size);
  for (const auto& ex : batch) {
    plans.push_back(make_masking_plan(ex, 0.5, rng));
    noise_ids.push_back(draw_noise(noise, config.noise_samples, plans.back().size(), rng));
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  const ForwardContext ctx{config};

  LossBuilder softmax_loss = [&](ParamBinder& bind) {
    Var total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      EncoderOutputs enc = encode(bind, apply_mask(batch[i].input, plans[i]), ctx);
      Var l = masked_softmax_loss(mlm_head(bind, enc.fused), batch[i].word_ids, plans[i]);
      total = i == 0 ? l : add(total, l);
    }
    return scale(total, inv);
  };
  LossBuilder nce = [&](ParamBinder& bind) {
    Var total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      EncoderOutputs enc = encode(bind, apply_mask(batch[i].input, plans[i]), ctx);
      Var l = nce_loss_sampled(enc.fused.values, bind(keys::mlm_head + ".weight"), bind(keys::mlm_head + ".bias"),
                               batch[i].word_ids, plans[i], noise, noise_ids[i],
                               static_cast<double>(config.vocab_size));
      total = i == 0 ? l : add(total, l);
    }
    return scale(total, inv);
  };
  std::vector<std::vector<int>> targets;
  for (const auto& ex : batch) targets.push_back(example_targets(ex));
  const ClassWeights cw = class_weights(targets);
  LossBuilder emotion = [&](ParamBinder& bind) {
    Var total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Var l = emotion_example_loss(bind, batch[i], targets[i], cw, config);
      total = i == 0 ? l : add(total, l);
    }
    return scale(total, inv);
  };

  GradCheckReport r;
  r.masked_softmax = grad_check(softmax_loss, w, samples, h, seed);
  r.nce = grad_check(nce, w, samples, h, seed + 1);
  r.finetune = grad_check(emotion, w_finetune, samples, h, seed + 2);
  return r;
}

}  // namespace mmt
