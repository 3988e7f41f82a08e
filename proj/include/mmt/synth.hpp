// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multimodal corpus with a known generative process.
//
// Every sentence is drawn from a fixed set of filler templates with one slot.
// The slot holds one member of an ambiguity pair; both members share exactly
// the same textual context distribution (and, by default, the same embedding
// row), so text alone cannot tell them apart. The member is encoded as a
// template-specific audio signature, +row for member 0 and -row for member 1,
// added to the frames of the slot word and its neighbours within cue_radius.
// An independent binary emotion state is encoded in the visual frames.
// Emotion labels are a deterministic function of (slot member, visual state).
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mmt/data.hpp"
#include "mmt/errors.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

struct SynthParams {
  std::uint64_t seed = 1;
  std::size_t examples = 2000;
  std::size_t vocab_size = 64;
  std::size_t ambiguity_pairs = 1;
  std::size_t audio_dim = 8;     // raw LFBE-like frame width (stacked x5 by the model)
  std::size_t visual_dim = 16;
  std::size_t text_dim = 16;
  double visual_fps = 25.0;
  std::size_t templates = 8;
  std::size_t min_words = 4;
  std::size_t max_words = 7;
  std::size_t min_word_ms = 150;  // multiples of 10 ms
  std::size_t max_word_ms = 300;
  double prosody_scale = 1.0;     // |signature|; member signatures are +/- this
  // The member signature sits on the frames of every word within this many
  // positions of the slot (coarticulation), so it survives masking the slot.
  std::size_t cue_radius = 1;
  double phonetic_scale = 1.0;
  double audio_noise = 1.0;
  double visual_scale = 1.0;
  double visual_noise = 1.0;
  // Text-embedding distance between the members of a pair: 0 makes them
  // homographs (identical rows), 1 leaves them independent.
  double pair_text_spread = 0.0;

  static constexpr std::size_t kMinFillers = 4;

  void validate() const {
    if (examples == 0) throw ConfigError("synth: examples must be positive");
    if (ambiguity_pairs == 0) throw ConfigError("synth: at least one ambiguity pair is required");
    if (vocab_size < 2 * ambiguity_pairs + kMinFillers)
      throw ConfigError("synth: vocab_size " + std::to_string(vocab_size) + " is too small for " +
                        std::to_string(ambiguity_pairs) + " ambiguity pairs (need at least " +
                        std::to_string(2 * ambiguity_pairs + kMinFillers) + ")");
    if (audio_dim == 0 || visual_dim == 0 || text_dim == 0) throw ConfigError("synth: dims must be positive");
    if (templates == 0) throw ConfigError("synth: templates must be positive");
    if (min_words < 2 || max_words < min_words) throw ConfigError("synth: invalid sentence length range");
    if (min_word_ms < 10 || max_word_ms < min_word_ms) throw ConfigError("synth: invalid word duration range");
    if (!(visual_fps > 0.0)) throw ConfigError("synth: fps must be positive");
    if (!(pair_text_spread >= 0.0 && pair_text_spread <= 1.0))
      throw ConfigError("synth: pair_text_spread must be in [0,1]");
  }
};

// Ground truth for one generated example.
struct SynthRecord {
  std::string id;
  std::size_t template_index = 0;
  std::size_t slot_position = 0;
  std::size_t pair = 0;
  int member = 0;        // 0 or 1 within the pair
  int visual_state = 0;  // 0 or 1
  std::vector<int> labels;  // binary, per emotion
};

struct SynthTemplate {
  std::vector<int> words;  // filler ids; the slot entry holds -1
  std::size_t slot = 0;
  std::size_t pair = 0;
};

// The fixed "world" every example of one seed is drawn from.
struct SynthWorld {
  Vocabulary vocab;
  Tensor phonetic;   // [vocab x audio_dim]
  Tensor prosody;    // [templates x audio_dim]; member 0 adds +row, member 1 adds -row
  Tensor visual_signature;  // [1 x visual_dim]; state 0 adds +row, state 1 adds -row
  std::vector<SynthTemplate> templates;

  int pair_token(std::size_t pair, int member) const { return static_cast<int>(2 * pair) + member; }
};

struct SynthCorpus {
  SynthParams params;
  SynthWorld world;
  std::vector<MultimodalExample> examples;
  std::vector<SynthRecord> manifest;
};

// Binary label rule (emotion order: happy, sad, anger, surprise, disgust, fear).
inline std::vector<int> synth_labels(int member, int visual_state) {
  const bool m0 = member == 0, v1 = visual_state == 1;
  return {m0, !m0, v1, m0 && v1, !v1, !m0 && !v1};
}

inline SynthWorld make_synth_world(const SynthParams& p, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  SynthWorld w;
  const std::size_t pair_tokens = 2 * p.ambiguity_pairs;
  for (std::size_t i = 0; i < p.vocab_size; ++i) {
    std::string tok = i < pair_tokens ? "amb" + std::to_string(i / 2) + (i % 2 ? "b" : "a")
                                      : "w" + std::to_string(i - pair_tokens);
    w.vocab.index.emplace(tok, static_cast<int>(i));
    w.vocab.tokens.push_back(std::move(tok));
  }
  w.vocab.embeddings = Tensor::matrix(p.vocab_size, p.text_dim);
  const double emb_scale = 1.0 / std::sqrt(static_cast<double>(p.text_dim));
  for (double& v : w.vocab.embeddings.storage()) v = normal(rng) * emb_scale * 3.0;
  for (std::size_t k = 0; k < p.ambiguity_pairs; ++k) {
    auto a = w.vocab.embeddings.row(2 * k);
    auto b = w.vocab.embeddings.row(2 * k + 1);
    for (std::size_t j = 0; j < p.text_dim; ++j) b[j] = a[j] + p.pair_text_spread * (b[j] - a[j]);
  }
  w.vocab.counts.assign(p.vocab_size, 0);

  w.phonetic = Tensor::matrix(p.vocab_size, p.audio_dim);
  for (double& v : w.phonetic.storage()) v = normal(rng) * p.phonetic_scale;

  auto unit_rows = [&](std::size_t rows, std::size_t dim, double scale) {
    Tensor t = Tensor::matrix(rows, dim);
    for (std::size_t r = 0; r < rows; ++r) {
      double norm = 0.0;
      for (double& v : t.row(r)) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      for (double& v : t.row(r)) v = v / norm * scale * std::sqrt(static_cast<double>(dim));
    }
    return t;
  };
  w.prosody = unit_rows(p.templates, p.audio_dim, p.prosody_scale);
  w.visual_signature = unit_rows(1, p.visual_dim, p.visual_scale);

  const std::size_t fillers = p.vocab_size - pair_tokens;
  std::uniform_int_distribution<std::size_t> len_dist(p.min_words, p.max_words);
  std::uniform_int_distribution<std::size_t> filler_dist(0, fillers - 1);
  for (std::size_t t = 0; t < p.templates; ++t) {
    SynthTemplate tpl;
    const std::size_t len = len_dist(rng);
    tpl.slot = std::uniform_int_distribution<std::size_t>(0, len - 1)(rng);
    tpl.pair = t % p.ambiguity_pairs;
    for (std::size_t i = 0; i < len; ++i)
      tpl.words.push_back(i == tpl.slot ? -1 : static_cast<int>(pair_tokens + filler_dist(rng)));
    w.templates.push_back(std::move(tpl));
  }
  return w;
}

// Appends `count` examples drawn from `world`, continuing the id sequence.
inline void synth_examples(SynthCorpus& corpus, std::size_t count, std::mt19937_64& rng) {
  const SynthParams& p = corpus.params;
  const SynthWorld& w = corpus.world;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> tpl_dist(0, w.templates.size() - 1);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<std::size_t> dur_dist(p.min_word_ms / 10, p.max_word_ms / 10);
  std::uniform_int_distribution<int> likert(1, 3);

  for (std::size_t n = 0; n < count; ++n) {
    SynthRecord rec;
    rec.id = "syn" + std::to_string(corpus.examples.size());
    rec.template_index = tpl_dist(rng);
    const SynthTemplate& tpl = w.templates[rec.template_index];
    rec.slot_position = tpl.slot;
    rec.pair = tpl.pair;
    rec.member = coin(rng);
    rec.visual_state = coin(rng);
    rec.labels = synth_labels(rec.member, rec.visual_state);

    MultimodalExample ex;
    ex.id = rec.id;
    std::size_t t_ms = 0;
    for (std::size_t i = 0; i < tpl.words.size(); ++i) {
      const int id = i == tpl.slot ? w.pair_token(tpl.pair, rec.member) : tpl.words[i];
      ex.tokens.push_back(w.vocab.tokens[static_cast<std::size_t>(id)]);
      ex.word_ids.push_back(id);
      const std::size_t dur = dur_dist(rng) * 10;
      ex.boundaries.push_back({static_cast<double>(t_ms), static_cast<double>(t_ms + dur)});
      t_ms += dur;
    }
    const std::size_t audio_frames = t_ms / 10;
    ex.audio = Tensor::matrix(audio_frames, p.audio_dim);
    const double sign_a = rec.member == 0 ? 1.0 : -1.0;
    std::size_t word = 0;
    for (std::size_t f = 0; f < audio_frames; ++f) {
      while (word + 1 < ex.boundaries.size() && static_cast<double>(f * 10) >= ex.boundaries[word].end_ms) ++word;
      const auto phon = w.phonetic.row(static_cast<std::size_t>(ex.word_ids[word]));
      const auto pros = w.prosody.row(rec.template_index);
      const std::size_t dist = word > tpl.slot ? word - tpl.slot : tpl.slot - word;
      const bool cued = dist <= p.cue_radius;
      auto row = ex.audio.row(f);
      for (std::size_t j = 0; j < p.audio_dim; ++j)
        row[j] = phon[j] + (cued ? sign_a * pros[j] : 0.0) + p.audio_noise * normal(rng);
    }
    const auto visual_frames =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(t_ms) * p.visual_fps / 1000.0)));
    ex.visual = Tensor::matrix(visual_frames, p.visual_dim);
    const double sign_v = rec.visual_state == 0 ? 1.0 : -1.0;
    for (std::size_t f = 0; f < visual_frames; ++f) {
      auto row = ex.visual.row(f);
      for (std::size_t j = 0; j < p.visual_dim; ++j)
        row[j] = sign_v * w.visual_signature[j] + p.visual_noise * normal(rng);
    }
    std::vector<double> scores;
    for (int l : rec.labels) scores.push_back(l ? static_cast<double>(likert(rng)) : 0.0);
    ex.emotion_scores = std::move(scores);

    corpus.examples.push_back(std::move(ex));
    corpus.manifest.push_back(std::move(rec));
  }
}

// Deterministic in params.seed: the same parameters give a byte-identical
// corpus. Examples come back with word ids already resolved.
inline SynthCorpus synth_corpus(const SynthParams& params) {
  params.validate();
  SynthCorpus c;
  c.params = params;
  std::mt19937_64 rng(params.seed);
  c.world = make_synth_world(params, rng);
  synth_examples(c, params.examples, rng);
  for (const auto& ex : c.examples)
    for (int id : ex.word_ids) ++c.world.vocab.counts[static_cast<std::size_t>(id)];
  return c;
}

// Manifest text: a header block followed by one line per example id.
inline std::string synth_manifest_text(const SynthCorpus& c) {
  std::string out = "# synthetic corpus manifest\n";
  const auto& p = c.params;
  out += "seed = " + std::to_string(p.seed) + "\n";
  out += "examples = " + std::to_string(c.examples.size()) + "\n";
  out += "vocab_size = " + std::to_string(p.vocab_size) + "\n";
  out += "ambiguity_pairs = " + std::to_string(p.ambiguity_pairs) + "\n";
  out += "audio_dim = " + std::to_string(p.audio_dim) + "\n";
  out += "visual_dim = " + std::to_string(p.visual_dim) + "\n";
  out += "text_dim = " + std::to_string(p.text_dim) + "\n";
  out += "templates = " + std::to_string(p.templates) + "\n";
  out += "cue_radius = " + std::to_string(p.cue_radius) + "\n";
  out += "prosody_scale = " + detail::format_double(p.prosody_scale) + "\n";
  out += "phonetic_scale = " + detail::format_double(p.phonetic_scale) + "\n";
  out += "audio_noise = " + detail::format_double(p.audio_noise) + "\n";
  out += "visual_scale = " + detail::format_double(p.visual_scale) + "\n";
  out += "visual_noise = " + detail::format_double(p.visual_noise) + "\n";
  out += "pair_text_spread = " + detail::format_double(p.pair_text_spread) + "\n";
  out += "emotions = happy,sad,anger,surprise,disgust,fear\n";
  for (std::size_t pr = 0; pr < p.ambiguity_pairs; ++pr)
    out += "pair " + std::to_string(pr) + " = " + c.world.vocab.tokens[2 * pr] + "," +
           c.world.vocab.tokens[2 * pr + 1] + "\n";
  for (const auto& r : c.manifest) {
    std::string labels;
    for (int l : r.labels) labels += static_cast<char>('0' + l);
    out += r.id + "\ttemplate=" + std::to_string(r.template_index) + "\tslot=" +
           std::to_string(r.slot_position) + "\tpair=" + std::to_string(r.pair) + "\tmember=" +
           std::to_string(r.member) + "\tvisual=" + std::to_string(r.visual_state) + "\tlabels=" + labels + "\n";
  }
  return out;
}

}  // namespace mmt
