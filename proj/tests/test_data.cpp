// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mmt/data.hpp"
#include "mmt/synth.hpp"
#include "test_util.hpp"

using namespace mmt;
using mmt::test::random_tensor;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mmt_test_data_" + name)).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

MultimodalExample random_example(const std::string& id, std::mt19937_64& rng, bool with_scores) {
  MultimodalExample ex;
  ex.id = id;
  const std::size_t words = 1 + rng() % 5;
  double t = 0.0;
  for (std::size_t w = 0; w < words; ++w) {
    ex.tokens.push_back("tok" + std::to_string(rng() % 7));
    const double dur = 10.0 * static_cast<double>(5 + rng() % 20);
    ex.boundaries.push_back({t, t + dur});
    t += dur;
  }
  ex.audio = random_tensor({static_cast<std::size_t>(t / 10.0), 3}, rng);
  ex.visual = random_tensor({std::max<std::size_t>(1, static_cast<std::size_t>(t * 25.0 / 1000.0)), 2}, rng);
  if (with_scores) ex.emotion_scores = std::vector<double>{0, 1, 2, 3, 0.5, 2.25};
  return ex;
}

}  // namespace

// --- align ------------------------------------------------------------------

TEST(Align, ExactDivision) {
  const auto s = align({{0.0, 100.0}}, 10.0, 25.0);
  EXPECT_EQ(s[0].audio, (Span{0, 10}));
  EXPECT_EQ(s[0].visual, (Span{0, 2}));
}

TEST(Align, ShortWordGetsEmptyVisualSpan) {
  const auto s = align({{95.0, 105.0}}, 10.0, 25.0);
  EXPECT_EQ(s[0].visual, (Span{2, 2}));
  EXPECT_TRUE(s[0].visual.empty());
  EXPECT_EQ(s[0].audio, (Span{9, 10}));
}

TEST(Align, EndBeforeStartIsError) {
  EXPECT_THROW(align({{50.0, 40.0}}, 10.0, 25.0), DataError);
}

TEST(Align, ConsecutiveWordsGiveDisjointInBoundsSpans) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<WordBoundary> b;
    double t = 0.0;
    const std::size_t n = 1 + rng() % 10;
    for (std::size_t i = 0; i < n; ++i) {
      const double gap = static_cast<double>(rng() % 50);
      const double dur = static_cast<double>(rng() % 400) + 0.5;
      b.push_back({t + gap, t + gap + dur});
      t += gap + dur;
    }
    const std::size_t frames = static_cast<std::size_t>(t / 10.0);
    const std::size_t vframes = static_cast<std::size_t>(t * 30.0 / 1000.0);
    const auto spans = align(b, 10.0, 30.0, frames, vframes);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_LE(spans[i].audio.end, frames);
      EXPECT_LE(spans[i].visual.end, vframes);
      EXPECT_LE(spans[i].audio.begin, spans[i].audio.end);
      if (i > 0) {
        EXPECT_LE(spans[i - 1].audio.end, spans[i].audio.begin);
        EXPECT_LE(spans[i - 1].visual.end, spans[i].visual.begin);
      }
    }
  }
}

// --- stacking ---------------------------------------------------------------

TEST(Stack, TenFramesGiveTwoRows) {
  std::mt19937_64 rng(2);
  const Tensor f = random_tensor({10, 40}, rng);
  const Tensor s = stack_audio(f);
  EXPECT_EQ(s.shape(), (Shape{2, 200}));
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t j = 0; j < 40; ++j) EXPECT_EQ(s.at(r / 5, (r % 5) * 40 + j), f.at(r, j));
}

TEST(Stack, SevenFramesPadThreeZeroFrames) {
  std::mt19937_64 rng(3);
  const Tensor f = random_tensor({7, 4}, rng);
  const Tensor s = stack_audio(f);
  ASSERT_EQ(s.shape(), (Shape{2, 20}));
  for (std::size_t j = 8; j < 20; ++j) EXPECT_EQ(s.at(1, j), 0.0);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(s.at(1, j), f.at(5 + j / 4, j % 4));
}

TEST(Stack, UnstackRestackRoundTrip) {
  std::mt19937_64 rng(4);
  const Tensor f = random_tensor({15, 6}, rng);
  const Tensor s = stack_audio(f);
  EXPECT_EQ(unstack_audio(s, 5, 15), f);
  EXPECT_EQ(stack_audio(unstack_audio(s, 5, 15)), s);
}

TEST(Stack, PreservesEnergy) {
  std::mt19937_64 rng(5);
  for (std::size_t t = 1; t <= 23; ++t) {
    const Tensor f = random_tensor({t, 3}, rng);
    double a = 0.0, b = 0.0;
    for (double v : f.values()) a += v * v;
    const Tensor s = stack_audio(f);
    for (double v : s.values()) b += v * v;
    EXPECT_DOUBLE_EQ(a, b);
  }
}

TEST(Stack, SpansRescaleByStackSize) {
  EXPECT_EQ(stacked_span({0, 10}, 5), (Span{0, 2}));
  EXPECT_EQ(stacked_span({10, 25}, 5), (Span{2, 5}));
  EXPECT_EQ(stacked_rows(7, 5), 2u);
}

// --- dataset file -----------------------------------------------------------

TEST(Dataset, EmptyFileIsEmptyDataset) {
  const auto path = temp_path("empty.jsonl");
  write_text(path, "");
  EXPECT_TRUE(read_dataset(path).empty());
  std::filesystem::remove(path);
}

TEST(Dataset, RoundTripIsBitIdentical) {
  std::mt19937_64 rng(6);
  std::vector<MultimodalExample> data;
  for (int i = 0; i < 3; ++i) data.push_back(random_example("ex" + std::to_string(i), rng, i != 1));
  data[0].audio[0] = -0.0;
  data[0].audio[1] = 1e-310;  // subnormal
  const auto path = temp_path("roundtrip.jsonl");
  write_dataset(path, data);
  const auto back = read_dataset(path);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_EQ(back[i].tokens, data[i].tokens);
    EXPECT_EQ(back[i].boundaries, data[i].boundaries);
    EXPECT_EQ(back[i].emotion_scores, data[i].emotion_scores);
    ASSERT_EQ(back[i].audio.size(), data[i].audio.size());
    EXPECT_EQ(std::memcmp(back[i].audio.data(), data[i].audio.data(), data[i].audio.size() * sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(back[i].visual.data(), data[i].visual.data(), data[i].visual.size() * sizeof(double)), 0);
  }
  write_dataset(path + "2", back);
  EXPECT_EQ(read_file(path), read_file(path + "2"));
  std::filesystem::remove(path);
  std::filesystem::remove(path + "2");
}

TEST(Dataset, TruncatedPayloadNamesRecord) {
  std::mt19937_64 rng(7);
  std::string line = example_to_json_line(random_example("broken-one", rng, true));
  const auto pos = line.find("\"f64le\":\"") + 9;
  line.erase(pos, 5);
  const auto path = temp_path("truncated.jsonl");
  write_text(path, dataset_header() + "\n" + line + "\n");
  try {
    read_dataset(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("broken-one"), std::string::npos) << msg;
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  }
  std::filesystem::remove(path);
}

TEST(Dataset, SchemaViolationNamesFieldPath) {
  const auto path = temp_path("schema.jsonl");
  write_text(path, dataset_header() + "\n" + R"({"id":"x1","tokens":["a"],"boundaries":[[0,10]],"audio":5})" + "\n");
  try {
    read_dataset(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("audio"), std::string::npos) << e.what();
  }
  std::filesystem::remove(path);
}

TEST(Dataset, WrongVersionIsRejected) {
  const auto path = temp_path("version.jsonl");
  write_text(path, R"({"format":"mmt-dataset","version":99})" "\n");
  EXPECT_THROW(read_dataset(path), DataError);
  std::filesystem::remove(path);
}

TEST(Dataset, MissingFileIsIoError) {
  EXPECT_THROW(read_dataset(temp_path("does-not-exist.jsonl")), IoError);
}

TEST(Dataset, BoundaryOutsideClipIsRejected) {
  std::mt19937_64 rng(8);
  MultimodalExample ex = random_example("late", rng, false);
  ex.boundaries.back().end_ms += 1000.0;
  EXPECT_THROW(validate_example(ex, AlignmentParams{}), DataError);
}

// --- embeddings -------------------------------------------------------------

TEST(Embeddings, AllTokensPresent) {
  std::istringstream in("a 1 2\nb 3 4\nc 5 6\n");
  const Vocabulary v = parse_embeddings(in, "mem");
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.dim(), 2u);
  EXPECT_EQ(v.id("b"), 1);
  EXPECT_EQ(v.embeddings.at(2, 1), 6.0);
}

TEST(Embeddings, InconsistentDimensionIsFormatError) {
  std::istringstream in("a 1 2\nb 3\n");
  EXPECT_THROW(parse_embeddings(in, "mem"), DataError);
}

TEST(Embeddings, DuplicateTokenLastOccurrenceWins) {
  std::istringstream in("a 1 2\nb 3 4\na 7 8\n");
  EmbeddingLoadReport rep;
  const Vocabulary v = parse_embeddings(in, "mem", &rep);
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(rep.duplicates, 1u);
  EXPECT_EQ(v.embeddings.at(static_cast<std::size_t>(v.id("a")), 0), 7.0);
  EXPECT_EQ(v.embeddings.at(static_cast<std::size_t>(v.id("a")), 1), 8.0);
}

TEST(Embeddings, OovTokenIsDroppedWithItsBoundary) {
  std::istringstream in("the 1 0\ncat 0 1\n");
  Vocabulary v = parse_embeddings(in, "mem");
  MultimodalExample ex;
  ex.id = "oov";
  ex.tokens = {"the", "zyzzyva", "cat"};
  ex.boundaries = {{0, 100}, {100, 200}, {200, 300}};
  ex.audio = Tensor::matrix(30, 2);
  ex.visual = Tensor::matrix(7, 2);
  std::vector<MultimodalExample> data{ex};
  const OovReport rep = resolve_tokens(data, v);
  EXPECT_EQ(rep.dropped_tokens, 1u);
  ASSERT_EQ(data.size(), 1u);
  EXPECT_EQ(data[0].tokens, (std::vector<std::string>{"the", "cat"}));
  EXPECT_EQ(data[0].word_ids, (std::vector<int>{0, 1}));
  EXPECT_EQ(data[0].boundaries, (std::vector<WordBoundary>{{0, 100}, {200, 300}}));
  EXPECT_EQ(v.counts, (std::vector<std::uint64_t>{1, 1}));
}

TEST(Embeddings, WriteLoadRoundTrip) {
  std::istringstream in("x 0.1 -2.5e-7\ny 3 4\n");
  const Vocabulary v = parse_embeddings(in, "mem");
  const auto path = temp_path("emb.txt");
  write_embeddings(path, v);
  const Vocabulary back = load_embeddings(path);
  EXPECT_EQ(back.tokens, v.tokens);
  EXPECT_EQ(back.embeddings, v.embeddings);
  std::filesystem::remove(path);
}

TEST(Prepare, SpansIndexStackedRows) {
  std::istringstream in("a 1 0\nb 0 1\n");
  Vocabulary v = parse_embeddings(in, "mem");
  MultimodalExample ex;
  ex.id = "p";
  ex.tokens = {"a", "b"};
  ex.boundaries = {{0, 100}, {100, 230}};
  ex.audio = Tensor::matrix(23, 8);
  ex.visual = Tensor::matrix(5, 3);
  std::vector<MultimodalExample> data{ex};
  resolve_tokens(data, v);
  ModelConfig c = ModelConfig::toy();
  const PreparedExample p = prepare_example(data[0], v, c);
  EXPECT_EQ(p.input.audio.shape(), (Shape{5, 40}));
  EXPECT_EQ(p.spans[0].audio, (Span{0, 2}));
  EXPECT_EQ(p.spans[1].audio, (Span{2, 4}));
  EXPECT_EQ(p.spans[1].visual, (Span{2, 5}));
  EXPECT_EQ(p.input.text.at(1, 1), 1.0);
}

// --- synthetic corpus -------------------------------------------------------

namespace {

SynthParams small_params(std::uint64_t seed, std::size_t examples) {
  SynthParams p;
  p.seed = seed;
  p.examples = examples;
  return p;
}

// Member posterior from the audio frames of the words next to the slot; the
// slot's own frames are left out, as they are after masking. Uses the true
// generative parameters (signature, phonetic means, unit noise).
int bayes_member_from_audio(const SynthCorpus& c, std::size_t i) {
  const auto& ex = c.examples[i];
  const auto& rec = c.manifest[i];
  const auto pros = c.world.prosody.row(rec.template_index);
  double llr = 0.0;  // log p(x | member 0) - log p(x | member 1)
  const auto spans = align(ex.boundaries, 10.0, 25.0, ex.audio.rows(), ex.visual.rows());
  for (std::size_t w = 0; w < ex.tokens.size(); ++w) {
    const std::size_t dist = w > rec.slot_position ? w - rec.slot_position : rec.slot_position - w;
    if (w == rec.slot_position || dist > c.params.cue_radius) continue;
    const auto phon = c.world.phonetic.row(static_cast<std::size_t>(ex.word_ids[w]));
    for (std::size_t f = spans[w].audio.begin; f < spans[w].audio.end; ++f)
      for (std::size_t j = 0; j < ex.audio.cols(); ++j) llr += 2.0 * pros[j] * (ex.audio.at(f, j) - phon[j]);
  }
  return llr >= 0.0 ? 0 : 1;
}

}  // namespace

TEST(Synth, SameSeedIsByteIdentical) {
  const SynthCorpus a = synth_corpus(small_params(3, 50));
  const SynthCorpus b = synth_corpus(small_params(3, 50));
  ASSERT_EQ(a.examples.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(example_to_json_line(a.examples[i]), example_to_json_line(b.examples[i]));
  EXPECT_EQ(synth_manifest_text(a), synth_manifest_text(b));
  const SynthCorpus c = synth_corpus(small_params(4, 50));
  EXPECT_NE(example_to_json_line(a.examples[0]), example_to_json_line(c.examples[0]));
}

TEST(Synth, InfeasibleParametersAreRejected) {
  SynthParams p = small_params(1, 10);
  p.vocab_size = 8;
  p.ambiguity_pairs = 3;
  EXPECT_THROW(synth_corpus(p), ConfigError);
  p = small_params(1, 10);
  p.templates = 0;
  EXPECT_THROW(synth_corpus(p), ConfigError);
}

TEST(Synth, ExamplesValidateAndPrepare) {
  const SynthCorpus c = synth_corpus(small_params(5, 100));
  ModelConfig cfg = ModelConfig::desk();
  cfg.audio_input_dim = c.params.audio_dim * cfg.audio_stack;
  for (const auto& ex : c.examples) {
    EXPECT_NO_THROW(validate_example(ex, AlignmentParams::from(cfg)));
    EXPECT_NO_THROW(prepare_example(ex, c.world.vocab, cfg));
  }
}

TEST(Synth, MemberFrequencyIsBalanced) {
  const SynthCorpus c = synth_corpus(small_params(6, 4000));
  double m1 = 0.0;
  for (const auto& r : c.manifest) m1 += r.member;
  EXPECT_NEAR(m1 / 4000.0, 0.5, 0.02);
}

TEST(Synth, TextIsIdenticalForBothPairMembers) {
  // Homograph pairs: swapping the member leaves the text input unchanged, so
  // a text-only predictor is right exactly as often as the member it guesses
  // occurs, and the Bayes rate is 0.5.
  const SynthCorpus c = synth_corpus(small_params(7, 200));
  ModelConfig cfg = ModelConfig::desk();
  cfg.audio_input_dim = c.params.audio_dim * cfg.audio_stack;
  for (std::size_t i = 0; i < c.examples.size(); ++i) {
    MultimodalExample swapped = c.examples[i];
    const auto& r = c.manifest[i];
    const int other = c.world.pair_token(r.pair, 1 - r.member);
    swapped.word_ids[r.slot_position] = other;
    swapped.tokens[r.slot_position] = c.world.vocab.tokens[static_cast<std::size_t>(other)];
    EXPECT_EQ(prepare_example(swapped, c.world.vocab, cfg).input.text,
              prepare_example(c.examples[i], c.world.vocab, cfg).input.text);
  }
}

TEST(Synth, TextOnlyBayesAccuracyIsOneHalf) {
  // Given the text context (template), the best text-only guess is the more
  // frequent member for that template; its accuracy converges to 0.5.
  const SynthCorpus c = synth_corpus(small_params(8, 4000));
  std::vector<std::array<int, 2>> counts(c.params.templates, {0, 0});
  for (const auto& r : c.manifest) ++counts[r.template_index][static_cast<std::size_t>(r.member)];
  double best = 0.0;
  for (const auto& t : counts) best += std::max(t[0], t[1]);
  // The majority vote of each template overfits by O(sqrt(n)) at most.
  EXPECT_NEAR(best / 4000.0, 0.5, 0.03);
}

TEST(Synth, AudioBayesAccuracyAfterMasking) {
  const SynthCorpus c = synth_corpus(small_params(9, 2000));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < c.examples.size(); ++i) ok += bayes_member_from_audio(c, i) == c.manifest[i].member;
  EXPECT_GE(static_cast<double>(ok) / 2000.0, 0.99);
}

TEST(Synth, LabelsReconstructFromManifest) {
  const SynthCorpus c = synth_corpus(small_params(10, 500));
  const std::string text = synth_manifest_text(c);
  std::istringstream in(text);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.rfind("syn", 0) != 0) continue;
    const auto field = [&](const std::string& key) {
      const auto p = line.find(key + "=") + key.size() + 1;
      return line.substr(p, line.find('\t', p) - p);
    };
    const std::size_t i = std::stoul(line.substr(3, line.find('\t') - 3));
    const auto labels = synth_labels(std::stoi(field("member")), std::stoi(field("visual")));
    const auto& scores = *c.examples[i].emotion_scores;
    for (std::size_t e = 0; e < kNumEmotions; ++e) EXPECT_EQ(labels[e], scores[e] > 0.0 ? 1 : 0);
    ++rows;
  }
  EXPECT_EQ(rows, 500u);
}

TEST(Synth, SlotHoldsThePairMember) {
  const SynthCorpus c = synth_corpus(small_params(11, 300));
  for (std::size_t i = 0; i < c.examples.size(); ++i) {
    const auto& r = c.manifest[i];
    EXPECT_EQ(c.examples[i].word_ids[r.slot_position], c.world.pair_token(r.pair, r.member));
  }
}
