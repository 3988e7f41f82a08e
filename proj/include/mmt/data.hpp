// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mmt/config.hpp"
#include "mmt/errors.hpp"
#include "mmt/log.hpp"
#include "mmt/model.hpp"
#include "mmt/tensor.hpp"
#include "mmt/weights.hpp"

namespace mmt {

inline constexpr std::size_t kNumEmotions = 6;
inline constexpr const char* kEmotionNames[kNumEmotions] = {"happy", "sad",      "anger",
                                                            "surprise", "disgust", "fear"};

struct WordBoundary {
  double start_ms = 0.0;
  double end_ms = 0.0;

  friend bool operator==(const WordBoundary&, const WordBoundary&) = default;
};

// One utterance as stored on disk. `word_ids` is filled by resolve_tokens().
struct MultimodalExample {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<int> word_ids;
  std::vector<WordBoundary> boundaries;
  Tensor audio;   // raw frames [T_a x audio_dim], 10 ms hop, before stacking
  Tensor visual;  // [T_v x visual_dim]
  std::optional<std::vector<double>> emotion_scores;  // Likert [0,3] per emotion

  std::size_t num_words() const { return tokens.size(); }

  friend bool operator==(const MultimodalExample&, const MultimodalExample&) = default;
};

// Half-open index interval [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool empty() const { return end <= begin; }
  std::size_t size() const { return empty() ? 0 : end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }

  friend bool operator==(const Span&, const Span&) = default;
};

struct WordSpans {
  Span audio;   // raw audio frames
  Span visual;  // visual frames
};

struct AlignmentParams {
  double audio_hop_ms = 10.0;
  double visual_fps = 25.0;
  std::size_t audio_stack = 5;

  static AlignmentParams from(const ModelConfig& c) {
    return {c.audio_hop_ms, c.visual_fps, c.audio_stack};
  }
};

// audio span  = [floor(start / hop), floor(end / hop))
// visual span = [floor(start * fps / 1000), floor(end * fps / 1000))
// Spans are clipped to the given frame counts. Empty spans are allowed.
inline std::vector<WordSpans> align(const std::vector<WordBoundary>& boundaries, double hop_ms, double fps,
                                    std::size_t audio_frames = SIZE_MAX,
                                    std::size_t visual_frames = SIZE_MAX) {
  std::vector<WordSpans> spans;
  spans.reserve(boundaries.size());
  auto clip = [](double v, std::size_t limit) {
    const auto i = static_cast<std::size_t>(std::floor(v));
    return std::min(i, limit);
  };
  for (std::size_t w = 0; w < boundaries.size(); ++w) {
    const auto& b = boundaries[w];
    if (!std::isfinite(b.start_ms) || !std::isfinite(b.end_ms) || b.start_ms < 0.0 ||
        b.end_ms < b.start_ms) {
      throw AlignmentError("word " + std::to_string(w) + " has an invalid boundary (" +
                           std::to_string(b.start_ms) + " ms, " + std::to_string(b.end_ms) + " ms)");
    }
    WordSpans s;
    s.audio = {clip(b.start_ms / hop_ms, audio_frames), clip(b.end_ms / hop_ms, audio_frames)};
    s.visual = {clip(b.start_ms * fps / 1000.0, visual_frames), clip(b.end_ms * fps / 1000.0, visual_frames)};
    spans.push_back(s);
  }
  return spans;
}

// Raw-frame span to stacked-row span: both ends divided by the stack size
// with floor, matching the half-open convention of align().
inline Span stacked_span(Span raw, std::size_t stack) {
  return {raw.begin / stack, raw.end / stack};
}

inline std::size_t stacked_rows(std::size_t frames, std::size_t stack) {
  return (frames + stack - 1) / stack;
}

// Concatenates non-overlapping groups of `stack` consecutive frames; the last
// partial group is zero-padded.
inline Tensor stack_audio(const Tensor& frames, std::size_t stack = 5) {
  require_matrix(frames, "stack_audio");
  if (frames.rows() == 0) throw DataError("stack_audio: no frames");
  const std::size_t t = frames.rows(), d = frames.cols();
  Tensor out = Tensor::matrix(stacked_rows(t, stack), d * stack);
  for (std::size_t r = 0; r < t; ++r)
    std::copy(frames.row(r).begin(), frames.row(r).end(), out.data() + r * d);
  return out;
}

inline Tensor unstack_audio(const Tensor& stacked, std::size_t stack, std::size_t frames) {
  const std::size_t d = stacked.cols() / stack;
  Tensor out = Tensor::matrix(frames, d);
  std::copy(stacked.data(), stacked.data() + frames * d, out.data());
  return out;
}

inline void validate_example(const MultimodalExample& ex, const AlignmentParams& ap) {
  if (ex.boundaries.size() != ex.tokens.size())
    throw DataError("example '" + ex.id + "': " + std::to_string(ex.tokens.size()) + " tokens but " +
                    std::to_string(ex.boundaries.size()) + " boundaries");
  const double duration = static_cast<double>(ex.audio.rank() == 2 ? ex.audio.rows() : 0) * ap.audio_hop_ms;
  for (std::size_t w = 0; w < ex.boundaries.size(); ++w) {
    const auto& b = ex.boundaries[w];
    if (!(b.start_ms >= 0.0 && b.end_ms >= b.start_ms && b.end_ms <= duration))
      throw DataError("example '" + ex.id + "': word " + std::to_string(w) +
                      " boundary outside [0, clip duration]");
    if (w > 0 && b.start_ms < ex.boundaries[w - 1].end_ms)
      throw DataError("example '" + ex.id + "': word " + std::to_string(w) +
                      " starts before the previous word ends");
  }
  if (ex.emotion_scores) {
    if (ex.emotion_scores->size() != kNumEmotions)
      throw DataError("example '" + ex.id + "': expected " + std::to_string(kNumEmotions) + " emotion scores");
    for (double s : *ex.emotion_scores)
      if (!(s >= 0.0 && s <= 3.0)) throw DataError("example '" + ex.id + "': emotion score outside [0,3]");
  }
}

// ---------------------------------------------------------------------------
// Dataset file: line-delimited JSON.
//   line 1: {"format":"mmt-dataset","version":1}
//   then one record per line:
//   {"id":..., "tokens":[...], "boundaries":[[start_ms,end_ms],...],
//    "audio":{"shape":[T,D],"f64le":"<hex>"}, "visual":{...},
//    "emotions":[6 numbers]   (optional)}
// Payloads are little-endian IEEE-754 doubles, hex encoded.
// ---------------------------------------------------------------------------

inline constexpr int kDatasetVersion = 1;

namespace detail {

inline std::string to_hex(const Tensor& t) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(t.size() * 16);
  for (double v : t.values()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      const auto byte = static_cast<unsigned>((bits >> (8 * b)) & 0xffu);
      out += digits[byte >> 4];
      out += digits[byte & 0xf];
    }
  }
  return out;
}

inline int hex_digit(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

class RecordContext {
 public:
  RecordContext(std::size_t line, std::string id) : line_(line), id_(std::move(id)) {}

  [[noreturn]] void fail(const std::string& field, const std::string& msg) const {
    std::string where = "line " + std::to_string(line_);
    if (!id_.empty()) where += " (record '" + id_ + "')";
    throw DataError(where + ", field " + field + ": " + msg);
  }

  void set_id(std::string id) { id_ = std::move(id); }

 private:
  std::size_t line_;
  std::string id_;
};

inline Tensor tensor_from_json(const nlohmann::json& j, const std::string& field, const RecordContext& ctx) {
  if (!j.is_object()) ctx.fail(field, "expected an object");
  if (!j.contains("shape") || !j["shape"].is_array() || j["shape"].size() != 2)
    ctx.fail(field + ".shape", "expected [rows, cols]");
  Shape shape;
  for (const auto& e : j["shape"]) {
    if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<long long>() >= 0))
      ctx.fail(field + ".shape", "extents must be non-negative integers");
    shape.push_back(e.get<std::size_t>());
  }
  if (!j.contains("f64le") || !j["f64le"].is_string()) ctx.fail(field + ".f64le", "missing payload");
  const auto& hex = j["f64le"].get_ref<const std::string&>();
  const std::size_t n = shape_numel(shape);
  if (hex.size() != n * 16)
    ctx.fail(field + ".f64le", "truncated payload: expected " + std::to_string(n * 16) + " hex digits, got " +
                                   std::to_string(hex.size()));
  Tensor t(shape);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      const int hi = hex_digit(hex[i * 16 + 2 * b]);
      const int lo = hex_digit(hex[i * 16 + 2 * b + 1]);
      if (hi < 0 || lo < 0) ctx.fail(field + ".f64le", "non-hex character in payload");
      bits |= static_cast<std::uint64_t>(hi * 16 + lo) << (8 * b);
    }
    double v;
    std::memcpy(&v, &bits, sizeof v);
    t[i] = v;
  }
  return t;
}

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return {{"shape", t.shape()}, {"f64le", to_hex(t)}};
}

}  // namespace detail

inline std::string example_to_json_line(const MultimodalExample& ex) {
  nlohmann::ordered_json j;
  j["id"] = ex.id;
  j["tokens"] = ex.tokens;
  auto b = nlohmann::ordered_json::array();
  for (const auto& wb : ex.boundaries) b.push_back({wb.start_ms, wb.end_ms});
  j["boundaries"] = b;
  j["audio"] = detail::tensor_to_json(ex.audio);
  j["visual"] = detail::tensor_to_json(ex.visual);
  if (ex.emotion_scores) j["emotions"] = *ex.emotion_scores;
  return j.dump();
}

inline MultimodalExample example_from_json_line(const std::string& line, std::size_t line_no) {
  detail::RecordContext ctx(line_no, "");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    ctx.fail("<record>", std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) ctx.fail("<record>", "expected a JSON object");
  MultimodalExample ex;
  if (!j.contains("id") || !j["id"].is_string()) ctx.fail("id", "missing or not a string");
  ex.id = j["id"].get<std::string>();
  ctx.set_id(ex.id);
  if (!j.contains("tokens") || !j["tokens"].is_array()) ctx.fail("tokens", "missing or not an array");
  for (std::size_t i = 0; i < j["tokens"].size(); ++i) {
    if (!j["tokens"][i].is_string()) ctx.fail("tokens[" + std::to_string(i) + "]", "not a string");
    ex.tokens.push_back(j["tokens"][i].get<std::string>());
  }
  if (!j.contains("boundaries") || !j["boundaries"].is_array())
    ctx.fail("boundaries", "missing or not an array");
  for (std::size_t i = 0; i < j["boundaries"].size(); ++i) {
    const auto& b = j["boundaries"][i];
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number())
      ctx.fail("boundaries[" + std::to_string(i) + "]", "expected [start_ms, end_ms]");
    ex.boundaries.push_back({b[0].get<double>(), b[1].get<double>()});
  }
  if (!j.contains("audio")) ctx.fail("audio", "missing");
  ex.audio = detail::tensor_from_json(j["audio"], "audio", ctx);
  if (!j.contains("visual")) ctx.fail("visual", "missing");
  ex.visual = detail::tensor_from_json(j["visual"], "visual", ctx);
  if (j.contains("emotions")) {
    const auto& e = j["emotions"];
    if (!e.is_array() || e.size() != kNumEmotions)
      ctx.fail("emotions", "expected " + std::to_string(kNumEmotions) + " numbers");
    std::vector<double> scores;
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (!e[i].is_number()) ctx.fail("emotions[" + std::to_string(i) + "]", "not a number");
      scores.push_back(e[i].get<double>());
    }
    ex.emotion_scores = std::move(scores);
  }
  if (ex.boundaries.size() != ex.tokens.size())
    ctx.fail("boundaries", "count differs from tokens");
  return ex;
}

inline std::string dataset_header() {
  return std::string(R"({"format":"mmt-dataset","version":)") + std::to_string(kDatasetVersion) + "}";
}

inline void write_dataset(const std::string& path, const std::vector<MultimodalExample>& examples) {
  std::string out = dataset_header() + "\n";
  for (const auto& ex : examples) {
    out += example_to_json_line(ex);
    out += '\n';
  }
  write_file_atomic(path, out);
}

// An empty file is an empty dataset; otherwise the first line must be the
// versioned header.
inline std::vector<MultimodalExample> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  std::vector<MultimodalExample> out;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (!header_seen) {
      nlohmann::json h;
      try {
        h = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error&) {
        throw DataError(path + ": line 1: malformed header");
      }
      if (!h.is_object() || h.value("format", "") != "mmt-dataset")
        throw DataError(path + ": line " + std::to_string(line_no) + ": missing dataset header");
      if (h.value("version", -1) != kDatasetVersion)
        throw DataError(path + ": unsupported dataset version");
      header_seen = true;
      continue;
    }
    out.push_back(example_from_json_line(line, line_no));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary and embeddings
// ---------------------------------------------------------------------------

struct Vocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;
  Tensor embeddings;                   // [|V| x embedding_dim]
  std::vector<std::uint64_t> counts;   // unigram counts from resolved data

  std::size_t size() const { return tokens.size(); }
  std::size_t dim() const { return embeddings.rank() == 2 ? embeddings.cols() : 0; }
  int id(const std::string& token) const {
    auto it = index.find(token);
    return it == index.end() ? -1 : it->second;
  }
};

struct EmbeddingLoadReport {
  std::size_t lines = 0;
  std::size_t duplicates = 0;
};

// Text format: one token per line followed by space-separated floats.
// Duplicate tokens keep their first id and take the last row seen.
inline Vocabulary parse_embeddings(std::istream& in, const std::string& source,
                                   EmbeddingLoadReport* report = nullptr) {
  Vocabulary v;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0, dim = 0;
  EmbeddingLoadReport rep;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string token;
    ls >> token;
    std::vector<double> row;
    std::string num;
    while (ls >> num) {
      double x;
      auto res = std::from_chars(num.data(), num.data() + num.size(), x);
      if (res.ec != std::errc() || res.ptr != num.data() + num.size())
        throw DataError(source + ": line " + std::to_string(line_no) + ": bad number '" + num + "'");
      row.push_back(x);
    }
    if (row.empty()) throw DataError(source + ": line " + std::to_string(line_no) + ": no values");
    if (dim == 0) dim = row.size();
    if (row.size() != dim)
      throw DataError(source + ": line " + std::to_string(line_no) + ": dimension " +
                      std::to_string(row.size()) + " differs from " + std::to_string(dim));
    ++rep.lines;
    auto it = v.index.find(token);
    if (it != v.index.end()) {
      ++rep.duplicates;
      log().warn("{}: duplicate token '{}' on line {}; last occurrence wins", source, token, line_no);
      rows[static_cast<std::size_t>(it->second)] = std::move(row);
      continue;
    }
    v.index.emplace(token, static_cast<int>(v.tokens.size()));
    v.tokens.push_back(token);
    rows.push_back(std::move(row));
  }
  v.embeddings = Tensor::matrix(rows.size(), dim);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(rows[r].begin(), rows[r].end(), v.embeddings.data() + r * dim);
  v.counts.assign(v.tokens.size(), 0);
  if (report) *report = rep;
  return v;
}

inline Vocabulary load_embeddings(const std::string& path, EmbeddingLoadReport* report = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embeddings '" + path + "'");
  return parse_embeddings(in, path, report);
}

inline void write_embeddings(const std::string& path, const Vocabulary& v) {
  std::string out;
  for (std::size_t r = 0; r < v.size(); ++r) {
    out += v.tokens[r];
    for (double x : v.embeddings.row(r)) {
      out += ' ';
      out += detail::format_double(x);
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

struct OovReport {
  std::size_t dropped_tokens = 0;
  std::size_t dropped_examples = 0;
};

// Maps tokens to ids, deleting out-of-vocabulary tokens together with their
// boundaries. Examples left without words are removed. Updates unigram counts.
inline OovReport resolve_tokens(std::vector<MultimodalExample>& examples, Vocabulary& vocab) {
  OovReport rep;
  std::vector<MultimodalExample> kept;
  kept.reserve(examples.size());
  for (auto& ex : examples) {
    MultimodalExample r = std::move(ex);
    std::vector<std::string> toks;
    std::vector<WordBoundary> bounds;
    r.word_ids.clear();
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      const int id = vocab.id(r.tokens[i]);
      if (id < 0) {
        ++rep.dropped_tokens;
        continue;
      }
      toks.push_back(r.tokens[i]);
      bounds.push_back(r.boundaries.at(i));
      r.word_ids.push_back(id);
      ++vocab.counts[static_cast<std::size_t>(id)];
    }
    r.tokens = std::move(toks);
    r.boundaries = std::move(bounds);
    if (r.tokens.empty()) {
      ++rep.dropped_examples;
      continue;
    }
    kept.push_back(std::move(r));
  }
  examples = std::move(kept);
  if (rep.dropped_tokens)
    log().info("dropped {} out-of-vocabulary tokens, {} examples left empty", rep.dropped_tokens,
               rep.dropped_examples);
  return rep;
}

// Model-ready view of one resolved example.
struct PreparedExample {
  std::string id;
  ModelInput input;
  std::vector<int> word_ids;
  std::vector<WordSpans> spans;  // audio spans index stacked rows
  std::optional<std::vector<double>> emotion_scores;
};

inline PreparedExample prepare_example(const MultimodalExample& ex, const Vocabulary& vocab,
                                       const ModelConfig& config) {
  const AlignmentParams ap = AlignmentParams::from(config);
  if (ex.word_ids.size() != ex.tokens.size())
    throw DataError("example '" + ex.id + "': tokens are not resolved against the vocabulary");
  if (ex.tokens.empty()) throw DataError("example '" + ex.id + "': no words");
  validate_example(ex, ap);
  PreparedExample p;
  p.id = ex.id;
  p.word_ids = ex.word_ids;
  p.emotion_scores = ex.emotion_scores;
  p.input.audio = stack_audio(ex.audio, ap.audio_stack);
  p.input.visual = ex.visual;
  const std::size_t e = vocab.dim();
  p.input.text = Tensor::matrix(ex.word_ids.size(), e);
  for (std::size_t i = 0; i < ex.word_ids.size(); ++i) {
    auto row = vocab.embeddings.row(static_cast<std::size_t>(ex.word_ids[i]));
    std::copy(row.begin(), row.end(), p.input.text.data() + i * e);
  }
  p.spans = align(ex.boundaries, ap.audio_hop_ms, ap.visual_fps, ex.audio.rows(), ex.visual.rows());
  for (auto& s : p.spans) s.audio = stacked_span(s.audio, ap.audio_stack);
  return p;
}

inline std::vector<PreparedExample> prepare_all(const std::vector<MultimodalExample>& examples,
                                                const Vocabulary& vocab, const ModelConfig& config) {
  std::vector<PreparedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(prepare_example(ex, vocab, config));
  return out;
}

}  // namespace mmt
