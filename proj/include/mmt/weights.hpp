// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/config.hpp"
#include "mmt/errors.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

enum class Modality { Audio, Visual, Text };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::Audio: return "audio";
    case Modality::Visual: return "visual";
    case Modality::Text: return "text";
  }
  return "?";
}

// Every learnable tensor, keyed by a stable dotted name. Iteration order is
// the lexicographic key order, which fixes the checkpoint layout.
class ModelWeights {
 public:
  using Map = std::map<std::string, Tensor>;

  bool contains(const std::string& key) const { return params_.count(key) != 0; }

  const Tensor& at(const std::string& key) const {
    auto it = params_.find(key);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + key + "'");
    return it->second;
  }
  Tensor& at(const std::string& key) {
    auto it = params_.find(key);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + key + "'");
    return it->second;
  }

  void set(const std::string& key, Tensor t) { params_[key] = std::move(t); }
  void erase(const std::string& key) { params_.erase(key); }

  const Map& params() const { return params_; }
  Map& params() { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, t] : params_) n += t.size();
    return n;
  }

  friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
    return a.params_ == b.params_;
  }

 private:
  Map params_;
};

// Gradient accumulator with the same keys as the weights it belongs to.
using Gradients = std::map<std::string, Tensor>;

namespace keys {

inline std::string input(Modality m) { return std::string("input.") + modality_name(m); }

inline std::string encoder(Modality m, std::size_t layer) {
  return std::string("encoder.") + modality_name(m) + "." + std::to_string(layer);
}

inline std::string cross(Modality source, std::size_t layer) {
  return std::string("cross.") + modality_name(source) + "_to_text." + std::to_string(layer);
}

inline const std::string mlm_head = "head.mlm";
inline const std::string emotion_head = "head.emotion";

}  // namespace keys

namespace detail {

inline Tensor xavier(std::size_t in, std::size_t out, double gain, std::mt19937_64& rng) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::matrix(in, out);
  for (double& v : t.storage()) v = dist(rng);
  return t;
}

inline void add_linear(ModelWeights& w, const std::string& prefix, std::size_t in,
                       std::size_t out, double gain, std::mt19937_64& rng) {
  w.set(prefix + ".weight", xavier(in, out, gain, rng));
  w.set(prefix + ".bias", Tensor({out}));
}

inline void add_norm(ModelWeights& w, const std::string& prefix, std::size_t d) {
  w.set(prefix + ".gain", Tensor({d}, 1.0));
  w.set(prefix + ".bias", Tensor({d}));
}

inline void add_block(ModelWeights& w, const std::string& prefix, const ModelConfig& c,
                      std::mt19937_64& rng) {
  const std::size_t d = c.model_dim;
  for (const char* p : {"q", "k", "v", "out"}) add_linear(w, prefix + "." + p, d, d, c.init_gain, rng);
  add_norm(w, prefix + ".ln1", d);
  add_linear(w, prefix + ".ff1", d, c.feedforward_dim, c.init_gain, rng);
  add_linear(w, prefix + ".ff2", c.feedforward_dim, d, c.init_gain, rng);
  add_norm(w, prefix + ".ln2", d);
}

}  // namespace detail

// Fresh emotion head (d -> num_emotions), replacing any existing one.
inline void init_emotion_head(ModelWeights& w, const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
  detail::add_linear(w, keys::emotion_head, c.model_dim, c.num_emotions, c.init_gain, rng);
}

// Xavier-uniform matrices, zero biases, unit norm gains. Deterministic in seed.
inline ModelWeights init_weights(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  std::mt19937_64 rng(seed);
  ModelWeights w;
  detail::add_linear(w, keys::input(Modality::Audio), c.audio_input_dim, c.model_dim, c.init_gain, rng);
  detail::add_linear(w, keys::input(Modality::Visual), c.visual_input_dim, c.model_dim, c.init_gain, rng);
  detail::add_linear(w, keys::input(Modality::Text), c.text_embedding_dim, c.model_dim, c.init_gain, rng);
  for (Modality m : {Modality::Audio, Modality::Visual, Modality::Text})
    for (std::size_t l = 0; l < c.encoder_layers; ++l) detail::add_block(w, keys::encoder(m, l), c, rng);
  for (Modality m : {Modality::Audio, Modality::Visual})
    for (std::size_t l = 0; l < c.encoder_layers; ++l) detail::add_block(w, keys::cross(m, l), c, rng);
  detail::add_linear(w, keys::mlm_head, c.model_dim, c.vocab_size, c.init_gain, rng);
  init_emotion_head(w, c, seed);
  return w;
}

// Binds ModelWeights into one Graph: each parameter becomes a leaf on first
// use and is reused afterwards.
class ParamBinder {
 public:
  ParamBinder(Graph& graph, const ModelWeights& weights, bool track_grad = true)
      : graph_(graph), weights_(weights), track_grad_(track_grad) {}

  Var operator()(const std::string& key) {
    auto it = bound_.find(key);
    if (it != bound_.end()) return it->second;
    Var v = graph_.parameter(weights_.at(key), track_grad_);
    bound_.emplace(key, v);
    return v;
  }

  Graph& graph() { return graph_; }

  // Adds d(root)/d(param) for every parameter used in the graph into `out`.
  void accumulate_grads(Gradients& out) {
    for (auto& [key, var] : bound_) {
      Tensor& g = graph_.grad(var);
      auto [it, inserted] = out.try_emplace(key, g);
      if (!inserted) detail::add_into(it->second, g);
    }
  }

 private:
  Graph& graph_;
  const ModelWeights& weights_;
  bool track_grad_;
  std::unordered_map<std::string, Var> bound_;
};

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   magic      8 bytes  "MMTCKPT\0"
//   version    u32      kCheckpointVersion
//   config     u32 length + UTF-8 "key = value" text
//   count      u32      number of tensors
//   per tensor u32 key length, key bytes, u32 rank, u64 extents[rank],
//              f64 payload[numel]
//
// All integers and floats are little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'M', 'T', 'C', 'K', 'P', 'T', '\0'};

struct Checkpoint {
  ModelConfig config;
  ModelWeights weights;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string source) : data_(data), source_(std::move(source)) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
  }

  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n)
      throw DataError(source_ + ": truncated checkpoint while reading " + what);
  }

  std::string_view data_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ModelConfig& config, const ModelWeights& weights) {
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = config_to_text(config);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(weights.size()));
  for (const auto& [key, t] : weights.params()) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(key.size()));
    out += key;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_le<std::uint64_t>(out, e);
    for (double v : t.values()) detail::put_le<double>(out, v);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& source = "checkpoint") {
  detail::ByteReader r(bytes, source);
  if (r.bytes(8, "magic") != std::string_view(kCheckpointMagic, 8))
    throw DataError(source + ": not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw VersionError(source + ": checkpoint version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  const auto cfg_len = r.get<std::uint32_t>("config length");
  ck.config = config_from_text(r.bytes(cfg_len, "config"));
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto klen = r.get<std::uint32_t>("key length");
    std::string key(r.bytes(klen, "key"));
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.get<std::uint64_t>("extent"));
    Tensor t(shape);
    for (double& v : t.storage()) v = r.get<double>("payload");
    ck.weights.set(key, std::move(t));
  }
  if (!r.done()) throw DataError(source + ": trailing bytes after checkpoint payload");
  return ck;
}

inline void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const std::string& path, const ModelConfig& config,
                            const ModelWeights& weights) {
  write_file_atomic(path, serialize_checkpoint(config, weights));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path), path);
}

}  // namespace mmt
