// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmt/errors.hpp"

namespace mmt {

// Every architectural and training hyperparameter. Defaults are the full-scale
// values; `desk()` returns the small configuration used for synthetic data.
struct ModelConfig {
  // architecture
  std::size_t model_dim = 512;
  std::size_t encoder_layers = 4;
  std::size_t attention_heads = 4;
  std::size_t feedforward_dim = 200;
  std::size_t audio_input_dim = 200;  // after stacking
  std::size_t visual_input_dim = 4096;
  std::size_t text_embedding_dim = 300;
  std::size_t vocab_size = 88000;
  std::size_t num_emotions = 6;
  std::array<double, 3> fusion_weights{0.33, 0.33, 0.33};
  double layer_norm_eps = 1e-5;
  bool residual_from_value = true;
  bool positional_embeddings = true;

  // features
  std::size_t audio_stack = 5;
  double audio_hop_ms = 10.0;
  double visual_fps = 25.0;

  // training
  double mask_fraction = 0.15;
  double dropout = 0.0;
  std::size_t noise_samples = 64;
  std::size_t batch_size = 16;
  double lr_scale = 1.0;
  std::size_t warmup_steps = 4000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double grad_clip = 0.0;  // global L2 norm; 0 disables
  double init_gain = 1.0;

  // Negative-control switch for the gradient checker: corrupts one backward
  // rule without touching the forward pass.
  bool inject_backward_fault = false;

  std::size_t head_dim() const { return model_dim / attention_heads; }

  static ModelConfig desk() {
    ModelConfig c;
    c.model_dim = 16;
    c.encoder_layers = 1;
    c.attention_heads = 2;
    c.feedforward_dim = 32;
    c.audio_input_dim = 40;
    c.visual_input_dim = 16;
    c.text_embedding_dim = 16;
    c.vocab_size = 64;
    c.batch_size = 16;
    c.warmup_steps = 200;
    c.lr_scale = 1.0;
    return c;
  }

  // Small configuration used by the gradient checker.
  static ModelConfig toy() {
    ModelConfig c = desk();
    c.model_dim = 8;
    c.attention_heads = 2;
    c.encoder_layers = 1;
    c.feedforward_dim = 4;
    c.audio_input_dim = 10;
    c.visual_input_dim = 6;
    c.text_embedding_dim = 5;
    c.vocab_size = 12;
    c.noise_samples = 5;
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid config: " + m); };
    if (model_dim == 0) fail("model_dim must be positive");
    if (attention_heads == 0 || model_dim % attention_heads != 0)
      fail("model_dim (" + std::to_string(model_dim) + ") must be divisible by attention_heads (" +
           std::to_string(attention_heads) + ")");
    if (feedforward_dim == 0) fail("feedforward_dim must be positive");
    if (audio_input_dim == 0 || visual_input_dim == 0 || text_embedding_dim == 0)
      fail("input dims must be positive");
    if (vocab_size == 0) fail("vocab_size must be positive");
    if (num_emotions == 0) fail("num_emotions must be positive");
    if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) fail("mask_fraction must be in (0,1)");
    for (double w : fusion_weights)
      if (!(w >= 0.0)) fail("fusion weights must be non-negative");
    if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0,1)");
    if (noise_samples == 0) fail("noise_samples must be >= 1");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (warmup_steps == 0) fail("warmup_steps must be >= 1");
    if (!(lr_scale > 0.0)) fail("lr_scale must be positive");
    if (audio_stack == 0) fail("audio_stack must be >= 1");
    if (!(audio_hop_ms > 0.0) || !(visual_fps > 0.0)) fail("hop and fps must be positive");
    if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& key) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("config key '" + key + "': expected a number, got '" + std::string(s) + "'");
  return v;
}

inline std::size_t parse_size(std::string_view s, const std::string& key) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" +
                      std::string(s) + "'");
  return static_cast<std::size_t>(v);
}

inline bool parse_bool(std::string_view s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + std::string(s) + "'");
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

struct ConfigField {
  const char* name;
  bool architectural;
  std::function<std::string(const ModelConfig&)> get;
  std::function<void(ModelConfig&, std::string_view)> set;
};

#define MMT_SIZE_FIELD(field, arch)                                                       \
  ConfigField {                                                                           \
    #field, arch, [](const ModelConfig& c) { return std::to_string(c.field); },           \
        [](ModelConfig& c, std::string_view v) { c.field = parse_size(v, #field); }       \
  }
#define MMT_DOUBLE_FIELD(field, arch)                                                     \
  ConfigField {                                                                           \
    #field, arch, [](const ModelConfig& c) { return format_double(c.field); },            \
        [](ModelConfig& c, std::string_view v) { c.field = parse_double(v, #field); }     \
  }
#define MMT_BOOL_FIELD(field, arch)                                                       \
  ConfigField {                                                                           \
    #field, arch, [](const ModelConfig& c) { return std::string(c.field ? "true" : "false"); }, \
        [](ModelConfig& c, std::string_view v) { c.field = parse_bool(v, #field); }       \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      MMT_SIZE_FIELD(model_dim, true),
      MMT_SIZE_FIELD(encoder_layers, true),
      MMT_SIZE_FIELD(attention_heads, true),
      MMT_SIZE_FIELD(feedforward_dim, true),
      MMT_SIZE_FIELD(audio_input_dim, true),
      MMT_SIZE_FIELD(visual_input_dim, true),
      MMT_SIZE_FIELD(text_embedding_dim, true),
      MMT_SIZE_FIELD(vocab_size, true),
      MMT_SIZE_FIELD(num_emotions, true),
      ConfigField{"fusion_weights", true,
                  [](const ModelConfig& c) {
                    return format_double(c.fusion_weights[0]) + "," +
                           format_double(c.fusion_weights[1]) + "," +
                           format_double(c.fusion_weights[2]);
                  },
                  [](ModelConfig& c, std::string_view v) {
                    std::array<double, 3> w{};
                    for (std::size_t i = 0; i < 3; ++i) {
                      const auto comma = v.find(',');
                      if ((i < 2) != (comma != std::string_view::npos))
                        throw ConfigError("config key 'fusion_weights': expected three comma-separated numbers");
                      w[i] = parse_double(trim(v.substr(0, comma)), "fusion_weights");
                      if (i < 2) v.remove_prefix(comma + 1);
                    }
                    c.fusion_weights = w;
                  }},
      MMT_DOUBLE_FIELD(layer_norm_eps, true),
      MMT_BOOL_FIELD(residual_from_value, true),
      MMT_BOOL_FIELD(positional_embeddings, true),
      MMT_SIZE_FIELD(audio_stack, true),
      MMT_DOUBLE_FIELD(audio_hop_ms, true),
      MMT_DOUBLE_FIELD(visual_fps, true),
      MMT_DOUBLE_FIELD(mask_fraction, false),
      MMT_DOUBLE_FIELD(dropout, false),
      MMT_SIZE_FIELD(noise_samples, false),
      MMT_SIZE_FIELD(batch_size, false),
      MMT_DOUBLE_FIELD(lr_scale, false),
      MMT_SIZE_FIELD(warmup_steps, false),
      MMT_DOUBLE_FIELD(adam_beta1, false),
      MMT_DOUBLE_FIELD(adam_beta2, false),
      MMT_DOUBLE_FIELD(adam_eps, false),
      MMT_DOUBLE_FIELD(grad_clip, false),
      MMT_DOUBLE_FIELD(init_gain, false),
      MMT_BOOL_FIELD(inject_backward_fault, false),
  };
  return fields;
}

#undef MMT_SIZE_FIELD
#undef MMT_DOUBLE_FIELD
#undef MMT_BOOL_FIELD

}  // namespace detail

// "key = value" lines in a fixed order; doubles use shortest round-trip form.
inline std::string config_to_text(const ModelConfig& c) {
  std::string out;
  for (const auto& f : detail::config_fields()) {
    out += f.name;
    out += " = ";
    out += f.get(c);
    out += '\n';
  }
  return out;
}

inline void apply_config_entry(ModelConfig& c, const std::string& key, std::string_view value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.name) {
      f.set(c, detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

// Parses "key = value" lines. Blank lines and lines starting with '#' are
// ignored; keys are checked against the known field set.
inline ConfigEntries parse_config_entries(std::string_view text) {
  ConfigEntries out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = detail::trim(text.substr(0, nl));
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    std::string key(detail::trim(line.substr(0, eq)));
    const auto& fields = detail::config_fields();
    if (std::none_of(fields.begin(), fields.end(), [&](const auto& f) { return key == f.name; }))
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown config key '" + key + "'");
    out.emplace_back(std::move(key), std::string(detail::trim(line.substr(eq + 1))));
  }
  return out;
}

inline ModelConfig apply_config_entries(const ConfigEntries& entries, ModelConfig base = {}) {
  for (const auto& [k, v] : entries) apply_config_entry(base, k, v);
  return base;
}

// Applies every "key = value" line of `text` on top of `base`.
inline ModelConfig config_from_text(std::string_view text, ModelConfig base = {}) {
  return apply_config_entries(parse_config_entries(text), std::move(base));
}

inline std::string read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ModelConfig load_config_file(const std::string& path, ModelConfig base = {}) {
  return config_from_text(read_config_file(path), std::move(base));
}

// Names of architectural fields whose values differ between the two configs.
inline std::vector<std::string> architecture_differences(const ModelConfig& a, const ModelConfig& b) {
  std::vector<std::string> diffs;
  for (const auto& f : detail::config_fields()) {
    if (!f.architectural) continue;
    const std::string va = f.get(a), vb = f.get(b);
    if (va != vb) diffs.push_back(std::string(f.name) + " (" + va + " vs " + vb + ")");
  }
  return diffs;
}

}  // namespace mmt
