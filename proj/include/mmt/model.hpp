// SPDX-License-Identifier: Apache-2.0
//
// Cross-modal transformer with text as the anchor modality.
//
//   per modality:  F = input projection + sinusoidal position table
//                  S = N self-attention encoder layers
//   cross-modal:   E_{A->T}, E_{V->T}: queries from the text stream, keys and
//                  values from S_A / S_V; output length is the text length
//   fusion:        E = w1 * S_T + w2 * E_{A->T} + w3 * E_{V->T}
//   heads:         masked-LM (per position, d -> vocab) or emotion
//                  (mean pool, d -> num_emotions, sigmoid)
#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/config.hpp"
#include "mmt/errors.hpp"
#include "mmt/tensor.hpp"
#include "mmt/weights.hpp"

namespace mmt {

// Feature matrices for one utterance, ready for the model: audio already
// stacked, text already looked up in the embedding table.
struct ModelInput {
  Tensor audio;   // [L_A x audio_input_dim]
  Tensor visual;  // [L_V x visual_input_dim]
  Tensor text;    // [L_T x text_embedding_dim]
};

struct EncodedSequence {
  Var values;  // [seq_len x d]
  Modality modality = Modality::Text;

  std::size_t seq_len() const { return values.value().rows(); }
  std::size_t width() const { return values.value().cols(); }
};

// Per-forward settings. A non-null rng enables dropout (training only).
struct ForwardContext {
  const ModelConfig& config;
  std::mt19937_64* dropout_rng = nullptr;
};

// Sinusoidal table: row p, column 2i -> sin(p / 10000^(2i/d)),
// column 2i+1 -> cos(p / 10000^(2i/d)).
inline Tensor positional_table(std::size_t length, std::size_t d) {
  Tensor t = Tensor::matrix(length, d);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t j = 0; j < d; ++j) {
      const double expo = static_cast<double>(j - j % 2) / static_cast<double>(d);
      const double angle = static_cast<double>(p) / std::pow(10000.0, expo);
      t.at(p, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return t;
}

struct EmbeddedInputs {
  Var audio;
  Var visual;
  Var text;
};

inline Var embed_one(ParamBinder& bind, const Tensor& features, Modality m, std::size_t expected_dim,
                     const ModelConfig& config) {
  if (features.rank() != 2 || features.cols() != expected_dim) {
    throw ConfigError(std::string(modality_name(m)) + " features have shape " +
                      shape_str(features.shape()) + " but the model expects width " +
                      std::to_string(expected_dim));
  }
  if (features.rows() == 0)
    throw DataError(std::string(modality_name(m)) + " sequence is empty");
  Graph& g = bind.graph();
  const std::string prefix = keys::input(m);
  Var x = g.constant(features);
  Var projected = linear(x, bind(prefix + ".weight"), bind(prefix + ".bias"));
  if (!config.positional_embeddings) return projected;
  return add(projected, g.constant(positional_table(features.rows(), config.model_dim)));
}

inline EmbeddedInputs embed_inputs(ParamBinder& bind, const ModelInput& in, const ModelConfig& config) {
  return {embed_one(bind, in.audio, Modality::Audio, config.audio_input_dim, config),
          embed_one(bind, in.visual, Modality::Visual, config.visual_input_dim, config),
          embed_one(bind, in.text, Modality::Text, config.text_embedding_dim, config)};
}

struct QKV {
  Var q, k, v;
};

// Three independent linear maps. `kv_source` defaults to `query_source`
// (self-attention); cross-modal blocks pass the source encoding.
inline QKV project_qkv(ParamBinder& bind, const std::string& prefix, Var query_source,
                       std::optional<Var> kv_source = std::nullopt) {
  const Var kv = kv_source.value_or(query_source);
  return {linear(query_source, bind(prefix + ".q.weight"), bind(prefix + ".q.bias")),
          linear(kv, bind(prefix + ".k.weight"), bind(prefix + ".k.bias")),
          linear(kv, bind(prefix + ".v.weight"), bind(prefix + ".v.bias"))};
}

// softmax(Q K^T / sqrt(head_dim)) V with Q: [Lq x h], K, V: [Lkv x h].
inline Var scaled_attention(Var q, Var k, Var v, std::size_t head_dim) {
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (kv.rank() != 2 || vv.rank() != 2 || kv.rows() != vv.rows()) {
    throw DimensionError("scaled_attention: key " + shape_str(kv.shape()) + " and value " +
                         shape_str(vv.shape()) + " lengths differ");
  }
  if (q.value().cols() != kv.cols())
    throw DimensionError("scaled_attention: query width differs from key width");
  Var logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  return matmul(softmax(logits, 1), v);
}

// Splits Q, K, V into `heads` column slices, attends per slice with divisor
// sqrt(d / heads), concatenates and applies the output projection.
inline Var multi_head_attention(ParamBinder& bind, const std::string& prefix, Var q, Var k, Var v,
                                std::size_t heads) {
  const std::size_t d = q.value().cols();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("multi_head_attention: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t hd = d / heads;
  Var merged;
  if (heads == 1) {
    merged = scaled_attention(q, k, v, hd);
  } else {
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      outs.push_back(scaled_attention(slice_cols(q, h * hd, (h + 1) * hd),
                                      slice_cols(k, h * hd, (h + 1) * hd),
                                      slice_cols(v, h * hd, (h + 1) * hd), hd));
    }
    merged = concat_cols(outs);
  }
  return linear(merged, bind(prefix + ".out.weight"), bind(prefix + ".out.bias"));
}

inline Var maybe_dropout(Var x, const ForwardContext& ctx) {
  if (ctx.dropout_rng && ctx.config.dropout > 0.0) return dropout(x, ctx.config.dropout, *ctx.dropout_rng);
  return x;
}

// One encoder block:
//   A = MHA(Q, K, V)
//   O = LayerNorm(V + A)            (self-attention, residual from the value projection)
//   O = LayerNorm(X + A)            (cross-modal, or when residual_from_value is off)
//   S = LayerNorm(O + FF(O)),  FF = linear(d->ff), ReLU, linear(ff->d)
// With `source` set, K and V are projected from the source sequence.
inline Var encoder_layer(ParamBinder& bind, const std::string& prefix, Var input,
                         std::optional<Var> source, const ForwardContext& ctx) {
  const ModelConfig& c = ctx.config;
  QKV qkv = project_qkv(bind, prefix, input, source);
  Var attended = maybe_dropout(multi_head_attention(bind, prefix, qkv.q, qkv.k, qkv.v, c.attention_heads), ctx);
  const Var residual = (!source && c.residual_from_value) ? qkv.v : input;
  Var o = layer_norm(add(residual, attended), bind(prefix + ".ln1.gain"), bind(prefix + ".ln1.bias"),
                     c.layer_norm_eps);
  Var hidden = relu(linear(o, bind(prefix + ".ff1.weight"), bind(prefix + ".ff1.bias")));
  Var ff = maybe_dropout(linear(hidden, bind(prefix + ".ff2.weight"), bind(prefix + ".ff2.bias")), ctx);
  return layer_norm(add(o, ff), bind(prefix + ".ln2.gain"), bind(prefix + ".ln2.bias"), c.layer_norm_eps);
}

inline EncodedSequence unimodal_encode(ParamBinder& bind, Var features, Modality m,
                                       const ForwardContext& ctx) {
  Var x = features;
  for (std::size_t l = 0; l < ctx.config.encoder_layers; ++l)
    x = encoder_layer(bind, keys::encoder(m, l), x, std::nullopt, ctx);
  return {x, m};
}

// Queries come from the evolving anchor stream (initialised with the text
// encoding); every layer draws keys and values from the same source encoding.
inline EncodedSequence cross_modal_encode(ParamBinder& bind, const EncodedSequence& source,
                                          const EncodedSequence& anchor, const ForwardContext& ctx) {
  if (anchor.modality != Modality::Text)
    throw UnsupportedError("cross_modal_encode: only text is supported as the anchor modality");
  if (source.modality == Modality::Text)
    throw UnsupportedError("cross_modal_encode: source must be audio or visual");
  Var x = anchor.values;
  for (std::size_t l = 0; l < ctx.config.encoder_layers; ++l)
    x = encoder_layer(bind, keys::cross(source.modality, l), x, source.values, ctx);
  return {x, Modality::Text};
}

inline EncodedSequence fuse(const EncodedSequence& text, const EncodedSequence& audio_to_text,
                            const EncodedSequence& visual_to_text, const ModelConfig& config) {
  const Shape& s = text.values.shape();
  if (audio_to_text.values.shape() != s || visual_to_text.values.shape() != s) {
    throw DimensionError("fuse: anchor contract broken, shapes " + shape_str(s) + ", " +
                         shape_str(audio_to_text.values.shape()) + ", " +
                         shape_str(visual_to_text.values.shape()));
  }
  const auto& w = config.fusion_weights;
  Var out = add(add(scale(text.values, w[0]), scale(audio_to_text.values, w[1])),
                scale(visual_to_text.values, w[2]));
  return {out, Modality::Text};
}

// Per-position vocabulary logits [L_T x vocab].
inline Var mlm_head(ParamBinder& bind, const EncodedSequence& fused) {
  return linear(fused.values, bind(keys::mlm_head + ".weight"), bind(keys::mlm_head + ".bias"));
}

// Mean over positions, linear to num_emotions, sigmoid. Shape [num_emotions].
inline Var emotion_head(ParamBinder& bind, const EncodedSequence& fused) {
  Var pooled = reshape(mean_over_axis(fused.values, 0), {1, fused.width()});
  Var logits = linear(pooled, bind(keys::emotion_head + ".weight"), bind(keys::emotion_head + ".bias"));
  return reshape(sigmoid(logits), {logits.value().cols()});
}

struct EncoderOutputs {
  EncodedSequence audio, visual, text;
  EncodedSequence audio_to_text, visual_to_text;
  EncodedSequence fused;
};

// Full trunk up to (and including) fusion.
inline EncoderOutputs encode(ParamBinder& bind, const ModelInput& in, const ForwardContext& ctx) {
  EmbeddedInputs e = embed_inputs(bind, in, ctx.config);
  EncoderOutputs out;
  out.audio = unimodal_encode(bind, e.audio, Modality::Audio, ctx);
  out.visual = unimodal_encode(bind, e.visual, Modality::Visual, ctx);
  out.text = unimodal_encode(bind, e.text, Modality::Text, ctx);
  out.audio_to_text = cross_modal_encode(bind, out.audio, out.text, ctx);
  out.visual_to_text = cross_modal_encode(bind, out.visual, out.text, ctx);
  out.fused = fuse(out.text, out.audio_to_text, out.visual_to_text, ctx.config);
  if (ctx.config.inject_backward_fault) out.fused.values = faulty_identity(out.fused.values, 1.5);
  return out;
}

// Convenience: forward only, values copied out of a throwaway graph.
inline Tensor predict_mlm_logits(const ModelWeights& w, const ModelInput& in, const ModelConfig& c) {
  Graph g;
  ParamBinder bind(g, w, false);
  ForwardContext ctx{c};
  return mlm_head(bind, encode(bind, in, ctx).fused).value();
}

inline Tensor predict_emotions(const ModelWeights& w, const ModelInput& in, const ModelConfig& c) {
  Graph g;
  ParamBinder bind(g, w, false);
  ForwardContext ctx{c};
  return emotion_head(bind, encode(bind, in, ctx).fused).value();
}

}  // namespace mmt
