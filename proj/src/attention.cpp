#include "d2sdk/attention.hpp"

#include "d2sdk/errors.hpp"

#include <cmath>

namespace d2sdk {

MhaParams MhaParams::init(Rng& rng, Index d, int num_heads, bool qkv_bias) {
  if (num_heads <= 0 || d % num_heads != 0) {
    throw ConfigError("mha: model width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(num_heads) + " heads");
  }
  MhaParams p;
  p.q = Linear::init(rng, d, d, qkv_bias);
  p.k = Linear::init(rng, d, d, qkv_bias);
  p.v = Linear::init(rng, d, d, qkv_bias);
  p.o = Linear::init(rng, d, d, true);
  p.num_heads = num_heads;
  return p;
}

void MhaParams::collect(ParamList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

EncoderLayerParams EncoderLayerParams::init(Rng& rng, Index d, Index d_ff, int num_heads, bool qkv_bias) {
  EncoderLayerParams p;
  p.self_attn = MhaParams::init(rng, d, num_heads, qkv_bias);
  p.mlp = MlpParams::init(rng, d, d_ff);
  p.ln1 = LayerNormParams::init(d);
  p.ln2 = LayerNormParams::init(d);
  return p;
}

void EncoderLayerParams::collect(ParamList& out, const std::string& prefix) const {
  self_attn.collect(out, prefix + ".self_attn");
  mlp.collect(out, prefix + ".mlp");
  ln1.collect(out, prefix + ".ln1");
  ln2.collect(out, prefix + ".ln2");
}

DecoderLayerParams DecoderLayerParams::init(Rng& rng, Index d, Index d_ff, int num_heads, bool qkv_bias) {
  DecoderLayerParams p;
  p.self_attn = MhaParams::init(rng, d, num_heads, qkv_bias);
  p.cross_attn = MhaParams::init(rng, d, num_heads, qkv_bias);
  p.mlp = MlpParams::init(rng, d, d_ff);
  p.ln1 = LayerNormParams::init(d);
  p.ln2 = LayerNormParams::init(d);
  p.ln3 = LayerNormParams::init(d);
  return p;
}

void DecoderLayerParams::collect(ParamList& out, const std::string& prefix) const {
  self_attn.collect(out, prefix + ".self_attn");
  cross_attn.collect(out, prefix + ".cross_attn");
  mlp.collect(out, prefix + ".mlp");
  ln1.collect(out, prefix + ".ln1");
  ln2.collect(out, prefix + ".ln2");
  ln3.collect(out, prefix + ".ln3");
}

Tensor attention_weights(Tape& tape, const Tensor& queries, const Tensor& keys, Index groups) {
  if (queries.cols() != keys.cols()) {
    throw DimensionError("sdp_attention: query width " + shape_str(queries.shape()) +
                         " differs from key width " + shape_str(keys.shape()));
  }
  const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(queries.cols()));
  return softmax(tape, group_scores(tape, queries, keys, groups, inv_sqrt), 1);
}

Tensor sdp_attention(Tape& tape, const Tensor& queries, const Tensor& keys, const Tensor& values,
                     Index groups) {
  if (keys.rows() != values.rows()) {
    throw DimensionError("sdp_attention: keys " + shape_str(keys.shape()) + " and values " +
                         shape_str(values.shape()) + " differ in row count");
  }
  return group_mix(tape, attention_weights(tape, queries, keys, groups), values, groups);
}

Tensor mha(Tape& tape, const Tensor& query_seq, const Tensor& key_seq, const Tensor& value_seq,
           const MhaParams& p, Index groups) {
  const Index d = p.dim();
  if (p.num_heads <= 0 || d % p.num_heads != 0) {
    throw ConfigError("mha: model width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(p.num_heads) + " heads");
  }
  for (const Tensor* t : {&query_seq, &key_seq, &value_seq}) {
    if (t->rank() != 2 || t->cols() != d) {
      throw DimensionError("mha: input " + shape_str(t->shape()) + " does not have width " +
                           std::to_string(d));
    }
  }
  Tensor q = apply(tape, p.q, query_seq);
  Tensor k = apply(tape, p.k, key_seq);
  Tensor v = apply(tape, p.v, value_seq);
  if (p.num_heads == 1) return apply(tape, p.o, sdp_attention(tape, q, k, v, groups));

  const Index dh = d / p.num_heads;
  std::vector<Tensor> heads;
  heads.reserve(p.num_heads);
  for (int h = 0; h < p.num_heads; ++h) {
    heads.push_back(sdp_attention(tape, column_block(tape, q, h * dh, dh), column_block(tape, k, h * dh, dh),
                                  column_block(tape, v, h * dh, dh), groups));
  }
  return apply(tape, p.o, concat_columns(tape, heads));
}

Tensor encoder_layer(Tape& tape, const Tensor& tokens, const EncoderLayerParams& p, Index groups) {
  Tensor x = apply(tape, p.ln1, add(tape, tokens, mha(tape, tokens, tokens, tokens, p.self_attn, groups)));
  return apply(tape, p.ln2, add(tape, x, apply(tape, p.mlp, x)));
}

Tensor decoder_layer(Tape& tape, const Tensor& query, const Tensor& memory, const DecoderLayerParams& p,
                     Index groups, const DecoderOptions& options) {
  if (memory.rows() < groups) throw DimensionError("decoder_layer: memory needs at least one row per group");
  Tensor q = query;
  if (options.self_attention) {
    q = apply(tape, p.ln1, add(tape, q, mha(tape, q, q, q, p.self_attn, groups)));
  }
  q = apply(tape, p.ln2, add(tape, q, mha(tape, q, memory, memory, p.cross_attn, groups)));
  return apply(tape, p.ln3, add(tape, q, apply(tape, p.mlp, q)));
}

Tensor encoder_stack(Tape& tape, const Tensor& tokens, std::span<const EncoderLayerParams> layers,
                     Index groups) {
  Tensor x = tokens;
  for (const auto& layer : layers) x = encoder_layer(tape, x, layer, groups);
  return x;
}

Tensor decoder_stack(Tape& tape, const Tensor& query, const Tensor& memory,
                     std::span<const DecoderLayerParams> layers, Index groups,
                     const DecoderOptions& options) {
  Tensor q = query;
  for (const auto& layer : layers) q = decoder_layer(tape, q, memory, layer, groups, options);
  return q;
}

}  // namespace d2sdk
