#pragma once

// Scaled dot-product and multi-head attention plus post-LN Transformer
// encoder/decoder layers.
//
// Every function accepts `groups` independent sequences stacked row-wise, so a
// whole mini-batch goes through one tape entry per primitive. With groups == 1
// the functions reduce to the usual single-sequence form.

#include "d2sdk/nn.hpp"
#include "d2sdk/tensor.hpp"

#include <span>
#include <vector>

namespace d2sdk {

struct MhaParams {
  Linear q, k, v, o;  // each [d x d]
  int num_heads = 1;

  static MhaParams init(Rng& rng, Index d, int num_heads, bool qkv_bias = true);
  Index dim() const { return q.in_features(); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct EncoderLayerParams {
  MhaParams self_attn;
  MlpParams mlp;
  LayerNormParams ln1, ln2;

  static EncoderLayerParams init(Rng& rng, Index d, Index d_ff, int num_heads, bool qkv_bias = true);
  void collect(ParamList& out, const std::string& prefix) const;
};

struct DecoderLayerParams {
  MhaParams self_attn;
  MhaParams cross_attn;
  MlpParams mlp;
  LayerNormParams ln1, ln2, ln3;

  static DecoderLayerParams init(Rng& rng, Index d, Index d_ff, int num_heads, bool qkv_bias = true);
  void collect(ParamList& out, const std::string& prefix) const;
};

struct DecoderOptions {
  // The leading self-attention block; for a length-1 query it only mixes the
  // query with itself.
  bool self_attention = true;
};

// softmax(Q K^T / sqrt(d_h)) over the key axis, [G*nq x nk].
Tensor attention_weights(Tape& tape, const Tensor& queries, const Tensor& keys, Index groups = 1);

// softmax(Q K^T / sqrt(d_h)) V per group.
Tensor sdp_attention(Tape& tape, const Tensor& queries, const Tensor& keys, const Tensor& values,
                     Index groups = 1);

Tensor mha(Tape& tape, const Tensor& query_seq, const Tensor& key_seq, const Tensor& value_seq,
           const MhaParams& p, Index groups = 1);

// LN(x + MHSA(x)), then LN(. + MLP(.)). tokens: [G*n x d].
Tensor encoder_layer(Tape& tape, const Tensor& tokens, const EncoderLayerParams& p, Index groups = 1);

// Self-attention over the query sequence, cross-attention against `memory`,
// then MLP; each block residual + LN. query: [G*nq x d], memory: [G*nk x d].
Tensor decoder_layer(Tape& tape, const Tensor& query, const Tensor& memory, const DecoderLayerParams& p,
                     Index groups = 1, const DecoderOptions& options = {});

// An empty stack is the identity.
Tensor encoder_stack(Tape& tape, const Tensor& tokens, std::span<const EncoderLayerParams> layers,
                     Index groups = 1);

// Every layer attends to the same memory.
Tensor decoder_stack(Tape& tape, const Tensor& query, const Tensor& memory,
                     std::span<const DecoderLayerParams> layers, Index groups = 1,
                     const DecoderOptions& options = {});

}  // namespace d2sdk
