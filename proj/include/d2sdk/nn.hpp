#pragma once

// Parameter containers shared by the attention, expert and model layers.

#include "d2sdk/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace d2sdk {

using Rng = std::mt19937_64;

// Independent generator for (seed, stream). Components draw from their own
// stream so adding or removing one leaves the values of the others unchanged.
Rng stream_rng(std::uint64_t seed, std::uint32_t stream);

// Ordered (name, tensor) list; used to walk parameters for optimisation,
// checkpointing and gradient checks.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

// Glorot-uniform [in x out] weight, U(-a, a) with a = sqrt(6 / (in + out)).
Tensor glorot_uniform(Rng& rng, Index in, Index out);

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out], may be undefined

  static Linear init(Rng& rng, Index in, Index out, bool with_bias = true);
  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }
  void collect(ParamList& out, const std::string& prefix) const;
};

Tensor apply(Tape& tape, const Linear& layer, const Tensor& x);

struct LayerNormParams {
  Tensor gamma;  // [d], ones
  Tensor beta;   // [d], zeros

  static LayerNormParams init(Index d);
  void collect(ParamList& out, const std::string& prefix) const;
};

Tensor apply(Tape& tape, const LayerNormParams& ln, const Tensor& x);

// d -> d_ff -> d with relu in between.
struct MlpParams {
  Linear fc1;
  Linear fc2;

  static MlpParams init(Rng& rng, Index d, Index d_ff);
  void collect(ParamList& out, const std::string& prefix) const;
};

Tensor apply(Tape& tape, const MlpParams& mlp, const Tensor& x);

}  // namespace d2sdk
