#include "d2sdk/nn.hpp"

#include <cmath>

namespace d2sdk {

Rng stream_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return Rng(seq);
}

Tensor glorot_uniform(Rng& rng, Index in, Index out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  return Tensor(std::move(w), true);
}

Linear Linear::init(Rng& rng, Index in, Index out, bool with_bias) {
  Linear l;
  l.weight = glorot_uniform(rng, in, out);
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

Tensor apply(Tape& tape, const Linear& layer, const Tensor& x) {
  return affine(tape, x, layer.weight, layer.bias);
}

LayerNormParams LayerNormParams::init(Index d) {
  LayerNormParams p;
  p.gamma = Tensor(Shape{d}, Matrix::Ones(1, d), true);
  p.beta = Tensor::zeros({d}, true);
  return p;
}

void LayerNormParams::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

Tensor apply(Tape& tape, const LayerNormParams& ln, const Tensor& x) {
  return layer_norm(tape, x, ln.gamma, ln.beta, 1e-5);
}

MlpParams MlpParams::init(Rng& rng, Index d, Index d_ff) {
  MlpParams m;
  m.fc1 = Linear::init(rng, d, d_ff);
  m.fc2 = Linear::init(rng, d_ff, d);
  return m;
}

void MlpParams::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

Tensor apply(Tape& tape, const MlpParams& mlp, const Tensor& x) {
  return apply(tape, mlp.fc2, relu(tape, apply(tape, mlp.fc1, x)));
}

}  // namespace d2sdk
