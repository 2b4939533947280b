#include "d2sdk/experts.hpp"

#include "d2sdk/errors.hpp"

namespace d2sdk {

BackboneParams BackboneParams::init(Rng& rng, Index input_dim, Index hidden, Index shared_dim) {
  return {Linear::init(rng, input_dim, hidden), Linear::init(rng, hidden, shared_dim)};
}

void BackboneParams::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

ExpertParams ExpertParams::init(Rng& rng, Index shared_dim, Index model_dim, Index num_classes) {
  ExpertParams e;
  e.neck = Linear::init(rng, shared_dim, model_dim);
  e.head = Linear::init(rng, model_dim, num_classes);
  return e;
}

void ExpertParams::collect(ParamList& out, const std::string& prefix) const {
  neck.collect(out, prefix + ".neck");
  head.collect(out, prefix + ".head");
}

QueryBranchParams QueryBranchParams::init(Rng& rng, Index shared_dim, Index model_dim) {
  return {Linear::init(rng, shared_dim, model_dim)};
}

void QueryBranchParams::collect(ParamList& out, const std::string& prefix) const {
  neck.collect(out, prefix + ".neck");
}

Tensor backbone_forward(Tape& tape, const Tensor& x, const BackboneParams& p) {
  if (x.rank() != 2 || x.cols() != p.input_dim()) {
    throw DimensionError("backbone: input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(p.input_dim()) + " features");
  }
  return relu(tape, apply(tape, p.fc2, relu(tape, apply(tape, p.fc1, x))));
}

namespace {

void check_index(std::span<const ExpertParams> experts, int k) {
  if (k < 0 || k >= static_cast<int>(experts.size())) {
    throw IndexError("expert index " + std::to_string(k) + " outside [0, " + std::to_string(experts.size()) + ")");
  }
}

}  // namespace

Tensor expert_feature(Tape& tape, const Tensor& shared, std::span<const ExpertParams> experts, int k) {
  check_index(experts, k);
  return relu(tape, apply(tape, experts[k].neck, shared));
}

Tensor expert_head(Tape& tape, const Tensor& feature, std::span<const ExpertParams> experts, int k) {
  check_index(experts, k);
  return apply(tape, experts[k].head, feature);
}

ExpertOutput expert_forward(Tape& tape, const Tensor& shared, std::span<const ExpertParams> experts, int k) {
  Tensor f = expert_feature(tape, shared, experts, k);
  return {f, expert_head(tape, f, experts, k)};
}

Tensor query_forward(Tape& tape, const Tensor& shared, const QueryBranchParams& p) {
  return relu(tape, apply(tape, p.neck, shared));
}

}  // namespace d2sdk
