#pragma once

// Shared backbone, per-domain local experts and the domain-agnostic query
// branch.

#include "d2sdk/nn.hpp"
#include "d2sdk/tensor.hpp"

#include <span>

namespace d2sdk {

// Two affine+relu layers, D_in -> hidden -> d_s.
struct BackboneParams {
  Linear fc1, fc2;

  static BackboneParams init(Rng& rng, Index input_dim, Index hidden, Index shared_dim);
  Index input_dim() const { return fc1.in_features(); }
  Index output_dim() const { return fc2.out_features(); }
  void collect(ParamList& out, const std::string& prefix) const;
};

// neck: affine+relu d_s -> d, head: affine d -> N_C.
struct ExpertParams {
  Linear neck;
  Linear head;

  static ExpertParams init(Rng& rng, Index shared_dim, Index model_dim, Index num_classes);
  void collect(ParamList& out, const std::string& prefix) const;
};

// Same neck shape as an expert, no classifier of its own.
struct QueryBranchParams {
  Linear neck;

  static QueryBranchParams init(Rng& rng, Index shared_dim, Index model_dim);
  void collect(ParamList& out, const std::string& prefix) const;
};

Tensor backbone_forward(Tape& tape, const Tensor& x, const BackboneParams& p);

// Token [B x d] for the Transformer.
Tensor expert_feature(Tape& tape, const Tensor& shared, std::span<const ExpertParams> experts, int k);
// Domain-specific classifier g_k applied to an expert feature.
Tensor expert_head(Tape& tape, const Tensor& feature, std::span<const ExpertParams> experts, int k);

struct ExpertOutput {
  Tensor feature;  // [B x d]
  Tensor logits;   // [B x N_C]
};

ExpertOutput expert_forward(Tape& tape, const Tensor& shared, std::span<const ExpertParams> experts, int k);

Tensor query_forward(Tape& tape, const Tensor& shared, const QueryBranchParams& p);

}  // namespace d2sdk
