#pragma once

// The cross-domain mixture-of-experts Transformer and its ablation variants.
//
// Full:        expert tokens -> encoder stack (memory); query token decoded
//              against memory -> final FC.
// TD:          as Full but the expert tokens are the memory (no encoder).
// TEExp:       encoder over expert tokens, one classifier per encoded token,
//              logits summed.
// ConvExp:     sum of the domain-specific expert logits.
// WeightedMoE: expert logits mixed with softmax(<query, expert feature>).
// ERM:         backbone -> query neck -> final FC.

#include "d2sdk/attention.hpp"
#include "d2sdk/experts.hpp"
#include "d2sdk/nn.hpp"
#include "d2sdk/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace d2sdk {

enum class Variant { Full, ConvExp, TEExp, TD, WeightedMoE, ERM };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);
std::span<const Variant> all_variants();

struct ModelConfig {
  int num_domains = 3;   // K
  int num_classes = 5;   // N_C
  int input_dim = 16;    // D_in
  int backbone_hidden = 64;
  int shared_dim = 64;   // d_s
  int model_dim = 32;    // d
  int num_layers = 2;    // L, encoder and decoder
  // Encoder depth when it should differ from num_layers (0 turns the encoder
  // into the identity).
  std::optional<int> encoder_layers;
  int num_heads = 2;
  int ff_dim = 64;       // MLP hidden width inside the Transformer
  double lambda = 0.1;
  Variant variant = Variant::Full;
  bool domain_embedding = false;
  bool decoder_self_attn = true;
  bool qkv_bias = true;
  // Every expert starts from the same weights (symmetry tests only).
  bool symmetric_experts = false;
  std::uint64_t seed = 0;

  void validate() const;
  int effective_encoder_layers() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class ParamGroup { Backbone, Expert, Global };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
  int domain = -1;       // expert index for ParamGroup::Expert
  bool expert_head = false;
};

struct ForwardOutput {
  Tensor global_logits;               // h(x), [B x N_C]
  std::vector<Tensor> expert_logits;  // g_k(x); empty when heads were not evaluated
  Tensor decoded_feature;             // input of the final FC; undefined for head-sum variants
  Tensor mixture_weights;             // WeightedMoE only, [B x K]
};

enum class Mode {
  Train,      // expert heads evaluated for the domain loss
  Inference,  // heads are skipped unless the variant classifies with them
};

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<Tensor> tensors() const;
  const NamedParam* find(const std::string& name) const;
  std::size_t parameter_count() const;

  ForwardOutput forward(Tape& tape, const Tensor& x, Mode mode = Mode::Train) const;

  // Copies every parameter value by name; both models must share the layout.
  void copy_parameters_from(const Model& other);
  void zero_grad();

  // Number of individual expert-head applications since construction.
  std::size_t head_evaluations() const { return head_evaluations_; }

  const BackboneParams& backbone() const { return backbone_; }
  const std::vector<ExpertParams>& experts() const { return experts_; }
  const QueryBranchParams& query_branch() const { return query_; }
  const std::vector<EncoderLayerParams>& encoder() const { return encoder_; }
  const std::vector<DecoderLayerParams>& decoder() const { return decoder_; }
  const Linear& final_fc() const { return final_fc_; }
  const std::vector<Linear>& encoded_heads() const { return encoded_heads_; }
  const Tensor& domain_embedding() const { return domain_embedding_; }

  // Building blocks used by forward(); exposed for tests.
  Tensor expert_logits_for(Tape& tape, const Tensor& feature, int k) const;
  bool uses_query_branch() const;
  bool uses_experts() const;

 private:
  void register_params();

  ModelConfig config_;
  BackboneParams backbone_;
  std::vector<ExpertParams> experts_;
  QueryBranchParams query_;
  std::vector<EncoderLayerParams> encoder_;
  std::vector<DecoderLayerParams> decoder_;
  Linear final_fc_;
  std::vector<Linear> encoded_heads_;  // TEExp classifiers on encoder outputs
  Tensor domain_embedding_;            // [K x d] when enabled
  std::vector<NamedParam> params_;
  mutable std::size_t head_evaluations_ = 0;
};

// Forward paths by variant; Model::forward dispatches to these.
ForwardOutput d2sdk_forward(Tape& tape, const Tensor& x, const Model& model, Mode mode = Mode::Train);
ForwardOutput variant_forward(Tape& tape, const Tensor& x, const Model& model, Mode mode = Mode::Train);
ForwardOutput weighted_moe_forward(Tape& tape, const Tensor& x, const Model& model, Mode mode = Mode::Train);

struct LossParts {
  Tensor total;
  Tensor domain;  // (1/B) sum_i CE(g_{z_i}(x_i), y_i)
  Tensor global;  // (1/B) sum_i CE(h(x_i), y_i)
  double domain_value = 0.0;
  double global_value = 0.0;
  double total_value = 0.0;
};

// total = lambda * domain + (1 - lambda) * global. When the output carries no
// expert logits (ERM) the domain term is absent and total = global.
LossParts compute_loss(Tape& tape, const ForwardOutput& out, std::span<const int> labels,
                       std::span<const int> domains, double lambda);

// Row-wise argmax of the global logits, ties to the lowest class index.
std::vector<int> predict(const ForwardOutput& out);
std::vector<int> argmax_rows(const Matrix& logits);

}  // namespace d2sdk
