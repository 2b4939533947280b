#include "d2sdk/model.hpp"

#include "d2sdk/errors.hpp"

#include <array>

namespace d2sdk {

namespace {

constexpr std::array<Variant, 6> kVariants{Variant::ERM, Variant::ConvExp, Variant::TEExp,
                                           Variant::TD,  Variant::Full,    Variant::WeightedMoE};

enum Stream : std::uint32_t {
  kBackbone = 1,
  kExpert = 100,
  kQuery = 200,
  kEncoder = 300,
  kDecoder = 400,
  kFinal = 500,
  kEmbedding = 600,
  kEncodedHead = 700,
};

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "Full";
    case Variant::ConvExp: return "ConvExp";
    case Variant::TEExp: return "TEExp";
    case Variant::TD: return "TD";
    case Variant::WeightedMoE: return "WeightedMoE";
    case Variant::ERM: return "ERM";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : kVariants) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

std::span<const Variant> all_variants() { return kVariants; }

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string(what) + " must be positive, got " + std::to_string(v));
  };
  positive(num_domains, "num_domains");
  positive(num_classes, "num_classes");
  positive(input_dim, "input_dim");
  positive(backbone_hidden, "backbone_hidden");
  positive(shared_dim, "shared_dim");
  positive(model_dim, "model_dim");
  positive(num_heads, "num_heads");
  positive(ff_dim, "ff_dim");
  if (num_layers < 0) throw ConfigError("num_layers must be >= 0");
  if (encoder_layers && *encoder_layers < 0) throw ConfigError("encoder_layers must be >= 0");
  if (model_dim % num_heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
}

int ModelConfig::effective_encoder_layers() const { return encoder_layers.value_or(num_layers); }

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"K", c.num_domains},
                     {"N_C", c.num_classes},
                     {"D_in", c.input_dim},
                     {"backbone_hidden", c.backbone_hidden},
                     {"d_s", c.shared_dim},
                     {"d", c.model_dim},
                     {"L", c.num_layers},
                     {"encoder_layers", c.encoder_layers ? nlohmann::json(*c.encoder_layers) : nlohmann::json()},
                     {"num_heads", c.num_heads},
                     {"d_ff", c.ff_dim},
                     {"lambda", c.lambda},
                     {"variant", to_string(c.variant)},
                     {"domain_embedding", c.domain_embedding},
                     {"decoder_self_attn", c.decoder_self_attn},
                     {"qkv_bias", c.qkv_bias},
                     {"symmetric_experts", c.symmetric_experts},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.num_domains = j.value("K", d.num_domains);
  c.num_classes = j.value("N_C", d.num_classes);
  c.input_dim = j.value("D_in", d.input_dim);
  c.backbone_hidden = j.value("backbone_hidden", d.backbone_hidden);
  c.shared_dim = j.value("d_s", d.shared_dim);
  c.model_dim = j.value("d", d.model_dim);
  c.num_layers = j.value("L", d.num_layers);
  c.encoder_layers.reset();
  if (j.contains("encoder_layers") && !j["encoder_layers"].is_null()) c.encoder_layers = j["encoder_layers"].get<int>();
  c.num_heads = j.value("num_heads", d.num_heads);
  c.ff_dim = j.value("d_ff", d.ff_dim);
  c.lambda = j.value("lambda", d.lambda);
  c.variant = parse_variant(j.value("variant", to_string(d.variant)));
  c.domain_embedding = j.value("domain_embedding", d.domain_embedding);
  c.decoder_self_attn = j.value("decoder_self_attn", d.decoder_self_attn);
  c.qkv_bias = j.value("qkv_bias", d.qkv_bias);
  c.symmetric_experts = j.value("symmetric_experts", d.symmetric_experts);
  c.seed = j.value("seed", d.seed);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const Variant v = c.variant;
  {
    Rng rng = stream_rng(c.seed, kBackbone);
    backbone_ = BackboneParams::init(rng, c.input_dim, c.backbone_hidden, c.shared_dim);
  }
  if (uses_experts()) {
    for (int k = 0; k < c.num_domains; ++k) {
      Rng rng = stream_rng(c.seed, kExpert + (c.symmetric_experts ? 0 : k));
      experts_.push_back(ExpertParams::init(rng, c.shared_dim, c.model_dim, c.num_classes));
    }
  }
  if (uses_query_branch()) {
    Rng rng = stream_rng(c.seed, kQuery);
    query_ = QueryBranchParams::init(rng, c.shared_dim, c.model_dim);
  }
  if (v == Variant::Full || v == Variant::TEExp) {
    for (int l = 0; l < c.effective_encoder_layers(); ++l) {
      Rng rng = stream_rng(c.seed, kEncoder + l);
      encoder_.push_back(EncoderLayerParams::init(rng, c.model_dim, c.ff_dim, c.num_heads, c.qkv_bias));
    }
  }
  if (v == Variant::Full || v == Variant::TD) {
    for (int l = 0; l < c.num_layers; ++l) {
      Rng rng = stream_rng(c.seed, kDecoder + l);
      decoder_.push_back(DecoderLayerParams::init(rng, c.model_dim, c.ff_dim, c.num_heads, c.qkv_bias));
    }
  }
  if (v == Variant::Full || v == Variant::TD || v == Variant::ERM) {
    Rng rng = stream_rng(c.seed, kFinal);
    final_fc_ = Linear::init(rng, c.model_dim, c.num_classes);
  }
  if (v == Variant::TEExp) {
    for (int k = 0; k < c.num_domains; ++k) {
      Rng rng = stream_rng(c.seed, kEncodedHead + k);
      encoded_heads_.push_back(Linear::init(rng, c.model_dim, c.num_classes));
    }
  }
  if (c.domain_embedding && (v == Variant::Full || v == Variant::TD || v == Variant::TEExp)) {
    Rng rng = stream_rng(c.seed, kEmbedding);
    std::normal_distribution<double> dist(0.0, 0.02);
    Matrix table(c.num_domains, c.model_dim);
    for (Index i = 0; i < table.size(); ++i) table.data()[i] = dist(rng);
    domain_embedding_ = Tensor(std::move(table), true);
  }
  register_params();
}

bool Model::uses_query_branch() const {
  const Variant v = config_.variant;
  return v == Variant::Full || v == Variant::TD || v == Variant::WeightedMoE || v == Variant::ERM;
}

bool Model::uses_experts() const { return config_.variant != Variant::ERM; }

void Model::register_params() {
  params_.clear();
  auto add_group = [this](const ParamList& list, ParamGroup group, int domain, bool head) {
    for (const auto& [name, t] : list) params_.push_back({name, t, group, domain, head});
  };
  {
    ParamList l;
    backbone_.collect(l, "backbone");
    add_group(l, ParamGroup::Backbone, -1, false);
  }
  for (std::size_t k = 0; k < experts_.size(); ++k) {
    const std::string prefix = "expert." + std::to_string(k);
    ParamList neck, head;
    experts_[k].neck.collect(neck, prefix + ".neck");
    experts_[k].head.collect(head, prefix + ".head");
    add_group(neck, ParamGroup::Expert, static_cast<int>(k), false);
    add_group(head, ParamGroup::Expert, static_cast<int>(k), true);
  }
  ParamList global;
  if (uses_query_branch()) query_.collect(global, "query");
  if (domain_embedding_.defined()) global.emplace_back("domain_embedding", domain_embedding_);
  for (std::size_t l = 0; l < encoder_.size(); ++l) encoder_[l].collect(global, "encoder." + std::to_string(l));
  for (std::size_t l = 0; l < decoder_.size(); ++l) decoder_[l].collect(global, "decoder." + std::to_string(l));
  for (std::size_t k = 0; k < encoded_heads_.size(); ++k) {
    encoded_heads_[k].collect(global, "encoded_head." + std::to_string(k));
  }
  if (final_fc_.weight.defined()) final_fc_.collect(global, "final");
  add_group(global, ParamGroup::Global, -1, false);
}

std::vector<Tensor> Model::tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

const NamedParam* Model::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.tensor.numel());
  return n;
}

void Model::copy_parameters_from(const Model& other) {
  for (auto& p : params_) {
    const NamedParam* src = other.find(p.name);
    if (!src || src->tensor.shape() != p.tensor.shape()) {
      throw ConfigError("copy_parameters_from: no matching parameter '" + p.name + "'");
    }
    Tensor dst = p.tensor;
    dst.mutable_value() = src->tensor.value();
  }
}

void Model::zero_grad() {
  for (auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

Tensor Model::expert_logits_for(Tape& tape, const Tensor& feature, int k) const {
  ++head_evaluations_;
  return expert_head(tape, feature, experts_, k);
}

ForwardOutput Model::forward(Tape& tape, const Tensor& x, Mode mode) const {
  switch (config_.variant) {
    case Variant::Full: return d2sdk_forward(tape, x, *this, mode);
    case Variant::WeightedMoE: return weighted_moe_forward(tape, x, *this, mode);
    default: return variant_forward(tape, x, *this, mode);
  }
}

// ---------------------------------------------------------------------------
// Forward paths
// ---------------------------------------------------------------------------

namespace {

struct ExpertPass {
  Tensor shared;
  std::vector<Tensor> features;
  std::vector<Tensor> logits;
};

ExpertPass run_experts(Tape& tape, const Tensor& x, const Model& model, bool with_heads) {
  ExpertPass pass;
  pass.shared = backbone_forward(tape, x, model.backbone());
  for (int k = 0; k < static_cast<int>(model.experts().size()); ++k) {
    pass.features.push_back(expert_feature(tape, pass.shared, model.experts(), k));
    if (with_heads) pass.logits.push_back(model.expert_logits_for(tape, pass.features.back(), k));
  }
  return pass;
}

Tensor memory_tokens(Tape& tape, const Model& model, const ExpertPass& pass) {
  Tensor tokens = stack_tokens(tape, pass.features);
  if (model.domain_embedding().defined()) tokens = add_group_broadcast(tape, tokens, model.domain_embedding());
  return tokens;
}

ForwardOutput decode(Tape& tape, const Model& model, const ExpertPass& pass, const Tensor& memory) {
  const Index batch = pass.shared.rows();
  DecoderOptions options;
  options.self_attention = model.config().decoder_self_attn;
  Tensor query = query_forward(tape, pass.shared, model.query_branch());
  ForwardOutput out;
  out.decoded_feature = decoder_stack(tape, query, memory, model.decoder(), batch, options);
  out.global_logits = apply(tape, model.final_fc(), out.decoded_feature);
  out.expert_logits = pass.logits;
  return out;
}

Tensor sum_all(Tape& tape, const std::vector<Tensor>& parts) {
  Tensor total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(tape, total, parts[i]);
  return total;
}

void require_variant(const Model& model, std::initializer_list<Variant> allowed, const char* fn) {
  for (Variant v : allowed) {
    if (model.config().variant == v) return;
  }
  throw ConfigError(std::string(fn) + ": not applicable to variant " + to_string(model.config().variant));
}

}  // namespace

ForwardOutput d2sdk_forward(Tape& tape, const Tensor& x, const Model& model, Mode mode) {
  require_variant(model, {Variant::Full}, "d2sdk_forward");
  ExpertPass pass = run_experts(tape, x, model, mode == Mode::Train);
  const Index batch = pass.shared.rows();
  Tensor memory = encoder_stack(tape, memory_tokens(tape, model, pass), model.encoder(), batch);
  return decode(tape, model, pass, memory);
}

ForwardOutput variant_forward(Tape& tape, const Tensor& x, const Model& model, Mode mode) {
  require_variant(model, {Variant::ConvExp, Variant::TEExp, Variant::TD, Variant::ERM}, "variant_forward");
  const bool train = mode == Mode::Train;
  switch (model.config().variant) {
    case Variant::TD: {
      ExpertPass pass = run_experts(tape, x, model, train);
      return decode(tape, model, pass, memory_tokens(tape, model, pass));
    }
    case Variant::ConvExp: {
      ExpertPass pass = run_experts(tape, x, model, true);
      ForwardOutput out;
      out.global_logits = sum_all(tape, pass.logits);
      out.expert_logits = pass.logits;
      return out;
    }
    case Variant::TEExp: {
      ExpertPass pass = run_experts(tape, x, model, train);
      const Index batch = pass.shared.rows();
      const auto k_count = static_cast<Index>(pass.features.size());
      Tensor encoded = encoder_stack(tape, memory_tokens(tape, model, pass), model.encoder(), batch);
      std::vector<Tensor> logits;
      std::vector<Index> rows(batch);
      for (Index k = 0; k < k_count; ++k) {
        for (Index b = 0; b < batch; ++b) rows[b] = b * k_count + k;
        logits.push_back(apply(tape, model.encoded_heads()[k], select_rows(tape, encoded, rows)));
      }
      ForwardOutput out;
      out.global_logits = sum_all(tape, logits);
      out.expert_logits = pass.logits;
      return out;
    }
    case Variant::ERM: {
      Tensor shared = backbone_forward(tape, x, model.backbone());
      ForwardOutput out;
      out.decoded_feature = query_forward(tape, shared, model.query_branch());
      out.global_logits = apply(tape, model.final_fc(), out.decoded_feature);
      return out;
    }
    default: break;
  }
  throw ConfigError("variant_forward: unreachable");
}

ForwardOutput weighted_moe_forward(Tape& tape, const Tensor& x, const Model& model, Mode) {
  require_variant(model, {Variant::WeightedMoE}, "weighted_moe_forward");
  ExpertPass pass = run_experts(tape, x, model, true);
  const Index batch = pass.shared.rows();
  Tensor query = query_forward(tape, pass.shared, model.query_branch());
  Tensor features = stack_tokens(tape, pass.features);
  ForwardOutput out;
  out.mixture_weights = softmax(tape, group_scores(tape, query, features, batch, 1.0), 1);
  out.global_logits = group_mix(tape, out.mixture_weights, stack_tokens(tape, pass.logits), batch);
  out.expert_logits = pass.logits;
  return out;
}

// ---------------------------------------------------------------------------
// Loss and prediction
// ---------------------------------------------------------------------------

LossParts compute_loss(Tape& tape, const ForwardOutput& out, std::span<const int> labels,
                       std::span<const int> domains, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("compute_loss: lambda must lie in [0, 1]");
  const Index batch = out.global_logits.rows();
  if (static_cast<Index>(labels.size()) != batch || static_cast<Index>(domains.size()) != batch) {
    throw DimensionError("compute_loss: " + std::to_string(labels.size()) + " labels / " +
                         std::to_string(domains.size()) + " domains for batch of " + std::to_string(batch));
  }
  LossParts parts;
  parts.global = cross_entropy_loss(tape, out.global_logits, labels);
  parts.global_value = parts.global.item();

  if (out.expert_logits.empty()) {
    parts.domain = Tensor::scalar(0.0);
    parts.total = parts.global;
    parts.total_value = parts.global_value;
    return parts;
  }

  const int k_count = static_cast<int>(out.expert_logits.size());
  std::vector<std::vector<Index>> rows(k_count);
  std::vector<std::vector<int>> ys(k_count);
  for (Index i = 0; i < batch; ++i) {
    const int z = domains[i];
    if (z < 0 || z >= k_count) {
      throw LabelError("compute_loss: domain " + std::to_string(z) + " at index " + std::to_string(i) +
                       " outside [0, " + std::to_string(k_count) + ")");
    }
    rows[z].push_back(i);
    ys[z].push_back(labels[i]);
  }
  Tensor domain;
  for (int k = 0; k < k_count; ++k) {
    if (rows[k].empty()) continue;
    Tensor ce = cross_entropy_loss(tape, select_rows(tape, out.expert_logits[k], rows[k]), ys[k]);
    // mean over the domain's rows rescaled to a share of the whole batch
    Tensor term = scale(tape, ce, static_cast<double>(rows[k].size()) / static_cast<double>(batch));
    domain = domain.defined() ? add(tape, domain, term) : term;
  }
  parts.domain = domain;
  parts.domain_value = domain.item();
  parts.total = add(tape, scale(tape, parts.domain, lambda), scale(tape, parts.global, 1.0 - lambda));
  parts.total_value = parts.total.item();
  return parts;
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(const ForwardOutput& out) { return argmax_rows(out.global_logits.value()); }

}  // namespace d2sdk
