#include "doctest.h"

#include "d2sdk/checkpoint.hpp"
#include "d2sdk/errors.hpp"
#include "d2sdk/gradcheck.hpp"
#include "d2sdk/model.hpp"

#include <cmath>
#include <set>

using namespace d2sdk;

namespace {

Tensor random_input(Rng& rng, Index rows, Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return Tensor(std::move(m));
}

ModelConfig micro_config(Variant v = Variant::Full) {
  ModelConfig c;
  c.num_domains = 2;
  c.num_classes = 3;
  c.input_dim = 8;
  c.backbone_hidden = 12;
  c.shared_dim = 16;
  c.model_dim = 8;
  c.num_layers = 1;
  c.num_heads = 2;
  c.ff_dim = 16;
  c.variant = v;
  c.seed = 42;
  return c;
}

// Nudges every bias / layer-norm parameter away from its initial constant.
void perturb(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (const auto& p : m.params()) {
    Tensor t = p.tensor;
    if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
      for (Index i = 0; i < t.numel(); ++i) t.mutable_value().data()[i] = u(rng);
    } else if (p.name.ends_with(".gamma")) {
      for (Index i = 0; i < t.numel(); ++i) t.mutable_value().data()[i] = 1.0 + u(rng);
    }
  }
}

void set_all(const Linear& l, double v) {
  Tensor w = l.weight;
  w.mutable_value().setConstant(v);
  if (l.bias.defined()) {
    Tensor b = l.bias;
    b.mutable_value().setConstant(v);
  }
}

bool all_zero(const Tensor& t) { return !t.has_grad() || t.grad().cwiseAbs().maxCoeff() == 0.0; }

// Loss of `model` on (x, y, z) with a fresh tape; grads accumulate on params.
LossParts loss_and_backward(const Model& model, const Tensor& x, const std::vector<int>& y,
                            const std::vector<int>& z, double lambda) {
  Tape tape;
  auto out = model.forward(tape, x);
  auto parts = compute_loss(tape, out, y, z, lambda);
  tape.backward(parts.total);
  return parts;
}

}  // namespace

// ---------------------------------------------------------------------------
// experts
// ---------------------------------------------------------------------------

TEST_CASE("backbone: zero weights give zero features, repeated calls are bit-identical") {
  Model model(ModelConfig{});
  Rng rng(1);
  Tensor x = random_input(rng, 4, 16);
  Tape tape;
  auto a = backbone_forward(tape, x, model.backbone());
  auto b = backbone_forward(tape, x, model.backbone());
  CHECK(a.value() == b.value());
  CHECK(a.cols() == 64);

  set_all(model.backbone().fc1, 0.0);
  set_all(model.backbone().fc2, 0.0);
  CHECK(backbone_forward(tape, x, model.backbone()).value().cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(backbone_forward(tape, random_input(rng, 4, 15), model.backbone()), DimensionError);
}

TEST_CASE("backbone receives gradients from both loss terms") {
  Model model(micro_config());
  perturb(model, 3);
  Rng rng(2);
  Tensor x = random_input(rng, 4, 8);
  std::vector<int> y{0, 1, 2, 1}, z{0, 1, 1, 0};
  for (double lambda : {0.0, 1.0}) {
    model.zero_grad();
    loss_and_backward(model, x, y, z, lambda);
    CHECK(model.find("backbone.fc1.weight")->tensor.grad().cwiseAbs().maxCoeff() > 0.0);
    CHECK(model.find("backbone.fc2.weight")->tensor.grad().cwiseAbs().maxCoeff() > 0.0);
  }
  std::vector<Tensor> params{model.find("backbone.fc1.weight")->tensor, model.find("backbone.fc2.bias")->tensor};
  GradCheckOptions opt;
  opt.tol = 1e-4;
  auto report = gradient_check(
      [&](Tape& t) { return compute_loss(t, model.forward(t, x), y, z, 0.3).total; }, params, {}, opt);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("experts: shapes, symmetry and index errors") {
  ModelConfig c;
  c.symmetric_experts = true;
  Model model(c);
  Rng rng(4);
  Tape tape;
  Tensor shared = backbone_forward(tape, random_input(rng, 5, 16), model.backbone());
  auto e0 = expert_forward(tape, shared, model.experts(), 0);
  CHECK(e0.feature.cols() == 32);
  CHECK(e0.logits.cols() == 5);
  for (int k = 1; k < 3; ++k) {
    auto ek = expert_forward(tape, shared, model.experts(), k);
    CHECK(ek.feature.value() == e0.feature.value());
    CHECK(ek.logits.value() == e0.logits.value());
  }
  CHECK_THROWS_AS(expert_forward(tape, shared, model.experts(), 3), IndexError);
  CHECK_THROWS_AS(expert_forward(tape, shared, model.experts(), -1), IndexError);

  Model distinct(ModelConfig{});
  Tensor s2 = backbone_forward(tape, random_input(rng, 5, 16), distinct.backbone());
  CHECK(expert_feature(tape, s2, distinct.experts(), 0).value() != expert_feature(tape, s2, distinct.experts(), 1).value());
}

TEST_CASE("query branch: zero weights, shape, gradient reaches it but never the heads") {
  Model model(ModelConfig{});
  Rng rng(5);
  Tensor x = random_input(rng, 6, 16);
  Tape tape;
  Tensor shared = backbone_forward(tape, x, model.backbone());
  CHECK(query_forward(tape, shared, model.query_branch()).rows() == 6);
  CHECK(query_forward(tape, shared, model.query_branch()).cols() == 32);

  std::vector<int> y{0, 1, 2, 3, 4, 0}, z{0, 1, 2, 0, 1, 2};
  loss_and_backward(model, x, y, z, 0.0);
  CHECK(model.find("query.neck.weight")->tensor.grad().cwiseAbs().maxCoeff() > 0.0);
  for (const auto& p : model.params()) {
    if (p.expert_head) CHECK(all_zero(p.tensor));
  }

  Model zeroed(ModelConfig{});
  set_all(zeroed.query_branch().neck, 0.0);
  Tape t2;
  CHECK(query_forward(t2, backbone_forward(t2, x, zeroed.backbone()), zeroed.query_branch()).value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("parameter partition is exact and disjoint") {
  for (Variant v : all_variants()) {
    ModelConfig c;
    c.variant = v;
    c.domain_embedding = true;
    Model model(c);
    std::set<const TensorData*> seen;
    std::set<std::string> names;
    int heads = 0;
    for (const auto& p : model.params()) {
      CHECK(seen.insert(p.tensor.data()).second);
      CHECK(names.insert(p.name).second);
      if (p.group == ParamGroup::Backbone) CHECK(p.name.starts_with("backbone."));
      if (p.group == ParamGroup::Expert) {
        CHECK(p.name.starts_with("expert." + std::to_string(p.domain) + "."));
        CHECK(p.expert_head == (p.name.find(".head.") != std::string::npos));
      }
      if (p.group == ParamGroup::Global) CHECK_FALSE(p.name.starts_with("expert."));
      heads += p.expert_head;
    }
    CHECK(heads == (v == Variant::ERM ? 0 : 2 * c.num_domains));
  }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

TEST_CASE("config validation") {
  ModelConfig c;
  c.num_heads = 3;
  CHECK_THROWS_AS(Model{c}, ConfigError);
  c = ModelConfig{};
  c.lambda = 1.5;
  CHECK_THROWS_AS(Model{c}, ConfigError);
  c = ModelConfig{};
  c.num_domains = 0;
  CHECK_THROWS_AS(Model{c}, ConfigError);
  CHECK_THROWS_AS(parse_variant("Transformer"), ConfigError);
  for (Variant v : all_variants()) CHECK(parse_variant(to_string(v)) == v);

  ModelConfig e;
  e.encoder_layers = 0;
  e.variant = Variant::TD;
  e.lambda = 0.25;
  nlohmann::json j = e;
  CHECK(j.get<ModelConfig>().encoder_layers == 0);
  CHECK(j.get<ModelConfig>().variant == Variant::TD);
  CHECK(nlohmann::json(j.get<ModelConfig>()) == j);
}

TEST_CASE("single-domain model runs end to end") {
  ModelConfig c;
  c.num_domains = 1;
  Model model(c);
  Rng rng(6);
  Tensor x = random_input(rng, 3, 16);
  Tape tape;
  auto out = model.forward(tape, x);
  CHECK(out.global_logits.rows() == 3);
  CHECK(out.global_logits.value().allFinite());
  CHECK(out.expert_logits.size() == 1);
  std::vector<int> y{0, 1, 2}, z{0, 0, 0};
  auto parts = compute_loss(tape, out, y, z, 0.1);
  tape.backward(parts.total);
  CHECK(std::isfinite(parts.total_value));
}

TEST_CASE("global logits are invariant to a joint permutation of the experts") {
  for (Variant v : {Variant::Full, Variant::TD, Variant::WeightedMoE, Variant::ConvExp}) {
    CAPTURE(to_string(v));
    ModelConfig c;
    c.variant = v;
    Model a(c);
    perturb(a, 7);
    Model b(c);
    b.copy_parameters_from(a);
    const std::vector<int> perm{2, 0, 1};
    for (int k = 0; k < 3; ++k) {
      for (const char* part : {".neck.weight", ".neck.bias", ".head.weight", ".head.bias"}) {
        Tensor dst = b.find("expert." + std::to_string(k) + part)->tensor;
        dst.mutable_value() = a.find("expert." + std::to_string(perm[k]) + part)->tensor.value();
      }
    }
    Rng rng(8);
    Tensor x = random_input(rng, 5, 16);
    Tape tape;
    auto la = a.forward(tape, x).global_logits.value();
    auto lb = b.forward(tape, x).global_logits.value();
    CHECK((la - lb).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("micro-config full loss passes the gradient check") {
  Model model(micro_config());
  perturb(model, 9);
  Rng rng(10);
  Tensor x = random_input(rng, 2, 8);
  std::vector<int> y{1, 2}, z{0, 1};
  std::vector<std::string> names;
  for (const auto& p : model.params()) names.push_back(p.name);
  GradCheckOptions opt;
  opt.tol = 1e-4;
  auto report = gradient_check([&](Tape& t) { return compute_loss(t, model.forward(t, x), y, z, 0.1).total; },
                               model.tensors(), names, opt);
  CAPTURE(report.worst);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.checked + report.kinks_excluded == model.parameter_count());
}

TEST_CASE("loss weighting: lambda endpoints isolate the two classifier families") {
  Model model(micro_config());
  perturb(model, 11);
  Rng rng(12);
  Tensor x = random_input(rng, 6, 8);
  std::vector<int> y{0, 1, 2, 0, 1, 2}, z{0, 1, 0, 1, 0, 1};

  model.zero_grad();
  auto p0 = loss_and_backward(model, x, y, z, 0.0);
  CHECK(p0.total_value == p0.global_value);
  for (const auto& p : model.params()) {
    if (p.expert_head) CHECK(all_zero(p.tensor));
  }

  model.zero_grad();
  loss_and_backward(model, x, y, z, 1.0);
  CHECK(all_zero(model.find("final.weight")->tensor));
  CHECK(all_zero(model.find("final.bias")->tensor));
  CHECK_FALSE(all_zero(model.find("expert.0.head.weight")->tensor));

  for (double lambda : {0.7, 0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01}) {
    Tape tape;
    auto parts = compute_loss(tape, model.forward(tape, x), y, z, lambda);
    CHECK(std::abs(parts.total_value - (lambda * parts.domain_value + (1 - lambda) * parts.global_value)) < 1e-12);
  }

  std::vector<int> bad{0, 1, 0, 2, 0, 1};
  Tape tape;
  CHECK_THROWS_AS(compute_loss(tape, model.forward(tape, x), y, bad, 0.1), LabelError);
}

TEST_CASE("mixed loss arithmetic with crafted logits") {
  // Two-class CE with logits [a, 0] and label 1 equals log(1 + e^a).
  Tensor expert = Tensor::matrix({{std::log(std::exp(2.0) - 1.0), 0.0}});
  Tensor global = Tensor::matrix({{std::log(std::exp(1.0) - 1.0), 0.0}});
  ForwardOutput out;
  out.global_logits = global;
  out.expert_logits = {expert};
  std::vector<int> y{1}, z{0};
  Tape tape;
  auto parts = compute_loss(tape, out, y, z, 0.1);
  CHECK(std::abs(parts.domain_value - 2.0) < 1e-12);
  CHECK(std::abs(parts.global_value - 1.0) < 1e-12);
  CHECK(std::abs(parts.total_value - 1.1) < 1e-12);
}

TEST_CASE("domain indicator: an expert head only matters when its domain is in the batch") {
  Model model(ModelConfig{});
  Rng rng(13);
  Tensor x = random_input(rng, 4, 16);
  std::vector<int> y{0, 1, 2, 3};
  for (int j = 0; j < 3; ++j) {
    for (const std::vector<int>& z : {std::vector<int>{0, 0, 1, 1}, {2, 2, 2, 2}, {0, 1, 2, 0}}) {
      Tape t1;
      const double before = compute_loss(t1, model.forward(t1, x), y, z, 0.1).total_value;
      Tensor w = model.find("expert." + std::to_string(j) + ".head.weight")->tensor;
      w.mutable_value().col(0).array() += 0.05;
      Tape t2;
      const double after = compute_loss(t2, model.forward(t2, x), y, z, 0.1).total_value;
      w.mutable_value().col(0).array() -= 0.05;
      const bool present = std::find(z.begin(), z.end(), j) != z.end();
      CHECK((before != after) == present);
    }
  }
}

TEST_CASE("TD equals Full with an identity encoder, bit for bit") {
  ModelConfig full = ModelConfig{};
  full.encoder_layers = 0;
  ModelConfig td = ModelConfig{};
  td.variant = Variant::TD;
  td.seed = 99;
  Model a(full), b(td);
  perturb(a, 14);
  b.copy_parameters_from(a);
  CHECK(a.params().size() == b.params().size());
  Rng rng(15);
  Tensor x = random_input(rng, 7, 16);
  Tape tape;
  CHECK(a.forward(tape, x).global_logits.value() == b.forward(tape, x).global_logits.value());
}

TEST_CASE("ConvExp with one domain equals that expert's logits") {
  ModelConfig c;
  c.variant = Variant::ConvExp;
  c.num_domains = 1;
  Model model(c);
  Rng rng(16);
  Tensor x = random_input(rng, 4, 16);
  Tape tape;
  auto out = model.forward(tape, x);
  auto expert = expert_forward(tape, backbone_forward(tape, x, model.backbone()), model.experts(), 0);
  CHECK(out.global_logits.value() == expert.logits.value());
}

TEST_CASE("WeightedMoE weights") {
  ModelConfig sym;
  sym.variant = Variant::WeightedMoE;
  sym.symmetric_experts = true;
  Model model(sym);
  Rng rng(17);
  Tensor x = random_input(rng, 5, 16);
  Tape tape;
  auto out = model.forward(tape, x);
  CHECK((out.mixture_weights.value().array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);

  ModelConfig c;
  c.variant = Variant::WeightedMoE;
  Model m2(c);
  auto o2 = m2.forward(tape, x);
  CHECK((o2.mixture_weights.value().rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);

  // oracle: explicit inner products and softmax
  Tensor shared = backbone_forward(tape, x, m2.backbone());
  Matrix q = query_forward(tape, shared, m2.query_branch()).value();
  std::vector<Matrix> f, g;
  for (int k = 0; k < 3; ++k) {
    auto e = expert_forward(tape, shared, m2.experts(), k);
    f.push_back(e.feature.value());
    g.push_back(e.logits.value());
  }
  for (Index b = 0; b < 5; ++b) {
    double s[3], z = 0;
    for (int k = 0; k < 3; ++k) s[k] = q.row(b).dot(f[k].row(b));
    const double mx = std::max({s[0], s[1], s[2]});
    for (double& v : s) z += (v = std::exp(v - mx));
    RowVector mixed = RowVector::Zero(5);
    for (int k = 0; k < 3; ++k) {
      CHECK(std::abs(o2.mixture_weights.value()(b, k) - s[k] / z) < 1e-12);
      mixed += s[k] / z * g[k].row(b);
    }
    CHECK((o2.global_logits.value().row(b) - mixed).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("predict: argmax, lowest-index ties, shift and positive rescale invariance") {
  ForwardOutput out;
  out.global_logits = Tensor::matrix({{0.1, 0.9, 0.3}, {0.5, 0.5, 0.2}});
  CHECK(predict(out) == std::vector<int>{1, 0});
  Rng rng(18);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix m(4, 5);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    const auto base = argmax_rows(m);
    Matrix shifted = m.array() + u(rng);
    Matrix rescaled = m.array() * (0.1 + std::abs(u(rng))) + u(rng);
    CHECK(argmax_rows(shifted) == base);
    CHECK(argmax_rows(rescaled) == base);
  }
}

TEST_CASE("inference never evaluates expert heads for decoding variants") {
  for (Variant v : {Variant::Full, Variant::TD, Variant::TEExp, Variant::ERM}) {
    ModelConfig c;
    c.variant = v;
    Model model(c);
    Rng rng(19);
    Tensor x = random_input(rng, 4, 16);
    const auto before = model.head_evaluations();
    Tape tape(false);
    auto out = model.forward(tape, x, Mode::Inference);
    CHECK(model.head_evaluations() == before);
    CHECK(out.expert_logits.empty());
    Tape train;
    model.forward(train, x, Mode::Train);
    CHECK(model.head_evaluations() == before + (v == Variant::ERM ? 0 : 3));
  }
}

TEST_CASE("every variant produces finite logits and a finite loss") {
  for (Variant v : all_variants()) {
    CAPTURE(to_string(v));
    ModelConfig c;
    c.variant = v;
    c.domain_embedding = true;
    Model model(c);
    Rng rng(20);
    Tensor x = random_input(rng, 4, 16);
    std::vector<int> y{0, 1, 2, 3}, z{0, 1, 2, 0};
    auto parts = loss_and_backward(model, x, y, z, 0.1);
    CHECK(std::isfinite(parts.total_value));
    if (v == Variant::ERM) CHECK(parts.total_value == parts.global_value);
  }
}

TEST_CASE("variant entry points reject other variants") {
  ModelConfig c;
  c.variant = Variant::ERM;
  Model model(c);
  Tape tape;
  Tensor x = Tensor::zeros({1, 16});
  CHECK_THROWS_AS(d2sdk_forward(tape, x, model), ConfigError);
  CHECK_THROWS_AS(weighted_moe_forward(tape, x, model), ConfigError);
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  ModelConfig c;
  c.domain_embedding = true;
  Model model(c);
  perturb(model, 21);
  Checkpoint ck = make_checkpoint(model, "last-epoch", 3);
  ck.rng_state = "1 2 3";
  ck.momentum.push_back({"backbone.fc1.bias", {64}, std::vector<double>(64, 1.0 / 3.0)});
  const std::string bytes = serialize_checkpoint(ck);
  Checkpoint back = parse_checkpoint(bytes);
  CHECK(back == ck);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(ck.groups.front().name == "backbone");
  CHECK(ck.groups.back().name == "global");

  ModelConfig other = c;
  other.seed = 1234;
  Model fresh(other);
  load_parameters(fresh, back);
  Rng rng(22);
  Tensor x = random_input(rng, 3, 16);
  Tape tape;
  CHECK(fresh.forward(tape, x).global_logits.value() == model.forward(tape, x).global_logits.value());

  CHECK_THROWS_AS(parse_checkpoint("{\"format\":\"other\"}"), IoError);
  ModelConfig erm;
  erm.variant = Variant::ERM;
  Model wrong(erm);
  CHECK_THROWS_AS(load_parameters(wrong, back), IoError);
}
