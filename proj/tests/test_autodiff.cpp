#include "doctest.h"

#include "d2sdk/errors.hpp"
#include "d2sdk/gradcheck.hpp"
#include "d2sdk/tensor.hpp"

#include <cmath>
#include <random>

using namespace d2sdk;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Index rows, Index cols, bool grad = true, double lo = -1.0,
                     double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return Tensor(std::move(m), grad);
}

// Projects an arbitrary tensor onto a scalar with fixed random weights so that
// every output coordinate carries a distinct cotangent.
Tensor project(Tape& tape, const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(rng, t.rows(), t.cols(), false);
  Tensor w_shaped(t.shape(), w.value());
  return sum(tape, mul(tape, t, w_shaped));
}

GradCheckOptions strict(double tol = 1e-5) {
  GradCheckOptions o;
  o.h = 1e-4;
  o.tol = tol;
  return o;
}

}  // namespace

TEST_CASE("matmul forward examples") {
  Tape tape;
  auto c = matmul(tape, Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{3, 4}, {5, 6}}));
  CHECK(c.value() == Tensor::matrix({{3, 4}, {5, 6}}).value());
  auto d = matmul(tape, Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  CHECK(d.item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  try {
    matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(std::count(msg.begin(), msg.end(), '[') == 2);
  }
}

TEST_CASE("matmul gradient against central differences") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor(rng, 3, 4);
  Tensor b = random_tensor(rng, 4, 2);
  auto report = gradient_check([&](Tape& t) { return sum(t, matmul(t, a, b)); }, {a, b}, {"a", "b"},
                               strict(1e-6));
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-6);
  CHECK(report.checked == 20);
}

TEST_CASE("elementwise examples") {
  Tape tape;
  CHECK(relu(tape, Tensor::vector({-1, 0, 2})).value() == Tensor::vector({0, 0, 2}).value());
  CHECK(add(tape, Tensor::vector({1, 2}), Tensor::vector({3, 4})).value() == Tensor::vector({4, 6}).value());
  CHECK(sub(tape, Tensor::vector({1, 2}), Tensor::scalar(1)).value() == Tensor::vector({0, 1}).value());
  CHECK(scale(tape, Tensor::vector({1, 2}), 3.0).value() == Tensor::vector({3, 6}).value());
  CHECK_THROWS_AS(add(tape, Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), DimensionError);
}

TEST_CASE("mean backward is uniform 1/n") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor(rng, 3, 5);
  Tape tape;
  tape.backward(mean(tape, x));
  CHECK((x.grad().array() == 1.0 / 15.0).all());
}

TEST_CASE("softmax examples") {
  Tape tape;
  auto u = softmax(tape, Tensor::vector({0, 0, 0}), 0);
  for (Index i = 0; i < 3; ++i) CHECK(u.value()(0, i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto v = softmax(tape, Tensor::vector({std::log(2.0), 0}), 0);
  CHECK(v.value()(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(v.value()(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  // 40-digit reference: e^a / (e^a + 1), a = 7.0711
  auto w = softmax(tape, Tensor::vector({7.0711, 0}), 0);
  CHECK(std::abs(w.value()(0, 0) - 0.99915142232868137125) < 1e-15);
  CHECK(std::abs(w.value()(0, 1) - 0.00084857767131862874808) < 1e-15);
  CHECK_THROWS_AS(softmax(tape, Tensor::vector({1, 2}), 1), DimensionError);
}

TEST_CASE("softmax slices are stochastic along any axis") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = random_tensor(rng, 4, 6, false, -30.0, 30.0);
    Tape tape;
    auto rows = softmax(tape, x, 1).value();
    auto cols = softmax(tape, x, 0).value();
    CHECK((rows.array() >= 0.0).all());
    CHECK((cols.array() >= 0.0).all());
    CHECK((rows.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK((cols.colwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("softmax over a middle axis of a rank-3 tensor") {
  std::vector<double> flat(2 * 3 * 4);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = std::sin(static_cast<double>(i));
  Tensor x = Tensor::from_flat({2, 3, 4}, flat);
  Tape tape;
  auto y = softmax(tape, x, 1);
  for (int a = 0; a < 2; ++a) {
    for (int c = 0; c < 4; ++c) {
      double s = 0;
      for (int b = 0; b < 3; ++b) s += y.flat()[a * 12 + b * 4 + c];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tape tape;
  Tensor ones = Tensor::vector({1, 1});
  Tensor zeros = Tensor::vector({0, 0});
  auto y = layer_norm(tape, Tensor::matrix({{1, -1}}), ones, zeros, 1e-300);
  CHECK(y.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.value()(0, 1) == doctest::Approx(-1.0).epsilon(1e-12));

  Tensor beta = Tensor::vector({0.5, -2.0, 3.0});
  auto c = layer_norm(tape, Tensor::matrix({{4.2, 4.2, 4.2}}), Tensor::vector({2, 3, 4}), beta);
  CHECK(c.value() == beta.value());

  CHECK_THROWS_AS(layer_norm(tape, Tensor::zeros({2, 3}), ones, zeros), DimensionError);
}

TEST_CASE("layer_norm rows have zero mean and unit population variance") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor(rng, 6, 9, false, -5.0, 5.0);
  Tape tape;
  auto y = layer_norm(tape, x, Tensor::from_flat({9}, std::vector<double>(9, 1.0)), Tensor::zeros({9}));
  for (Index r = 0; r < 6; ++r) {
    const double mu = y.value().row(r).mean();
    const double var = (y.value().row(r).array() - mu).square().mean();
    CHECK(std::abs(mu) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-3);  // eps = 1e-5 shrinks it slightly
  }
}

TEST_CASE("layer_norm gradient against central differences") {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor(rng, 3, 5);
  Tensor g = random_tensor(rng, 1, 5);
  Tensor b = random_tensor(rng, 1, 5);
  auto report = gradient_check([&](Tape& t) { return project(t, layer_norm(t, x, g, b), 1); },
                               {x, g, b}, {"x", "gamma", "beta"}, strict());
  CHECK(report.max_rel_error < 1e-5);
}

TEST_CASE("cross entropy examples") {
  Tape tape;
  std::vector<int> labels{3};
  auto uniform = cross_entropy_loss(tape, Tensor::zeros({1, 7}), labels);
  CHECK(std::abs(uniform.item() - 1.9459101490553133051) < 1e-14);

  std::vector<int> zero{0};
  auto sat = cross_entropy_loss(tape, Tensor::matrix({{100, 0, 0}}), zero);
  CHECK(sat.item() < 1e-10);

  // 40-digit reference: mean of log-sum-exp minus target logit
  Tensor logits = Tensor::matrix({{0.3, -1.2, 2.0, 0.5, 0.0},
                                  {1.5, 1.5, -0.7, 0.2, -2.0},
                                  {-0.4, 0.9, 0.1, 3.1, -1.0},
                                  {2.2, -0.3, 0.8, 0.0, 1.1}});
  std::vector<int> ys{2, 0, 4, 1};
  CHECK(std::abs(cross_entropy_loss(tape, logits, ys).item() - 2.1751178341072594828) < 1e-14);

  std::vector<int> bad{0, 5, 0, 0};
  try {
    cross_entropy_loss(tape, logits, bad);
    FAIL("expected LabelError");
  } catch (const LabelError& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
}

TEST_CASE("backward contract") {
  Tape tape;
  Tensor x = Tensor::vector({1, 2}, true);
  auto y = scale(tape, x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
  Tape other;
  auto loss = sum(other, x);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("repeated backward accumulates additively") {
  std::mt19937_64 rng(13);
  Tensor a = random_tensor(rng, 2, 3);
  Tensor b = random_tensor(rng, 3, 2);
  Tape tape;
  auto loss = sum(tape, relu(tape, matmul(tape, a, b)));
  tape.backward(loss);
  const Matrix once = a.grad();
  tape.backward(loss);
  CHECK((a.grad() - 2.0 * once).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, 3, 4);
    Tensor w = random_tensor(rng, 4, 4);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    const double ca = u(rng), cb = u(rng);
    auto l1 = [&](Tape& t) { return mean(t, softmax(t, matmul(t, x, w), 1)); };
    Tensor gamma(Matrix::Ones(1, 4));
    Tensor beta(Matrix::Zero(1, 4));
    auto l2 = [&](Tape& t) { return project(t, layer_norm(t, matmul(t, x, w), gamma, beta), 3); };

    auto grads = [&](auto&& fn) {
      x.zero_grad();
      Tape t;
      t.backward(fn(t));
      return x.grad();
    };
    const Matrix g1 = grads(l1);
    const Matrix g2 = grads(l2);
    const Matrix combined = grads([&](Tape& t) { return add(t, scale(t, l1(t), ca), scale(t, l2(t), cb)); });
    CHECK((combined - (ca * g1 + cb * g2)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("gradient_check examples") {
  auto square_sum = [](Tape& t, const Tensor& x) { return sum(t, mul(t, x, x)); };
  auto report = gradient_check(square_sum, Tensor::vector({1, 2}, true), 1e-4, 1e-8);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-8);

  auto kink = gradient_check([](Tape& t, const Tensor& x) { return sum(t, relu(t, x)); },
                             Tensor::vector({0.0}, true), 1e-4, 1e-5);
  CHECK(kink.kinks_excluded == 1);
  CHECK(kink.checked == 0);
}

TEST_CASE("gradient_check flags non-finite values") {
  auto blowup = [](Tape& t, const Tensor& x) {
    return sum(t, scale(t, x, std::numeric_limits<double>::infinity()));
  };
  CHECK_THROWS_AS(gradient_check(blowup, Tensor::vector({1.0}, true), 1e-4, 1e-5), NumericError);
}

TEST_CASE("every primitive passes central differences at random points") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = random_tensor(rng, 4, 3);
    Tensor b = random_tensor(rng, 4, 3);
    Tensor w = random_tensor(rng, 3, 5);
    Tensor bias = Tensor(Shape{5}, random_tensor(rng, 1, 5).value(), true);
    Tensor s = Tensor::scalar(0.7, true);
    Tensor table = random_tensor(rng, 2, 3);
    std::vector<Index> rows{3, 0, 3, 1};
    std::vector<int> labels{4, 0, 2, 1};

    struct Case {
      const char* name;
      std::function<Tensor(Tape&)> fn;
      std::vector<Tensor> params;
    };
    std::vector<Case> cases = {
        {"matmul", [&](Tape& t) { return project(t, matmul(t, a, w), 1); }, {a, w}},
        {"transpose", [&](Tape& t) { return project(t, transpose(t, a), 2); }, {a}},
        {"add", [&](Tape& t) { return project(t, add(t, a, b), 3); }, {a, b}},
        {"sub", [&](Tape& t) { return project(t, sub(t, a, b), 4); }, {a, b}},
        {"mul", [&](Tape& t) { return project(t, mul(t, a, b), 5); }, {a, b}},
        {"scalar-mul", [&](Tape& t) { return project(t, mul(t, s, a), 6); }, {a, s}},
        {"scale", [&](Tape& t) { return project(t, scale(t, a, -1.3), 7); }, {a}},
        {"relu", [&](Tape& t) { return project(t, relu(t, a), 8); }, {a}},
        {"mean", [&](Tape& t) { return mean(t, mul(t, a, a)); }, {a}},
        {"affine", [&](Tape& t) { return project(t, affine(t, a, w, bias), 9); }, {a, w, bias}},
        {"add_bias", [&](Tape& t) { return project(t, add_bias(t, matmul(t, a, w), bias), 10); }, {a, w, bias}},
        {"softmax-rows", [&](Tape& t) { return project(t, softmax(t, a, 1), 11); }, {a}},
        {"softmax-cols", [&](Tape& t) { return project(t, softmax(t, a, 0), 12); }, {a}},
        {"cross-entropy", [&](Tape& t) { return cross_entropy_loss(t, matmul(t, a, w), labels); }, {a, w}},
        {"select_rows", [&](Tape& t) { return project(t, select_rows(t, a, rows), 13); }, {a}},
        {"column_block", [&](Tape& t) { return project(t, column_block(t, a, 1, 2), 14); }, {a}},
        {"concat_columns",
         [&](Tape& t) {
           std::vector<Tensor> parts{a, b};
           return project(t, concat_columns(t, parts), 15);
         },
         {a, b}},
        {"stack_tokens",
         [&](Tape& t) {
           std::vector<Tensor> parts{a, b};
           return project(t, stack_tokens(t, parts), 16);
         },
         {a, b}},
        {"group_scores", [&](Tape& t) { return project(t, group_scores(t, a, b, 2, 0.6), 17); }, {a, b}},
        {"group_mix",
         [&](Tape& t) { return project(t, group_mix(t, softmax(t, group_scores(t, a, b, 2, 1.0), 1), b, 2), 18); },
         {a, b}},
        {"add_group_broadcast", [&](Tape& t) { return project(t, add_group_broadcast(t, a, table), 19); }, {a, table}},
    };
    for (const auto& c : cases) {
      CAPTURE(c.name);
      auto report = gradient_check(c.fn, c.params, {}, strict());
      CHECK(report.max_rel_error < 1e-5);
    }
  }
}

TEST_CASE("forward pass is bit-deterministic") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tensor x = random_tensor(rng, 5, 4);
    Tensor w = random_tensor(rng, 4, 4);
    Tape t;
    return layer_norm(t, softmax(t, matmul(t, x, w), 1), Tensor(Matrix::Ones(1, 4)), Tensor(Matrix::Zero(1, 4))).value();
  };
  CHECK(run() == run());
}
