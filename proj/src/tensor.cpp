#include "d2sdk/tensor.hpp"

#include "d2sdk/errors.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace d2sdk {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

namespace {

std::pair<Index, Index> storage_dims(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  for (Index s : shape) {
    if (s <= 0) throw DimensionError("tensor shape entries must be positive, got " + shape_str(shape));
  }
  Index cols = shape.back();
  return {shape_numel(shape) / cols, cols};
}

bool is_single(const Tensor& t) { return t.numel() == 1; }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor::Tensor(Matrix value, bool requires_grad) : d_(std::make_shared<TensorData>()) {
  d_->shape = {value.rows(), value.cols()};
  d_->value = std::move(value);
  d_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, Matrix value, bool requires_grad) : d_(std::make_shared<TensorData>()) {
  auto [r, c] = storage_dims(shape);
  if (value.rows() != r || value.cols() != c) {
    throw DimensionError("tensor storage " + std::to_string(value.rows()) + "x" +
                         std::to_string(value.cols()) + " does not hold shape " + shape_str(shape));
  }
  d_->shape = std::move(shape);
  d_->value = std::move(value);
  d_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(Scalar v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(Shape{}, std::move(m), requires_grad);
}

Tensor Tensor::vector(std::span<const Scalar> values, bool requires_grad) {
  const auto n = static_cast<Index>(values.size());
  return from_flat(Shape{n}, values, requires_grad);
}

Tensor Tensor::vector(std::initializer_list<Scalar> values, bool requires_grad) {
  return vector(std::span<const Scalar>(values.begin(), values.size()), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<Scalar>> rows, bool requires_grad) {
  const auto r = static_cast<Index>(rows.size());
  const auto c = r ? static_cast<Index>(rows.begin()->size()) : 0;
  Matrix m(r, c);
  Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Index>(row.size()) != c) throw DimensionError("ragged matrix literal");
    Index j = 0;
    for (Scalar v : row) m(i, j++) = v;
    ++i;
  }
  return Tensor(std::move(m), requires_grad);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto [r, c] = storage_dims(shape);
  return Tensor(shape, Matrix::Zero(r, c), requires_grad);
}

Tensor Tensor::from_flat(const Shape& shape, std::span<const Scalar> flat, bool requires_grad) {
  auto [r, c] = storage_dims(shape);
  if (static_cast<Index>(flat.size()) != r * c) {
    throw DimensionError("flat buffer of " + std::to_string(flat.size()) +
                         " values does not fill shape " + shape_str(shape));
  }
  Matrix m = Eigen::Map<const Matrix>(flat.data(), r, c);
  return Tensor(shape, std::move(m), requires_grad);
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return d_->value(0, 0);
}

Matrix Tensor::grad() const {
  if (has_grad()) return d_->grad;
  return Matrix::Zero(d_->value.rows(), d_->value.cols());
}

void accumulate_grad(TensorData& t, const Eigen::Ref<const Matrix>& g) {
  if (!t.requires_grad) return;
  if (t.grad.size() == 0) {
    t.grad = g;
  } else {
    t.grad += g;
  }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::record(Shape shape, Matrix value, std::vector<Tensor> inputs, BackwardFn backward) {
  bool needs = false;
  if (recording_) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  Tensor out(std::move(shape), std::move(value), needs);
  if (needs) entries_.push_back({out, std::move(inputs), std::move(backward)});
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  std::ptrdiff_t start = -1;
  for (auto i = static_cast<std::ptrdiff_t>(entries_.size()) - 1; i >= 0; --i) {
    if (entries_[i].output.same_as(loss)) {
      start = i;
      break;
    }
  }
  if (start < 0) throw ContractError("backward(): loss tensor was not recorded on this tape");

  for (std::ptrdiff_t i = 0; i <= start; ++i) entries_[i].output.zero_grad();
  loss.data()->grad = Matrix::Ones(1, 1);
  for (std::ptrdiff_t i = start; i >= 0; --i) {
    const auto& e = entries_[i];
    if (!e.output.has_grad()) continue;
    e.backward(*e.output.data());
  }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace {

void accumulate_bias_grad(TensorData& bias, const Matrix& g) {
  if (!bias.requires_grad) return;
  RowVector col_sum = g.colwise().sum();
  accumulate_grad(bias, Eigen::Map<const Matrix>(col_sum.data(), bias.value.rows(), bias.value.cols()));
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Matrix out = a.value() * b.value();
  auto* pa = a.data();
  auto* pb = b.data();
  return tape.record({a.rows(), b.cols()}, std::move(out), {a, b}, [pa, pb](const TensorData& o) {
    if (pa->requires_grad) accumulate_grad(*pa, o.grad * pb->value.transpose());
    if (pb->requires_grad) accumulate_grad(*pb, pa->value.transpose() * o.grad);
  });
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_rank2(a, "transpose");
  Matrix out = a.value().transpose();
  auto* pa = a.data();
  return tape.record({a.cols(), a.rows()}, std::move(out), {a},
                     [pa](const TensorData& o) { accumulate_grad(*pa, o.grad.transpose()); });
}

Tensor elementwise(Tape& tape, Elementwise kind, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool a_single = !same && is_single(a);
  const bool b_single = !same && !a_single && is_single(b);
  if (!same && !a_single && !b_single) {
    throw DimensionError("elementwise: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const Tensor& big = a_single ? b : a;
  auto expand = [&big](const Tensor& t, bool single) -> Matrix {
    if (single) return Matrix::Constant(big.rows(), big.cols(), t.item());
    return t.value();
  };
  const Matrix av = expand(a, a_single);
  const Matrix bv = expand(b, b_single);
  Matrix out;
  switch (kind) {
    case Elementwise::Add: out = av + bv; break;
    case Elementwise::Sub: out = av - bv; break;
    case Elementwise::Mul: out = av.cwiseProduct(bv); break;
  }
  auto* pa = a.data();
  auto* pb = b.data();
  return tape.record(big.shape(), std::move(out), {a, b}, [pa, pb, kind, a_single, b_single](const TensorData& o) {
    const Matrix& g = o.grad;
    auto push = [](TensorData& t, bool single, const Matrix& full) {
      if (!t.requires_grad) return;
      if (single) {
        accumulate_grad(t, Matrix::Constant(1, 1, full.sum()));
      } else {
        accumulate_grad(t, full);
      }
    };
    auto other = [&g](const TensorData& t, bool single) -> Matrix {
      if (single) return Matrix::Constant(g.rows(), g.cols(), t.value(0, 0));
      return t.value;
    };
    switch (kind) {
      case Elementwise::Add:
        push(*pa, a_single, g);
        push(*pb, b_single, g);
        break;
      case Elementwise::Sub:
        push(*pa, a_single, g);
        push(*pb, b_single, -g);
        break;
      case Elementwise::Mul:
        if (pa->requires_grad) push(*pa, a_single, g.cwiseProduct(other(*pb, b_single)));
        if (pb->requires_grad) push(*pb, b_single, g.cwiseProduct(other(*pa, a_single)));
        break;
    }
  });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) { return elementwise(tape, Elementwise::Add, a, b); }
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) { return elementwise(tape, Elementwise::Sub, a, b); }
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) { return elementwise(tape, Elementwise::Mul, a, b); }

Tensor scale(Tape& tape, const Tensor& a, Scalar factor) {
  Matrix out = a.value() * factor;
  auto* pa = a.data();
  return tape.record(a.shape(), std::move(out), {a},
                     [pa, factor](const TensorData& o) { accumulate_grad(*pa, o.grad * factor); });
}

Tensor relu(Tape& tape, const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  auto* pa = a.data();
  return tape.record(a.shape(), std::move(out), {a}, [pa](const TensorData& o) {
    // subgradient 0 at exactly zero
    Matrix g = (pa->value.array() > 0.0).select(o.grad, 0.0);
    accumulate_grad(*pa, g);
  });
}

Tensor mean(Tape& tape, const Tensor& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().mean());
  auto* pa = a.data();
  return tape.record(Shape{}, std::move(out), {a}, [pa](const TensorData& o) {
    const auto n = static_cast<Scalar>(pa->value.size());
    accumulate_grad(*pa, Matrix::Constant(pa->value.rows(), pa->value.cols(), o.grad(0, 0) / n));
  });
}

Tensor sum(Tape& tape, const Tensor& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  auto* pa = a.data();
  return tape.record(Shape{}, std::move(out), {a}, [pa](const TensorData& o) {
    accumulate_grad(*pa, Matrix::Constant(pa->value.rows(), pa->value.cols(), o.grad(0, 0)));
  });
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_bias");
  if (bias.numel() != x.cols()) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  Matrix out = x.value();
  out.rowwise() += Eigen::Map<const RowVector>(bias.value().data(), x.cols());
  auto* px = x.data();
  auto* pb = bias.data();
  return tape.record(x.shape(), std::move(out), {x, bias}, [px, pb](const TensorData& o) {
    accumulate_grad(*px, o.grad);
    accumulate_bias_grad(*pb, o.grad);
  });
}

Tensor affine(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.cols() != weight.rows()) {
    throw DimensionError("affine: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && bias.numel() != weight.cols()) {
    throw DimensionError("affine: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  Matrix out = x.value() * weight.value();
  std::vector<Tensor> inputs{x, weight};
  TensorData* pb = nullptr;
  if (bias.defined()) {
    out.rowwise() += Eigen::Map<const RowVector>(bias.value().data(), weight.cols());
    inputs.push_back(bias);
    pb = bias.data();
  }
  auto* px = x.data();
  auto* pw = weight.data();
  return tape.record({x.rows(), weight.cols()}, std::move(out), std::move(inputs),
                     [px, pw, pb](const TensorData& o) {
                       if (px->requires_grad) accumulate_grad(*px, o.grad * pw->value.transpose());
                       if (pw->requires_grad) accumulate_grad(*pw, px->value.transpose() * o.grad);
                       if (pb) accumulate_bias_grad(*pb, o.grad);
                     });
}

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  const Shape& shape = x.shape();
  const int rank = static_cast<int>(shape.size());
  const int ax = axis < 0 ? axis + rank : axis;
  if (rank == 0 || ax < 0 || ax >= rank) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= shape[i];
  for (int i = ax + 1; i < rank; ++i) inner *= shape[i];
  const Index n = shape[ax];

  Matrix out(x.rows(), x.cols());
  const Scalar* in = x.value().data();
  Scalar* y = out.data();
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      Scalar mx = in[base];
      for (Index j = 1; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      Scalar total = 0.0;
      for (Index j = 0; j < n; ++j) {
        const Scalar e = std::exp(in[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (Index j = 0; j < n; ++j) y[base + j * inner] /= total;
    }
  }

  auto* px = x.data();
  return tape.record(shape, std::move(out), {x}, [px, outer, inner, n](const TensorData& o) {
    // dx = y * (dy - <dy, y>) per slice
    Matrix dx(o.value.rows(), o.value.cols());
    const Scalar* yv = o.value.data();
    const Scalar* gy = o.grad.data();
    Scalar* gx = dx.data();
    for (Index a = 0; a < outer; ++a) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = a * n * inner + i;
        Scalar dot = 0.0;
        for (Index j = 0; j < n; ++j) dot += gy[base + j * inner] * yv[base + j * inner];
        for (Index j = 0; j < n; ++j) {
          gx[base + j * inner] = yv[base + j * inner] * (gy[base + j * inner] - dot);
        }
      }
    }
    accumulate_grad(*px, dx);
  });
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  const Index d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match last dimension of " +
                         shape_str(x.shape()));
  }
  const Index rows = x.rows();
  Matrix xhat(rows, d);
  Eigen::VectorXd inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = x.value().row(r).mean();
    const Scalar var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  const auto g = Eigen::Map<const RowVector>(gamma.value().data(), d);
  const auto b = Eigen::Map<const RowVector>(beta.value().data(), d);
  Matrix out = xhat.array().rowwise() * g.array();
  out.rowwise() += b;

  auto* px = x.data();
  auto* pg = gamma.data();
  auto* pb = beta.data();
  return tape.record(x.shape(), std::move(out), {x, gamma, beta},
                     [px, pg, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), d](const TensorData& o) {
                       const Matrix& dy = o.grad;
                       if (pg->requires_grad) {
                         RowVector dg = dy.cwiseProduct(xhat).colwise().sum();
                         accumulate_grad(*pg, Eigen::Map<const Matrix>(dg.data(), pg->value.rows(), pg->value.cols()));
                       }
                       accumulate_bias_grad(*pb, dy);
                       if (!px->requires_grad) return;
                       const auto gm = Eigen::Map<const RowVector>(pg->value.data(), d);
                       Matrix dxhat = dy.array().rowwise() * gm.array();
                       Matrix dx(dy.rows(), d);
                       for (Index r = 0; r < dy.rows(); ++r) {
                         const Scalar m1 = dxhat.row(r).mean();
                         const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / static_cast<Scalar>(d);
                         dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                       }
                       accumulate_grad(*px, dx);
                     });
}

Tensor cross_entropy_loss(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  require_rank2(logits, "cross_entropy_loss");
  const Index batch = logits.rows();
  const Index classes = logits.cols();
  if (static_cast<Index>(labels.size()) != batch) {
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
  }
  Matrix probs(batch, classes);
  Scalar total = 0.0;
  for (Index i = 0; i < batch; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= classes) {
      throw LabelError("cross_entropy_loss: label " + std::to_string(y) + " at index " +
                       std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    }
    const Scalar mx = logits.value().row(i).maxCoeff();
    const auto shifted = (logits.value().row(i).array() - mx).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    total += lse - shifted(y);
    probs.row(i) = (shifted - lse).exp();
  }
  Matrix out = Matrix::Constant(1, 1, total / static_cast<Scalar>(batch));
  auto* pl = logits.data();
  std::vector<int> ys(labels.begin(), labels.end());
  return tape.record(Shape{}, std::move(out), {logits},
                     [pl, probs = std::move(probs), ys = std::move(ys)](const TensorData& o) {
                       Matrix g = probs;
                       for (std::size_t i = 0; i < ys.size(); ++i) g(static_cast<Index>(i), ys[i]) -= 1.0;
                       g *= o.grad(0, 0) / static_cast<Scalar>(ys.size());
                       accumulate_grad(*pl, g);
                     });
}

Tensor select_rows(Tape& tape, const Tensor& x, std::span<const Index> rows) {
  require_rank2(x, "select_rows");
  const auto n = static_cast<Index>(rows.size());
  if (n == 0) throw DimensionError("select_rows: empty row selection");
  Matrix out(n, x.cols());
  for (Index i = 0; i < n; ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) {
      throw IndexError("select_rows: row " + std::to_string(rows[i]) + " outside " +
                       shape_str(x.shape()));
    }
    out.row(i) = x.value().row(rows[i]);
  }
  auto* px = x.data();
  std::vector<Index> idx(rows.begin(), rows.end());
  return tape.record({n, x.cols()}, std::move(out), {x}, [px, idx = std::move(idx)](const TensorData& o) {
    Matrix g = Matrix::Zero(px->value.rows(), px->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += o.grad.row(static_cast<Index>(i));
    accumulate_grad(*px, g);
  });
}

Tensor stack_tokens(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("stack_tokens: no parts");
  const auto k = static_cast<Index>(parts.size());
  const Index batch = parts[0].rows();
  const Index d = parts[0].cols();
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != batch || p.cols() != d) {
      throw DimensionError("stack_tokens: part " + shape_str(p.shape()) + " differs from " +
                           shape_str(parts[0].shape()));
    }
  }
  Matrix out(batch * k, d);
  for (Index b = 0; b < batch; ++b) {
    for (Index j = 0; j < k; ++j) out.row(b * k + j) = parts[j].value().row(b);
  }
  std::vector<TensorData*> ptrs;
  for (const auto& p : parts) ptrs.push_back(p.data());
  return tape.record({batch * k, d}, std::move(out), {parts.begin(), parts.end()},
                     [ptrs = std::move(ptrs), batch, k, d](const TensorData& o) {
                       for (Index j = 0; j < k; ++j) {
                         if (!ptrs[j]->requires_grad) continue;
                         Matrix g(batch, d);
                         for (Index b = 0; b < batch; ++b) g.row(b) = o.grad.row(b * k + j);
                         accumulate_grad(*ptrs[j], g);
                       }
                     });
}

Tensor column_block(Tape& tape, const Tensor& x, Index start, Index width) {
  require_rank2(x, "column_block");
  if (start < 0 || width <= 0 || start + width > x.cols()) {
    throw DimensionError("column_block: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + width) + ") outside " + shape_str(x.shape()));
  }
  Matrix out = x.value().middleCols(start, width);
  auto* px = x.data();
  return tape.record({x.rows(), width}, std::move(out), {x}, [px, start, width](const TensorData& o) {
    Matrix g = Matrix::Zero(px->value.rows(), px->value.cols());
    g.middleCols(start, width) = o.grad;
    accumulate_grad(*px, g);
  });
}

Tensor concat_columns(Tape& tape, std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_columns: no parts");
  const Index rows = parts[0].rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != rows) {
      throw DimensionError("concat_columns: part " + shape_str(p.shape()) + " has " +
                           std::to_string(p.rows()) + " rows, expected " + std::to_string(rows));
    }
    total += p.cols();
  }
  Matrix out(rows, total);
  std::vector<TensorData*> ptrs;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    ptrs.push_back(p.data());
  }
  return tape.record({rows, total}, std::move(out), {parts.begin(), parts.end()},
                     [ptrs = std::move(ptrs)](const TensorData& o) {
                       Index offset = 0;
                       for (auto* p : ptrs) {
                         const Index w = p->value.cols();
                         if (p->requires_grad) accumulate_grad(*p, o.grad.middleCols(offset, w));
                         offset += w;
                       }
                     });
}

Tensor group_scores(Tape& tape, const Tensor& queries, const Tensor& keys, Index groups, Scalar scale) {
  require_rank2(queries, "group_scores");
  require_rank2(keys, "group_scores");
  if (groups <= 0 || queries.rows() % groups != 0 || keys.rows() % groups != 0) {
    throw DimensionError("group_scores: " + std::to_string(groups) + " groups do not divide " +
                         shape_str(queries.shape()) + " / " + shape_str(keys.shape()));
  }
  if (queries.cols() != keys.cols()) {
    throw DimensionError("group_scores: query width " + shape_str(queries.shape()) +
                         " differs from key width " + shape_str(keys.shape()));
  }
  const Index nq = queries.rows() / groups;
  const Index nk = keys.rows() / groups;
  Matrix out(groups * nq, nk);
  for (Index g = 0; g < groups; ++g) {
    out.middleRows(g * nq, nq).noalias() =
        scale * queries.value().middleRows(g * nq, nq) * keys.value().middleRows(g * nk, nk).transpose();
  }
  auto* pq = queries.data();
  auto* pk = keys.data();
  return tape.record({groups * nq, nk}, std::move(out), {queries, keys},
                     [pq, pk, groups, nq, nk, scale](const TensorData& o) {
                       if (pq->requires_grad) {
                         Matrix dq(pq->value.rows(), pq->value.cols());
                         for (Index g = 0; g < groups; ++g) {
                           dq.middleRows(g * nq, nq).noalias() =
                               scale * o.grad.middleRows(g * nq, nq) * pk->value.middleRows(g * nk, nk);
                         }
                         accumulate_grad(*pq, dq);
                       }
                       if (pk->requires_grad) {
                         Matrix dk(pk->value.rows(), pk->value.cols());
                         for (Index g = 0; g < groups; ++g) {
                           dk.middleRows(g * nk, nk).noalias() =
                               scale * o.grad.middleRows(g * nq, nq).transpose() * pq->value.middleRows(g * nq, nq);
                         }
                         accumulate_grad(*pk, dk);
                       }
                     });
}

Tensor group_mix(Tape& tape, const Tensor& weights, const Tensor& values, Index groups) {
  require_rank2(weights, "group_mix");
  require_rank2(values, "group_mix");
  if (groups <= 0 || weights.rows() % groups != 0 || values.rows() % groups != 0) {
    throw DimensionError("group_mix: " + std::to_string(groups) + " groups do not divide " +
                         shape_str(weights.shape()) + " / " + shape_str(values.shape()));
  }
  const Index nq = weights.rows() / groups;
  const Index nk = values.rows() / groups;
  if (weights.cols() != nk) {
    throw DimensionError("group_mix: weights " + shape_str(weights.shape()) + " need " +
                         std::to_string(nk) + " columns for values " + shape_str(values.shape()));
  }
  const Index dv = values.cols();
  Matrix out(groups * nq, dv);
  for (Index g = 0; g < groups; ++g) {
    out.middleRows(g * nq, nq).noalias() =
        weights.value().middleRows(g * nq, nq) * values.value().middleRows(g * nk, nk);
  }
  auto* pw = weights.data();
  auto* pv = values.data();
  return tape.record({groups * nq, dv}, std::move(out), {weights, values},
                     [pw, pv, groups, nq, nk](const TensorData& o) {
                       if (pw->requires_grad) {
                         Matrix dw(pw->value.rows(), pw->value.cols());
                         for (Index g = 0; g < groups; ++g) {
                           dw.middleRows(g * nq, nq).noalias() =
                               o.grad.middleRows(g * nq, nq) * pv->value.middleRows(g * nk, nk).transpose();
                         }
                         accumulate_grad(*pw, dw);
                       }
                       if (pv->requires_grad) {
                         Matrix dv(pv->value.rows(), pv->value.cols());
                         for (Index g = 0; g < groups; ++g) {
                           dv.middleRows(g * nk, nk).noalias() =
                               pw->value.middleRows(g * nq, nq).transpose() * o.grad.middleRows(g * nq, nq);
                         }
                         accumulate_grad(*pv, dv);
                       }
                     });
}

Tensor add_group_broadcast(Tape& tape, const Tensor& tokens, const Tensor& table) {
  require_rank2(tokens, "add_group_broadcast");
  require_rank2(table, "add_group_broadcast");
  const Index k = table.rows();
  if (tokens.cols() != table.cols() || tokens.rows() % k != 0) {
    throw DimensionError("add_group_broadcast: table " + shape_str(table.shape()) +
                         " does not tile tokens " + shape_str(tokens.shape()));
  }
  Matrix out = tokens.value();
  const Index groups = tokens.rows() / k;
  for (Index g = 0; g < groups; ++g) out.middleRows(g * k, k) += table.value();
  auto* pt = tokens.data();
  auto* pe = table.data();
  return tape.record(tokens.shape(), std::move(out), {tokens, table}, [pt, pe, k, groups](const TensorData& o) {
    accumulate_grad(*pt, o.grad);
    if (pe->requires_grad) {
      Matrix g = Matrix::Zero(k, pe->value.cols());
      for (Index i = 0; i < groups; ++i) g += o.grad.middleRows(i * k, k);
      accumulate_grad(*pe, g);
    }
  });
}

}  // namespace d2sdk
