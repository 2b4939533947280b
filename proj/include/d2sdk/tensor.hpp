#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to a value buffer and an optional gradient
// buffer. Operations are free functions that take the Tape they record on as
// their first argument; the tape is rebuilt for every forward pass, so the
// graph topology can change from one call to the next. Parameters are leaf
// tensors that outlive any single tape and accumulate gradients until
// zero_grad() is called.
//
// Storage is always an Eigen row-major matrix: a tensor of shape
// [d0, d1, ..., dn] is held as (d0*...*d(n-1)) x dn, a vector [n] as 1 x n and
// a scalar as 1 x 1.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace d2sdk {

using Scalar = double;
using Index = Eigen::Index;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using Shape = std::vector<Index>;

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

struct TensorData {
  Shape shape;
  Matrix value;
  Matrix grad;  // empty until the first accumulation
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  // 2-D tensor taking ownership of `value`.
  explicit Tensor(Matrix value, bool requires_grad = false);
  Tensor(Shape shape, Matrix value, bool requires_grad = false);

  static Tensor scalar(Scalar v, bool requires_grad = false);
  static Tensor vector(std::span<const Scalar> values, bool requires_grad = false);
  static Tensor vector(std::initializer_list<Scalar> values, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows,
                       bool requires_grad = false);
  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  // Row-major flat buffer reshaped to `shape`.
  static Tensor from_flat(const Shape& shape, std::span<const Scalar> flat,
                          bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  Index rank() const { return static_cast<Index>(d_->shape.size()); }
  Index rows() const { return d_->value.rows(); }
  Index cols() const { return d_->value.cols(); }
  Index numel() const { return d_->value.size(); }

  const Matrix& value() const { return d_->value; }
  Matrix& mutable_value() { return d_->value; }
  Scalar item() const;
  std::span<const Scalar> flat() const { return {d_->value.data(), static_cast<std::size_t>(d_->value.size())}; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool on) { d_->requires_grad = on; }
  bool has_grad() const { return d_->grad.size() != 0; }
  // Gradient buffer; an all-zero matrix of the value's shape if nothing has
  // been accumulated yet.
  Matrix grad() const;
  void zero_grad() { d_->grad.resize(0, 0); }

  TensorData* data() const { return d_.get(); }
  bool same_as(const Tensor& other) const { return d_ == other.d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// Adds `g` into t's gradient buffer when t requires grad.
void accumulate_grad(TensorData& t, const Eigen::Ref<const Matrix>& g);

// Receives the output node; its `grad` holds the incoming cotangent and its
// `value` the forward result.
using BackwardFn = std::function<void(const TensorData& out)>;

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  // Wraps `value` into the output tensor of an operation. The entry is only
  // recorded when the tape is recording and some input requires grad.
  Tensor record(Shape shape, Matrix value, std::vector<Tensor> inputs, BackwardFn backward);

  // Seeds d(loss)=1 and replays recorded entries in reverse order.
  // Intermediate gradients are reset first, leaf gradients accumulate.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    Tensor output;
    std::vector<Tensor> inputs;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool recording_;
};

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);

enum class Elementwise { Add, Sub, Mul };

// Binary ops require equal shapes or a single-element operand on either side.
Tensor elementwise(Tape& tape, Elementwise kind, const Tensor& a, const Tensor& b);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, Scalar factor);
Tensor relu(Tape& tape, const Tensor& a);
Tensor mean(Tape& tape, const Tensor& a);
Tensor sum(Tape& tape, const Tensor& a);

// x [R x C] plus a [C] bias broadcast over rows.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
// x·W + b with W [in x out]; `bias` may be undefined.
Tensor affine(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor softmax(Tape& tape, const Tensor& x, int axis);

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Scalar eps = 1e-5);

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy_loss(Tape& tape, const Tensor& logits, std::span<const int> labels);

// Row gather; `rows` may repeat and be in any order.
Tensor select_rows(Tape& tape, const Tensor& x, std::span<const Index> rows);

// K tensors [B x d] interleaved into [B*K x d] with row b*K+k from part k.
Tensor stack_tokens(Tape& tape, std::span<const Tensor> parts);

Tensor column_block(Tape& tape, const Tensor& x, Index start, Index width);
Tensor concat_columns(Tape& tape, std::span<const Tensor> parts);

// Grouped attention primitives. `groups` independent sequences are stacked
// row-wise: queries [G*nq x dh], keys [G*nk x dh].
// group_scores -> [G*nq x nk], entry (g*nq+i, j) = scale * <q_{g,i}, k_{g,j}>.
Tensor group_scores(Tape& tape, const Tensor& queries, const Tensor& keys, Index groups,
                    Scalar scale);
// weights [G*nq x nk], values [G*nk x dv] -> [G*nq x dv].
Tensor group_mix(Tape& tape, const Tensor& weights, const Tensor& values, Index groups);

// tokens [G*K x d] plus table [K x d], row g*K+k gets table row k.
Tensor add_group_broadcast(Tape& tape, const Tensor& tokens, const Tensor& table);

}  // namespace d2sdk
