#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "aslip/rng.hpp"

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape records every operation of one forward pass in execution order; Var
// is a handle to a recorded value. backward() walks the tape once in reverse.
// Tapes are single-use: build a fresh one for every forward pass.

namespace aslip::ag {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename Scalar>
struct Tensor {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Vector values;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), values(Vector::Zero(numel(shape))) {}
  Tensor(Shape s, Vector v);

  Index size() const { return values.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(Index axis) const { return shape.at(static_cast<std::size_t>(axis)); }
  Scalar item() const;

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, values.template cast<Other>());
  }
};

/// A learnable leaf. Gradients accumulate into `grad` across backward passes
/// until zero_grad().
template <typename Scalar>
struct Parameter {
  using Vector = typename Tensor<Scalar>::Vector;

  std::string name;
  Tensor<Scalar> value;
  Vector grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(Vector::Zero(value.size())) {}

  void zero_grad() { grad.setZero(value.size()); }
};

enum class Mode { Train, Eval };

/// Running statistics of one batch-norm layer. Not a Parameter: updated by the
/// forward pass in train mode, never by the optimizer.
template <typename Scalar>
struct BatchNormState {
  using Vector = typename Tensor<Scalar>::Vector;

  Vector running_mean;
  Vector running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  bool initialized = false;

  BatchNormState() = default;
  explicit BatchNormState(Index features)
      : running_mean(Vector::Zero(features)), running_var(Vector::Ones(features)) {}
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename Scalar>
class Tape {
 public:
  using Vector = typename Tensor<Scalar>::Vector;
  using BackwardFn = std::function<void(Tape&, const Vector& out_grad)>;

  Tape() = default;
  /// A tape with gradients disabled records values only (inference).
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}

  Var constant(Tensor<Scalar> value);
  /// A leaf whose gradient is kept on the tape (read it with grad()).
  Var variable(Tensor<Scalar> value);
  /// A leaf bound to a Parameter; backward() adds into p.grad when p.trainable.
  Var parameter(Parameter<Scalar>& p);

  const Tensor<Scalar>& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool has_grad(Var v) const { return node(v).has_grad; }
  const Vector& grad(Var v) const;

  /// Gradient buffer of an input, zero-initialized on first access.
  Vector& accumulator(Var v);

  Var record(Tensor<Scalar> value, bool requires_grad, BackwardFn fn);

  /// Propagate d(loss)/d(.) to every node; loss must hold exactly one value.
  /// A tape supports a single backward pass.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Vector grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// Operations. Shapes use the leading axis as batch (N) where relevant.

template <typename Scalar> Var add(Tape<Scalar>& tape, Var a, Var b);
template <typename Scalar> Var sub(Tape<Scalar>& tape, Var a, Var b);
template <typename Scalar> Var mul(Tape<Scalar>& tape, Var a, Var b);
template <typename Scalar> Var scale(Tape<Scalar>& tape, Var a, Scalar s);

template <typename Scalar> Var sum(Tape<Scalar>& tape, Var a);
template <typename Scalar> Var mean(Tape<Scalar>& tape, Var a);
/// Mean over one axis; the axis is removed from the shape.
template <typename Scalar> Var mean_axis(Tape<Scalar>& tape, Var a, Index axis);
/// Insert a new axis of extent `count` at `axis`, repeating the input.
template <typename Scalar> Var broadcast_axis(Tape<Scalar>& tape, Var a, Index axis, Index count);
template <typename Scalar> Var reshape(Tape<Scalar>& tape, Var a, Shape shape);
template <typename Scalar> Var concat(Tape<Scalar>& tape, const std::vector<Var>& parts, Index axis);

template <typename Scalar> Var relu(Tape<Scalar>& tape, Var a);
template <typename Scalar> Var sigmoid(Tape<Scalar>& tape, Var a);
template <typename Scalar> Var tanh(Tape<Scalar>& tape, Var a);
template <typename Scalar> Var softplus(Tape<Scalar>& tape, Var a);
template <typename Scalar> Var softmax(Tape<Scalar>& tape, Var a, Index axis);

/// Inverted dropout; identity (no node recorded) in eval mode or when p == 0.
template <typename Scalar> Var dropout(Tape<Scalar>& tape, Var a, double p, Mode mode, Rng& rng);

/// x [N, In], weight [Out, In], bias [Out] -> [N, Out]
template <typename Scalar> Var linear(Tape<Scalar>& tape, Var x, Var weight, Var bias);

/// Same-padded, stride-1 cross-correlation. x [N, Cin, H, W],
/// kernels [Cout, Cin, kh, kw] (odd extents), bias [Cout] -> [N, Cout, H, W].
template <typename Scalar> Var conv2d(Tape<Scalar>& tape, Var x, Var kernels, Var bias);

/// x [N, Cin, T], kernels [Cout, Cin, k] (odd k), bias [Cout] -> [N, Cout, T].
template <typename Scalar> Var conv1d(Tape<Scalar>& tape, Var x, Var kernels, Var bias);

/// Normalizes over every axis except 1 (features). Train mode uses batch
/// statistics and updates `state`; eval mode uses the running statistics.
template <typename Scalar>
Var batchnorm(Tape<Scalar>& tape, Var x, Var gamma, Var beta, BatchNormState<Scalar>& state, Mode mode);

/// Max pooling along axis 2 of [N, C, H, W] (the mel axis) with window and
/// stride `pool`; W (time) is untouched. H_out = floor(H / pool).
template <typename Scalar> Var max_pool_freq(Tape<Scalar>& tape, Var x, Index pool);

/// x [N, K, R, T], weights [N, K, T] -> [N, R, T]: sum_k w[n,k,t] * x[n,k,r,t].
template <typename Scalar> Var channel_fuse(Tape<Scalar>& tape, Var x, Var weights);

/// x [N, C, T], weights [N, T] -> [N, C]: sum_t w[n,t] * x[n,c,t].
template <typename Scalar> Var attention_pool(Tape<Scalar>& tape, Var x, Var weights);

// ---------------------------------------------------------------------------
// Adam with classic bias correction; weight decay is an L2 term added to the
// gradient before the moment updates.

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename Scalar>
struct AdamState {
  using Vector = typename Tensor<Scalar>::Vector;

  AdamConfig config;
  std::int64_t step = 0;
  std::map<std::string, Vector> first_moment;
  std::map<std::string, Vector> second_moment;
};

/// One update of every trainable parameter; frozen parameters are skipped
/// entirely (their moments are not created or touched).
template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state);

}  // namespace aslip::ag
