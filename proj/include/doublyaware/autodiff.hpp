#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every primitive applied during a forward pass; each node
// owns its value (and gradient once backward runs). Nodes are appended in
// evaluation order, so reverse creation order is a valid topological order.
// Parameters enter the tape as leaves bound to a ParamVector; gradients for
// them accumulate into one flat array per binding with the vector's layout.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "doublyaware/tensor.hpp"

namespace doublyaware::ad {

struct Segment {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Flat parameter storage with a fixed (name, shape) layout.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<std::pair<std::string, std::vector<std::uint32_t>>> layout);

  std::span<const Segment> layout() const { return layout_; }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<double> segment(std::size_t i) { return {values_.data() + layout_[i].offset, layout_[i].size}; }
  std::span<const double> segment(std::size_t i) const {
    return {values_.data() + layout_[i].offset, layout_[i].size};
  }
  std::size_t size() const { return values_.size(); }
  bool same_layout(const ParamVector& o) const;
  bool operator==(const ParamVector& o) const { return same_layout(o) && values_ == o.values_; }

 private:
  std::vector<Segment> layout_;
  std::vector<double> values_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

enum class Op {
  constant,
  parameter,
  affine,
  elu,
  tanh,
  exp,
  log,
  square,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  sum,
  mean,
  row_sum,
  softmax_rows,
  clip_st,
  concat_cols,
  slice_cols,
};

const char* op_name(Op op);

class Tape {
 public:
  Var constant(Matrix value);
  // Registers a parameter vector; returns the binding id used by parameter().
  int bind(const ParamVector& params);
  // Leaf viewing segment `seg` of a bound vector as a rows x cols matrix.
  Var parameter(int binding, std::size_t seg, std::size_t rows, std::size_t cols);

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  double scalar(Var v) const;
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].op; }

  // Seeds d(loss)/d(loss) = 1 and propagates to every bound parameter.
  void backward(Var loss);
  // Flat gradient for a binding, laid out like the bound ParamVector.
  const std::vector<double>& gradient(int binding) const { return grads_[static_cast<std::size_t>(binding)]; }

  // Low-level node construction used by the primitive functions.
  Var push(Op op, Matrix value, int a = -1, int b = -1, int c = -1, double s0 = 0.0, double s1 = 0.0);

 private:
  struct Node {
    Op op = Op::constant;
    int a = -1, b = -1, c = -1;
    double s0 = 0.0, s1 = 0.0;
    int binding = -1;
    std::size_t offset = 0;
    bool requires_grad = false;
    Matrix value;
    Matrix grad;
  };
  void accumulate(int id, const Matrix& g);
  Matrix& grad_of(int id);
  void backward_node(Node& n);

  std::vector<Node> nodes_;
  std::vector<const ParamVector*> bound_;
  std::vector<std::vector<double>> grads_;
};

// Primitives. Binary elementwise ops accept b with shape (1 x C), (R x 1) or
// (1 x 1) broadcast against a (R x C).
Var affine(Var x, Var w, Var b);  // x[R x in] * w[in x out] + b[1 x out]
Var elu(Var x);
Var tanh(Var x);
Var exp(Var x);
Var log(Var x);
Var square(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
Var sum(Var x);
Var mean(Var x);
Var row_sum(Var x);
Var softmax_rows(Var x);
// Forward clips to [lo, hi]; backward passes the gradient through unchanged.
Var clip_st(Var x, double lo, double hi);
Var concat_cols(Var a, Var b);
Var slice_cols(Var x, std::size_t begin, std::size_t end);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }
inline Var operator*(Var x, double s) { return scale(x, s); }
inline Var operator+(Var x, double s) { return add_scalar(x, s); }
inline Var operator-(Var x, double s) { return add_scalar(x, -s); }
inline Var operator-(Var x) { return scale(x, -1.0); }

// Per-tape view of a ParamVector; caches one leaf per segment.
class ParamHandle {
 public:
  ParamHandle(Tape& tape, const ParamVector& params);
  Var segment(std::size_t i);
  int binding() const { return binding_; }
  Tape& tape() { return *tape_; }
  const std::vector<double>& gradient() const { return tape_->gradient(binding_); }

 private:
  Tape* tape_;
  const ParamVector* params_;
  int binding_;
  std::vector<int> cache_;
};

using LossFn = std::function<Var(Tape&, ParamHandle&)>;

// Exact reverse-mode gradient of loss_fn at `at`.
std::vector<double> grad(const LossFn& loss_fn, const ParamVector& at);
double evaluate(const LossFn& loss_fn, const ParamVector& at);

}  // namespace doublyaware::ad
