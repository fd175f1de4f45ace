#include "doublyaware/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "doublyaware/common.hpp"
#include "doublyaware/kernels.hpp"

namespace doublyaware::ad {

ParamVector::ParamVector(std::vector<std::pair<std::string, std::vector<std::uint32_t>>> layout) {
  std::size_t offset = 0;
  for (auto& [name, shape] : layout) {
    require(!shape.empty(), "ParamVector: segment '" + name + "' has no dimensions");
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    layout_.push_back(Segment{std::move(name), std::move(shape), offset, n});
    offset += n;
  }
  values_.assign(offset, 0.0);
}

bool ParamVector::same_layout(const ParamVector& o) const {
  if (layout_.size() != o.layout_.size()) return false;
  for (std::size_t i = 0; i < layout_.size(); ++i)
    if (layout_[i].name != o.layout_[i].name || layout_[i].shape != o.layout_[i].shape) return false;
  return true;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::constant: return "constant";
    case Op::parameter: return "parameter";
    case Op::affine: return "affine";
    case Op::elu: return "elu";
    case Op::tanh: return "tanh";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::square: return "square";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::add_scalar: return "add_scalar";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::row_sum: return "row_sum";
    case Op::softmax_rows: return "softmax";
    case Op::clip_st: return "clip_st";
    case Op::concat_cols: return "concat_cols";
    case Op::slice_cols: return "slice_cols";
  }
  return "unknown";
}

Var Tape::push(Op op, Matrix value, int a, int b, int c, double s0, double s1) {
  if (!all_finite(value.data)) throw NumericError(op_name(op), "forward value");
  Node n;
  n.op = op;
  n.a = a;
  n.b = b;
  n.c = c;
  n.s0 = s0;
  n.s1 = s1;
  n.value = std::move(value);
  for (int p : {a, b, c})
    if (p >= 0 && nodes_[static_cast<std::size_t>(p)].requires_grad) n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Matrix value) { return push(Op::constant, std::move(value)); }

int Tape::bind(const ParamVector& params) {
  bound_.push_back(&params);
  grads_.emplace_back(params.size(), 0.0);
  return static_cast<int>(bound_.size() - 1);
}

Var Tape::parameter(int binding, std::size_t seg, std::size_t rows, std::size_t cols) {
  const ParamVector& p = *bound_.at(static_cast<std::size_t>(binding));
  const auto values = p.segment(seg);
  require(rows * cols == values.size(), "Tape::parameter: shape does not match segment");
  Var v = push(Op::parameter, Matrix(rows, cols, std::vector<double>(values.begin(), values.end())));
  Node& n = nodes_.back();
  n.binding = binding;
  n.offset = p.layout()[seg].offset;
  n.requires_grad = true;
  return v;
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  require(m.size() == 1, "Tape::scalar: value is not 1x1");
  return m.data[0];
}

Matrix& Tape::grad_of(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() != n.value.size()) n.grad = Matrix(n.value.rows, n.value.cols, 0.0);
  return n.grad;
}

void Tape::accumulate(int id, const Matrix& g) {
  if (id < 0 || !nodes_[static_cast<std::size_t>(id)].requires_grad) return;
  Matrix& dst = grad_of(id);
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
}

namespace {

// Maps a broadcast operand index onto the full (rows x cols) index space.
struct Broadcast {
  std::size_t rows, cols, brows, bcols;
  std::size_t at(std::size_t r, std::size_t c) const {
    return (brows == 1 ? 0 : r) * bcols + (bcols == 1 ? 0 : c);
  }
};

Broadcast broadcast_of(const Matrix& a, const Matrix& b, const char* what) {
  const bool rows_ok = b.rows == a.rows || b.rows == 1;
  const bool cols_ok = b.cols == a.cols || b.cols == 1;
  require(rows_ok && cols_ok, std::string(what) + ": incompatible shapes");
  return {a.rows, a.cols, b.rows, b.cols};
}

template <class F>
Matrix map(const Matrix& x, F f) {
  Matrix y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = f(x.data[i]);
  return y;
}

template <class F>
Matrix zip(const Matrix& a, const Matrix& b, const Broadcast& bc, F f) {
  Matrix y(a.rows, a.cols);
  for (std::size_t r = 0; r < a.rows; ++r)
    for (std::size_t c = 0; c < a.cols; ++c) y(r, c) = f(a(r, c), b.data[bc.at(r, c)]);
  return y;
}

}  // namespace

void Tape::backward(Var loss) {
  require(loss.tape == this, "Tape::backward: variable belongs to another tape");
  const Node& root = nodes_[static_cast<std::size_t>(loss.id)];
  require(root.value.size() == 1, "Tape::backward: loss must be 1x1");
  for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0);
  for (auto& n : nodes_) n.grad = Matrix();
  if (!root.requires_grad) return;
  grad_of(loss.id).data[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (!all_finite(n.grad.data)) throw NumericError(op_name(n.op), "backward gradient");
    backward_node(n);
  }
}

void Tape::backward_node(Node& n) {
  const Matrix& dy = n.grad;
  auto val = [this](int id) -> const Matrix& { return nodes_[static_cast<std::size_t>(id)].value; };
  auto needs = [this](int id) { return id >= 0 && nodes_[static_cast<std::size_t>(id)].requires_grad; };

  switch (n.op) {
    case Op::constant:
      break;
    case Op::parameter: {
      auto& g = grads_[static_cast<std::size_t>(n.binding)];
      for (std::size_t i = 0; i < dy.data.size(); ++i) g[n.offset + i] += dy.data[i];
      break;
    }
    case Op::affine: {
      const Matrix& x = val(n.a);
      const Matrix& w = val(n.b);
      if (needs(n.a)) {
        Matrix dx(x.rows, x.cols);
        kernels::affine_grad_input(dy.data, x.rows, w.cols, w.data, w.rows, dx.data);
        accumulate(n.a, dx);
      }
      if (needs(n.b) || needs(n.c)) {
        Matrix dw(w.rows, w.cols, 0.0), db(1, w.cols, 0.0);
        kernels::affine_grad_params(x.data, dy.data, x.rows, w.rows, w.cols, dw.data, db.data);
        accumulate(n.b, dw);
        accumulate(n.c, db);
      }
      break;
    }
    case Op::elu: {
      const Matrix& x = val(n.a);
      Matrix dx(x.rows, x.cols);
      for (std::size_t i = 0; i < dx.data.size(); ++i)
        dx.data[i] = dy.data[i] * (x.data[i] > 0.0 ? 1.0 : n.value.data[i] + 1.0);
      accumulate(n.a, dx);
      break;
    }
    case Op::tanh: {
      Matrix dx(dy.rows, dy.cols);
      for (std::size_t i = 0; i < dx.data.size(); ++i)
        dx.data[i] = dy.data[i] * (1.0 - n.value.data[i] * n.value.data[i]);
      accumulate(n.a, dx);
      break;
    }
    case Op::exp: {
      Matrix dx(dy.rows, dy.cols);
      for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] = dy.data[i] * n.value.data[i];
      accumulate(n.a, dx);
      break;
    }
    case Op::log: {
      const Matrix& x = val(n.a);
      Matrix dx(dy.rows, dy.cols);
      for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] = dy.data[i] / x.data[i];
      accumulate(n.a, dx);
      break;
    }
    case Op::square: {
      const Matrix& x = val(n.a);
      Matrix dx(dy.rows, dy.cols);
      for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] = 2.0 * x.data[i] * dy.data[i];
      accumulate(n.a, dx);
      break;
    }
    case Op::add:
    case Op::sub:
    case Op::mul: {
      const Matrix& a = val(n.a);
      const Matrix& b = val(n.b);
      const Broadcast bc{a.rows, a.cols, b.rows, b.cols};
      if (needs(n.a)) {
        Matrix da(a.rows, a.cols);
        for (std::size_t r = 0; r < a.rows; ++r)
          for (std::size_t c = 0; c < a.cols; ++c)
            da(r, c) = n.op == Op::mul ? dy(r, c) * b.data[bc.at(r, c)] : dy(r, c);
        accumulate(n.a, da);
      }
      if (needs(n.b)) {
        Matrix db(b.rows, b.cols, 0.0);
        for (std::size_t r = 0; r < a.rows; ++r)
          for (std::size_t c = 0; c < a.cols; ++c) {
            const double g = n.op == Op::mul ? dy(r, c) * a(r, c) : (n.op == Op::sub ? -dy(r, c) : dy(r, c));
            db.data[bc.at(r, c)] += g;
          }
        accumulate(n.b, db);
      }
      break;
    }
    case Op::scale: {
      Matrix dx(dy.rows, dy.cols);
      for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] = n.s0 * dy.data[i];
      accumulate(n.a, dx);
      break;
    }
    case Op::add_scalar:
    case Op::clip_st:
      accumulate(n.a, dy);
      break;
    case Op::sum:
    case Op::mean: {
      const Matrix& x = val(n.a);
      const double g = n.op == Op::sum ? dy.data[0] : dy.data[0] / static_cast<double>(x.size());
      accumulate(n.a, Matrix(x.rows, x.cols, g));
      break;
    }
    case Op::row_sum: {
      const Matrix& x = val(n.a);
      Matrix dx(x.rows, x.cols);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.cols; ++c) dx(r, c) = dy(r, 0);
      accumulate(n.a, dx);
      break;
    }
    case Op::softmax_rows: {
      const Matrix& y = n.value;
      Matrix dx(y.rows, y.cols);
      for (std::size_t r = 0; r < y.rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < y.cols; ++c) dot += dy(r, c) * y(r, c);
        for (std::size_t c = 0; c < y.cols; ++c) dx(r, c) = y(r, c) * (dy(r, c) - dot);
      }
      accumulate(n.a, dx);
      break;
    }
    case Op::concat_cols: {
      const Matrix& a = val(n.a);
      const Matrix& b = val(n.b);
      Matrix da(a.rows, a.cols), db(b.rows, b.cols);
      for (std::size_t r = 0; r < a.rows; ++r) {
        for (std::size_t c = 0; c < a.cols; ++c) da(r, c) = dy(r, c);
        for (std::size_t c = 0; c < b.cols; ++c) db(r, c) = dy(r, a.cols + c);
      }
      accumulate(n.a, da);
      accumulate(n.b, db);
      break;
    }
    case Op::slice_cols: {
      const Matrix& x = val(n.a);
      const auto begin = static_cast<std::size_t>(n.s0);
      Matrix dx(x.rows, x.cols, 0.0);
      for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < dy.cols; ++c) dx(r, begin + c) = dy(r, c);
      accumulate(n.a, dx);
      break;
    }
  }
}

namespace {
Tape& tape_of(Var a) {
  require(a.tape != nullptr, "autodiff: unbound variable");
  return *a.tape;
}
Tape& tape_of(Var a, Var b) {
  require(a.tape != nullptr && a.tape == b.tape, "autodiff: variables on different tapes");
  return *a.tape;
}
}  // namespace

Var affine(Var x, Var w, Var b) {
  Tape& t = tape_of(x, w);
  require(b.tape == &t, "affine: bias on a different tape");
  const Matrix& xm = t.value(x);
  const Matrix& wm = t.value(w);
  const Matrix& bm = t.value(b);
  require(xm.cols == wm.rows, "affine: input dimension mismatch");
  require(bm.rows == 1 && bm.cols == wm.cols, "affine: bias shape mismatch");
  Matrix y(xm.rows, wm.cols);
  kernels::affine(xm.data, xm.rows, xm.cols, wm.data, bm.data, wm.cols, y.data);
  return t.push(Op::affine, std::move(y), x.id, w.id, b.id);
}

Var elu(Var x) {
  Tape& t = tape_of(x);
  const Matrix& xm = t.value(x);
  Matrix y(xm.rows, xm.cols);
  kernels::elu(xm.data, y.data);
  return t.push(Op::elu, std::move(y), x.id);
}

Var tanh(Var x) {
  Tape& t = tape_of(x);
  return t.push(Op::tanh, map(t.value(x), [](double v) { return std::tanh(v); }), x.id);
}

Var exp(Var x) {
  Tape& t = tape_of(x);
  return t.push(Op::exp, map(t.value(x), [](double v) { return std::exp(v); }), x.id);
}

Var log(Var x) {
  Tape& t = tape_of(x);
  return t.push(Op::log, map(t.value(x), [](double v) { return std::log(v); }), x.id);
}

Var square(Var x) {
  Tape& t = tape_of(x);
  return t.push(Op::square, map(t.value(x), [](double v) { return v * v; }), x.id);
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto bc = broadcast_of(t.value(a), t.value(b), "add");
  return t.push(Op::add, zip(t.value(a), t.value(b), bc, [](double u, double v) { return u + v; }), a.id, b.id);
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto bc = broadcast_of(t.value(a), t.value(b), "sub");
  return t.push(Op::sub, zip(t.value(a), t.value(b), bc, [](double u, double v) { return u - v; }), a.id, b.id);
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const auto bc = broadcast_of(t.value(a), t.value(b), "mul");
  return t.push(Op::mul, zip(t.value(a), t.value(b), bc, [](double u, double v) { return u * v; }), a.id, b.id);
}

Var scale(Var x, double s) {
  Tape& t = tape_of(x);
  return t.push(Op::scale, map(t.value(x), [s](double v) { return s * v; }), x.id, -1, -1, s);
}

Var add_scalar(Var x, double s) {
  Tape& t = tape_of(x);
  return t.push(Op::add_scalar, map(t.value(x), [s](double v) { return v + s; }), x.id, -1, -1, s);
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : t.value(x).data) s += v;
  return t.push(Op::sum, Matrix(1, 1, s), x.id);
}

Var mean(Var x) {
  Tape& t = tape_of(x);
  const Matrix& m = t.value(x);
  require(m.size() > 0, "mean: empty input");
  double s = 0.0;
  for (double v : m.data) s += v;
  return t.push(Op::mean, Matrix(1, 1, s / static_cast<double>(m.size())), x.id);
}

Var row_sum(Var x) {
  Tape& t = tape_of(x);
  const Matrix& m = t.value(x);
  Matrix y(m.rows, 1, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (double v : m.row(r)) y(r, 0) += v;
  return t.push(Op::row_sum, std::move(y), x.id);
}

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  const Matrix& m = t.value(x);
  Matrix y(m.rows, m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const auto row = m.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) z += (y(r, c) = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < m.cols; ++c) y(r, c) /= z;
  }
  return t.push(Op::softmax_rows, std::move(y), x.id);
}

Var clip_st(Var x, double lo, double hi) {
  Tape& t = tape_of(x);
  return t.push(Op::clip_st, map(t.value(x), [lo, hi](double v) { return std::clamp(v, lo, hi); }), x.id, -1,
                -1, lo, hi);
}

Var concat_cols(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.push(Op::concat_cols, doublyaware::concat_cols(t.value(a), t.value(b)), a.id, b.id);
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const Matrix& m = t.value(x);
  require(begin < end && end <= m.cols, "slice_cols: range out of bounds");
  Matrix y(m.rows, end - begin);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = begin; c < end; ++c) y(r, c - begin) = m(r, c);
  return t.push(Op::slice_cols, std::move(y), x.id, -1, -1, static_cast<double>(begin),
                static_cast<double>(end));
}

ParamHandle::ParamHandle(Tape& tape, const ParamVector& params)
    : tape_(&tape), params_(&params), binding_(tape.bind(params)), cache_(params.layout().size(), -1) {}

Var ParamHandle::segment(std::size_t i) {
  if (cache_.at(i) >= 0) return Var{tape_, cache_[i]};
  const auto& seg = params_->layout()[i];
  const std::size_t rows = seg.shape.size() >= 2 ? seg.shape[0] : 1;
  const std::size_t cols = seg.size / rows;
  Var v = tape_->parameter(binding_, i, rows, cols);
  cache_[i] = v.id;
  return v;
}

std::vector<double> grad(const LossFn& loss_fn, const ParamVector& at) {
  Tape tape;
  ParamHandle handle(tape, at);
  Var loss = loss_fn(tape, handle);
  tape.backward(loss);
  return handle.gradient();
}

double evaluate(const LossFn& loss_fn, const ParamVector& at) {
  Tape tape;
  ParamHandle handle(tape, at);
  return tape.scalar(loss_fn(tape, handle));
}

}  // namespace doublyaware::ad
