#include "ncmi/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "ncmi/error.hpp"

namespace ncmi {

namespace {

thread_local GradTape g_tape;
thread_local int g_no_grad_depth = 0;

bool any_requires_grad(const std::vector<Tensor>& ts) {
  for (const auto& t : ts) {
    if (t.requires_grad()) return true;
  }
  return false;
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> value, bool requires_grad) {
  if (shape_numel(shape) != value.size()) {
    throw ContractError("tensor: shape " + shape_str(shape) + " does not match data length " +
                        std::to_string(value.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(value);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

GradTape& active_tape() { return g_tape; }
bool grad_enabled() { return g_no_grad_depth == 0; }

NoGradScope::NoGradScope() { ++g_no_grad_depth; }
NoGradScope::~NoGradScope() { --g_no_grad_depth; }

// ---- Tensor ----------------------------------------------------------------

TensorImpl& Tensor::ref() const {
  if (!impl_) throw ContractError("tensor: use of a default-constructed tensor");
  return *impl_;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::full(Shape shape, double x, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), x);
  return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(make_impl(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const { return ref().shape; }
std::size_t Tensor::size() const { return ref().value.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ContractError("tensor: rows() on shape " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ContractError("tensor: cols() on shape " + shape_str(shape()));
  return shape()[1];
}

std::span<const double> Tensor::value() const { return ref().value; }

std::span<double> Tensor::mutable_value() {
  TensorImpl& t = ref();
  if (t.creator) {
    throw ContractError("tensor: op outputs are immutable; only leaves may be written");
  }
  return t.value;
}

std::span<const double> Tensor::grad() const { return ref().grad; }
bool Tensor::has_grad() const { return !ref().grad.empty(); }

void Tensor::zero_grad() {
  TensorImpl& t = ref();
  std::fill(t.grad.begin(), t.grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

double Tensor::item() const {
  if (size() != 1) throw ContractError("tensor: item() on non-scalar shape " + shape_str(shape()));
  return ref().value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return ref().value[r * cols() + c];
}

std::vector<double>& grad_buffer(const Tensor& t) {
  TensorImpl& impl = *t.impl();
  if (impl.grad.empty()) impl.grad.assign(impl.value.size(), 0.0);
  return impl.grad;
}

Tensor make_op(const char* name, std::vector<Tensor> inputs, Shape out_shape,
               std::vector<double> out_value,
               std::function<void(TensorImpl&, const std::vector<Tensor>&)> backprop) {
  const bool track = grad_enabled() && any_requires_grad(inputs);
  auto impl = make_impl(std::move(out_shape), std::move(out_value), track);
  if (track) {
    auto node = std::make_shared<OpNode>();
    node->name = name;
    node->inputs = std::move(inputs);
    node->out = impl;
    node->backprop = std::move(backprop);
    impl->creator = node;
    g_tape.record(std::move(node));
  }
  return Tensor(std::move(impl));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  TensorImpl& root = *loss.impl();
  if (!root.requires_grad) {
    throw ContractError("backward: loss does not require grad");
  }
  if (!root.creator) {
    grad_buffer(loss)[0] += 1.0;
    return;
  }
  const auto& ops = g_tape.ops();
  bool on_tape = false;
  for (const auto& op : ops) {
    if (op.get() == root.creator.get()) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) {
    throw ContractError("backward: loss was not produced under the active tape");
  }
  // Fresh pass: intermediate gradients are recomputed, leaves accumulate.
  for (const auto& op : ops) {
    if (auto out = op->out.lock()) out->grad.assign(out->value.size(), 0.0);
  }
  root.grad.assign(1, 1.0);
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    const OpNode& op = **it;
    auto out = op.out.lock();
    if (!out || out->grad.empty()) continue;
    op.backprop(*out, op.inputs);
  }
}

// ---- elementwise machinery --------------------------------------------------

namespace {

enum class Bc { same, b_is_vec, a_is_vec };

// Binary ops accept equal shapes, or a length-m vector (shape [m] or [1,m])
// broadcast across the rows of an [R,m] matrix.
bool vec_over(const Shape& vec, const Shape& mat) {
  if (mat.size() != 2) return false;
  if (vec.size() == 1) return vec[0] == mat[1];
  if (vec.size() == 2) return vec[0] == 1 && vec[1] == mat[1];
  return false;
}

Bc broadcast_kind(const char* name, const Shape& a, const Shape& b) {
  if (a == b) return Bc::same;
  if (vec_over(b, a)) return Bc::b_is_vec;
  if (vec_over(a, b)) return Bc::a_is_vec;
  throw ContractError(std::string(name) + ": incompatible shapes " + shape_str(a) + " and " +
                      shape_str(b));
}

// fwd(x, y) -> value; dx(g, x, y) and dy(g, x, y) -> gradient contributions.
template <class F, class Dx, class Dy>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F fwd, Dx dx, Dy dy) {
  const Bc bc = broadcast_kind(name, a.shape(), b.shape());
  const Tensor& m = (bc == Bc::a_is_vec) ? b : a;  // the matrix-shaped operand
  const auto av = a.value(), bv = b.value();
  const std::size_t n = m.size();
  const std::size_t c = (bc == Bc::same) ? n : m.shape()[1];
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = (bc == Bc::a_is_vec) ? av[i % c] : av[i];
    const double y = (bc == Bc::b_is_vec) ? bv[i % c] : bv[i];
    out[i] = fwd(x, y);
  }
  return make_op(name, {a, b}, m.shape(), std::move(out),
                 [bc, c, dx, dy](TensorImpl& o, const std::vector<Tensor>& in) {
                   const auto& g = o.grad;
                   const auto av = in[0].value(), bv = in[1].value();
                   const std::size_t n = o.value.size();
                   if (in[0].requires_grad()) {
                     auto& ga = grad_buffer(in[0]);
                     for (std::size_t i = 0; i < n; ++i) {
                       const double x = (bc == Bc::a_is_vec) ? av[i % c] : av[i];
                       const double y = (bc == Bc::b_is_vec) ? bv[i % c] : bv[i];
                       ga[(bc == Bc::a_is_vec) ? i % c : i] += dx(g[i], x, y);
                     }
                   }
                   if (in[1].requires_grad()) {
                     auto& gb = grad_buffer(in[1]);
                     for (std::size_t i = 0; i < n; ++i) {
                       const double x = (bc == Bc::a_is_vec) ? av[i % c] : av[i];
                       const double y = (bc == Bc::b_is_vec) ? bv[i % c] : bv[i];
                       gb[(bc == Bc::b_is_vec) ? i % c : i] += dy(g[i], x, y);
                     }
                   }
                 });
}

template <class F, class Dx>
Tensor unary_op(const char* name, const Tensor& a, F fwd, Dx dx) {
  const auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_op(name, {a}, a.shape(), std::move(out),
                 [dx](TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& ga = grad_buffer(in[0]);
                   const auto& g = o.grad;
                   const auto x = in[0].value();
                   const auto& y = o.value;
                   for (std::size_t i = 0; i < y.size(); ++i) ga[i] += dx(g[i], x[i], y[i]);
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor add(const Tensor& a, double c) {
  return unary_op(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, double c) { return add(a, -c); }

Tensor sub(double c, const Tensor& a) {
  return unary_op(
      "rsub_scalar", a, [c](double x) { return c - x; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, double c) {
  return unary_op(
      "mul_scalar", a, [c](double x) { return x * c; },
      [c](double g, double, double) { return g * c; });
}

Tensor div(const Tensor& a, double c) { return mul(a, 1.0 / c); }

Tensor div(double c, const Tensor& a) {
  return unary_op(
      "rdiv_scalar", a, [c](double x) { return c / x; },
      [c](double g, double x, double) { return -g * c / (x * x); });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; }, [](double g, double, double) { return -g; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.value()) {
    if (!(x > 0.0)) {
      throw ContractError("log: non-positive input " + std::to_string(x) +
                          " (clamp before taking logs)");
    }
  }
  return unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

// ---- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ContractError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  }
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  const auto av = a.value(), bv = b.value();
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double x = av[i * k + l];
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += x * bv[l * c + j];
    }
  }
  return make_op("matmul", {a, b}, {r, c}, std::move(out),
                 [r, k, c](TensorImpl& o, const std::vector<Tensor>& in) {
                   const auto& g = o.grad;
                   const auto av = in[0].value(), bv = in[1].value();
                   if (in[0].requires_grad()) {
                     auto& ga = grad_buffer(in[0]);  // ga += g . b^T
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) {
                         const double gij = g[i * c + j];
                         for (std::size_t l = 0; l < k; ++l) ga[i * k + l] += gij * bv[l * c + j];
                       }
                   }
                   if (in[1].requires_grad()) {
                     auto& gb = grad_buffer(in[1]);  // gb += a^T . g
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t l = 0; l < k; ++l) {
                         const double ail = av[i * k + l];
                         for (std::size_t j = 0; j < c; ++j) gb[l * c + j] += ail * g[i * c + j];
                       }
                   }
                 });
}

// ---- reductions ----------------------------------------------------------------

namespace {

void check_axis(const char* name, const Tensor& a, std::size_t axis) {
  if (a.rank() != 2 || axis > 1) {
    throw ContractError(std::string(name) + ": axis " + std::to_string(axis) +
                        " invalid for shape " + shape_str(a.shape()));
  }
}

}  // namespace

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.value()) s += x;
  return make_op("sum", {a}, {1}, {s}, [](TensorImpl& o, const std::vector<Tensor>& in) {
    if (!in[0].requires_grad()) return;
    auto& ga = grad_buffer(in[0]);
    const double g = o.grad[0];
    for (auto& x : ga) x += g;
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  check_axis("sum", a, axis);
  const std::size_t r = a.rows(), c = a.cols();
  const auto av = a.value();
  if (axis == 0) {
    std::vector<double> out(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += av[i * c + j];
    return make_op("sum_axis0", {a}, {c}, std::move(out),
                   [r, c](TensorImpl& o, const std::vector<Tensor>& in) {
                     if (!in[0].requires_grad()) return;
                     auto& ga = grad_buffer(in[0]);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += o.grad[j];
                   });
  }
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j];
  return make_op("sum_axis1", {a}, {r}, std::move(out),
                 [r, c](TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& ga = grad_buffer(in[0]);
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += o.grad[i];
                 });
}

Tensor mean(const Tensor& a) { return div(sum(a), static_cast<double>(a.size())); }

Tensor mean(const Tensor& a, std::size_t axis) {
  check_axis("mean", a, axis);
  const double n = static_cast<double>(axis == 0 ? a.rows() : a.cols());
  return div(sum(a, axis), n);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ContractError("reshape: cannot reshape " + shape_str(a.shape()) + " to " +
                        shape_str(shape));
  }
  std::vector<double> out(a.value().begin(), a.value().end());
  return make_op("reshape", {a}, std::move(shape), std::move(out),
                 [](TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& ga = grad_buffer(in[0]);
                   for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
                 });
}

Tensor row_gather(const Tensor& src, std::vector<int> idx) {
  if (src.rank() != 2) {
    throw ContractError("row_gather: source must be 2-D, got " + shape_str(src.shape()));
  }
  const std::size_t r = src.rows(), c = src.cols();
  const auto sv = src.value();
  std::vector<double> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= r) {
      throw ContractError("row_gather: index " + std::to_string(idx[i]) + " out of range for " +
                          std::to_string(r) + " rows");
    }
    std::copy_n(&sv[static_cast<std::size_t>(idx[i]) * c], c, &out[i * c]);
  }
  const std::size_t b = idx.size();
  return make_op("row_gather", {src}, {b, c}, std::move(out),
                 [idx = std::move(idx), c](TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& ga = grad_buffer(in[0]);
                   for (std::size_t i = 0; i < idx.size(); ++i)
                     for (std::size_t j = 0; j < c; ++j)
                       ga[static_cast<std::size_t>(idx[i]) * c + j] += o.grad[i * c + j];
                 });
}

Tensor class_row_sum(const Tensor& src, std::vector<int> labels, int class_count) {
  if (src.rank() != 2 || labels.size() != src.rows()) {
    throw ContractError("class_row_sum: need one label per row of " + shape_str(src.shape()) +
                        ", got " + std::to_string(labels.size()));
  }
  const std::size_t c = src.cols();
  const auto sv = src.value();
  std::vector<double> out(static_cast<std::size_t>(class_count) * c, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= class_count) {
      throw ContractError("class_row_sum: label " + std::to_string(labels[i]) +
                          " out of range for " + std::to_string(class_count) + " classes");
    }
    for (std::size_t j = 0; j < c; ++j)
      out[static_cast<std::size_t>(labels[i]) * c + j] += sv[i * c + j];
  }
  return make_op("class_row_sum", {src}, {static_cast<std::size_t>(class_count), c},
                 std::move(out),
                 [labels = std::move(labels), c](TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& ga = grad_buffer(in[0]);
                   for (std::size_t i = 0; i < labels.size(); ++i)
                     for (std::size_t j = 0; j < c; ++j)
                       ga[i * c + j] += o.grad[static_cast<std::size_t>(labels[i]) * c + j];
                 });
}

// ---- optimizer -----------------------------------------------------------------

void sgd_step(std::span<const Tensor> params, double lr, double momentum, double weight_decay,
              SgdState& state) {
  if (state.velocity.size() < params.size()) state.velocity.resize(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    TensorImpl& t = *params[p].impl();
    if (t.grad.empty()) continue;  // never touched by backward: no-op
    auto& v = state.velocity[p];
    if (v.size() != t.value.size()) {
      if (!v.empty()) {
        throw ContractError("sgd_step: velocity buffer shape mismatch for param " +
                            std::to_string(p));
      }
      v.assign(t.value.size(), 0.0);
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + t.grad[i] + weight_decay * t.value[i];
      t.value[i] -= lr * v[i];
    }
  }
}

void zero_grads(std::span<const Tensor> params) {
  for (const auto& p : params) {
    auto& g = p.impl()->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
}

}  // namespace ncmi
