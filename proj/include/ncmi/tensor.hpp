#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ncmi/rng.hpp"

namespace ncmi {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct OpNode;

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<OpNode> creator;  // null for leaves
};

// Value-semantic handle to a node in the autodiff graph. Values are float64
// and immutable once the tensor has been produced by an operation; gradient
// buffers and leaf values (parameters) are the only mutable state.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only

  std::span<const double> value() const;
  // Leaf tensors only (parameters, constants): op outputs are immutable.
  std::span<double> mutable_value();
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();
  bool requires_grad() const;
  double item() const;  // scalar tensors only
  double at(std::size_t r, std::size_t c) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
  TensorImpl& ref() const;
};

// A recorded operation: the inputs it read and the rule that routes the
// output gradient back into them.
struct OpNode {
  const char* name = "";
  std::vector<Tensor> inputs;
  std::weak_ptr<TensorImpl> out;
  std::function<void(TensorImpl& out, const std::vector<Tensor>& inputs)> backprop;
};

// Ordered record of every operation since the last clear(). Replaying the
// record in reverse visits each operation exactly once per backward pass.
class GradTape {
 public:
  void clear() { ops_.clear(); }
  std::size_t size() const { return ops_.size(); }
  void record(std::shared_ptr<OpNode> op) { ops_.push_back(std::move(op)); }
  const std::vector<std::shared_ptr<OpNode>>& ops() const { return ops_; }

 private:
  std::vector<std::shared_ptr<OpNode>> ops_;
};

GradTape& active_tape();
bool grad_enabled();

// Disables recording for its lifetime (pure evaluation passes).
struct NoGradScope {
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

// Constructor for custom differentiable operations (used by the simplex and
// model layers for fused row-wise ops). `backprop` reads out.grad and
// accumulates into the inputs via grad_buffer().
Tensor make_op(const char* name, std::vector<Tensor> inputs, Shape out_shape,
               std::vector<double> out_value,
               std::function<void(TensorImpl&, const std::vector<Tensor>&)> backprop);

// Gradient accumulation buffer, allocated as zeros on first use.
std::vector<double>& grad_buffer(const Tensor& t);

// Accumulates d(loss)/d(tensor) into every reachable tensor that requires
// grad. Leaf gradients accumulate across calls; intermediate gradients are
// recomputed from scratch each call.
void backward(const Tensor& loss);

// ---- operations ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, double c);
Tensor sub(const Tensor& a, double c);
Tensor sub(double c, const Tensor& a);
Tensor mul(const Tensor& a, double c);  // scalar-mul
Tensor div(const Tensor& a, double c);
Tensor div(double c, const Tensor& a);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);  // 2-D only
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);  // 2-D only

Tensor reshape(const Tensor& a, Shape shape);

// out[r, :] = src[idx[r], :]; backward scatter-adds by row.
Tensor row_gather(const Tensor& src, std::vector<int> idx);
// out[y, :] = sum of src rows whose label is y; backward gathers.
Tensor class_row_sum(const Tensor& src, std::vector<int> labels, int class_count);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return div(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, c); }
inline Tensor operator-(double c, const Tensor& a) { return sub(c, a); }

// ---- optimizer -------------------------------------------------------------

struct SgdState {
  std::vector<std::vector<double>> velocity;  // one buffer per param, by position
};

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
// Params whose gradient buffer was never touched are left alone.
void sgd_step(std::span<const Tensor> params, double lr, double momentum,
              double weight_decay, SgdState& state);

void zero_grads(std::span<const Tensor> params);

}  // namespace ncmi
