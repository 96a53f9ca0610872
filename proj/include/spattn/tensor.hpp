#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// Every op that sees an input with requires_grad records a node on the
// output; backward() walks those nodes in reverse topological order. A graph
// can be differentiated once: nodes release their closures after running and
// a second backward() over them throws ContractError.
//
// Broadcasting is limited to scalars and leading-batch dimensions (the second
// operand's shape must be a suffix of the first operand's shape).

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace spattn {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;

  void accumulate(std::span<const double> g);
  std::vector<double>& grad_buffer();
};

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
  bool consumed = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of dimension i; negative i counts from the back.
  std::size_t dim(int i) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Direct write access, for parameter updates outside any graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  /// Gradient buffer; zeros for a requires_grad tensor that was not reached.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Value copy detached from any graph.
  Tensor detach() const;

  /// Reverse-mode sweep from this scalar. Throws ContractError on non-scalar
  /// tensors and on a second call over the same recorded graph.
  void backward() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Builds an op output: records a node when any input requires grad.
/// `backward` receives the finished output (with its grad) and must
/// accumulate into the inputs that require grad.
Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl& out)> backward);

// ---- linear algebra -------------------------------------------------------

/// a[..., m, k] x b[..., k, n]; leading batch dims broadcast (size 1 or absent).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two dimensions.
Tensor transpose_last(const Tensor& a);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
/// Logistic function, computed in branch form. Results are kept inside the
/// open interval (0, 1): saturated values round to the nearest representable
/// neighbour of 0 or 1 rather than to the endpoint itself.
Tensor sigmoid(const Tensor& a);

// ---- reductions -----------------------------------------------------------

Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
/// Mean over one axis; that axis is removed from the result.
Tensor reduce_mean(const Tensor& a, int axis);
/// Sums over every axis except `axis`; result has shape [dim(axis)].
Tensor sum_except(const Tensor& a, int axis);
/// Mean squared error over all elements.
Tensor mse(const Tensor& pred, const Tensor& target);

// ---- normalization --------------------------------------------------------

/// Softmax along the last axis with max subtraction. -inf entries map to
/// exactly 0; a row of all -inf raises ContractError.
Tensor softmax_rows(const Tensor& logits);
/// Layer normalization over the last axis followed by gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// ---- shape ops ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
/// Rows of `table` [V, D] gathered by ids; result [ids.size(), D] reshaped to
/// `out_shape` + [D].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, Shape out_shape);
/// Repeats every row along axis -2 `times` times, in order.
Tensor repeat_rows(const Tensor& a, std::size_t times);
/// [..., D] -> [..., count, D] by copying along a new axis -2.
Tensor expand_rows(const Tensor& a, std::size_t count);
/// [B, N, H*d] -> [B, H, N, d].
Tensor split_heads(const Tensor& a, std::size_t heads);
/// [B, H, N, d] -> [B, N, H*d].
Tensor merge_heads(const Tensor& a);

}  // namespace spattn
