#include "spattn/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "spattn/error.hpp"

namespace spattn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

bool needs_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

// Inner size of the broadcast operand b against a, or throws.
std::size_t broadcast_inner(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (b.numel() == 1 && sb.size() <= 1) return 1;
  bool suffix = sb.size() <= sa.size() &&
                std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!suffix) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(sa) + " and " +
                         shape_str(sb) + " are not compatible");
  }
  return b.numel();
}

enum class Binary { kAdd, kSub, kMul };

Tensor binary_op(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  require_defined(a, name);
  require_defined(b, name);
  const std::size_t inner = broadcast_inner(a, b, name);
  const std::size_t n = a.numel();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  // b repeats every `inner` elements of a.
  for (std::size_t base = 0; base < n; base += inner) {
    const double* x = av.data() + base;
    const double* y = bv.data();
    double* z = out.data() + base;
    switch (kind) {
      case Binary::kAdd:
        for (std::size_t j = 0; j < inner; ++j) z[j] = x[j] + y[j];
        break;
      case Binary::kSub:
        for (std::size_t j = 0; j < inner; ++j) z[j] = x[j] - y[j];
        break;
      case Binary::kMul:
        for (std::size_t j = 0; j < inner; ++j) z[j] = x[j] * y[j];
        break;
    }
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi, kind, inner](const detail::TensorImpl& o) {
    const auto& g = o.grad;
    const std::size_t n = g.size();
    if (ai->requires_grad) {
      auto& ga = ai->grad_buffer();
      for (std::size_t base = 0; base < n; base += inner) {
        const double* gi = g.data() + base;
        double* gai = ga.data() + base;
        if (kind == Binary::kMul) {
          const double* y = bi->data.data();
          for (std::size_t j = 0; j < inner; ++j) gai[j] += gi[j] * y[j];
        } else {
          for (std::size_t j = 0; j < inner; ++j) gai[j] += gi[j];
        }
      }
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (std::size_t base = 0; base < n; base += inner) {
        const double* gi = g.data() + base;
        switch (kind) {
          case Binary::kAdd:
            for (std::size_t j = 0; j < inner; ++j) gb[j] += gi[j];
            break;
          case Binary::kSub:
            for (std::size_t j = 0; j < inner; ++j) gb[j] -= gi[j];
            break;
          case Binary::kMul: {
            const double* x = ai->data.data() + base;
            for (std::size_t j = 0; j < inner; ++j) gb[j] += gi[j] * x[j];
            break;
          }
        }
      }
    }
  });
}

template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Deriv deriv) {
  require_defined(a, name);
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto ai = a.impl();
  // deriv(x, y) returns dy/dx from the input and the output value.
  return make_result(a.shape(), std::move(out), {a}, [ai, deriv](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * deriv(ai->data[i], o.data[i]);
  });
}

Shape batch_of(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(ax);
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

void TensorImpl::accumulate(std::span<const double> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(numel_of(shape)) + " elements, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->shape;
}

std::size_t Tensor::dim(int i) const {
  const auto& s = shape();
  return s[normalize_axis(i, s.size(), "dim")];
}

std::size_t Tensor::numel() const { return shape().empty() ? 1 : numel_of(shape()); }

std::span<const double> Tensor::data() const {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("at: index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= s[k]) throw RangeError("at: index out of range for " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ContractError("tensor: undefined");
  impl_->requires_grad = on;
  if (on) impl_->grad_buffer();
}

std::span<const double> Tensor::grad() const {
  if (!impl_) throw ContractError("tensor: undefined");
  if (!impl_->requires_grad) return {};
  return impl_->grad_buffer();
}

std::span<double> Tensor::mutable_grad() {
  if (!impl_) throw ContractError("tensor: undefined");
  return impl_->grad_buffer();
}

void Tensor::zero_grad() {
  if (!impl_) return;
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor::from(shape(), impl_->data, false); }

void Tensor::backward() const {
  if (!impl_) throw ContractError("backward: undefined tensor");
  if (numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) return;
  if (impl_->node && impl_->node->consumed) {
    throw ContractError("backward: graph was already differentiated");
  }

  // Post-order DFS gives a topological order of the recorded graph. The order
  // owns its tensors: nodes drop their inputs as they finish.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<detail::TensorImpl>, std::size_t>> stack;
  stack.emplace_back(impl_, 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (cur->node && next < cur->node->inputs.size()) {
      const auto& child = cur->node->inputs[next++];
      if (child->requires_grad && child->node && seen.insert(child.get()).second) {
        auto keep = child;
        stack.emplace_back(std::move(keep), 0);
      }
      continue;
    }
    order.push_back(std::move(cur));
    stack.pop_back();
  }
  for (const auto& t : order) {
    if (t->node->consumed) throw ContractError("backward: graph was already differentiated");
  }

  impl_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = it->get();
    auto& node = *t->node;
    if (!t->grad.empty() && node.backward) node.backward(*t);
    node.consumed = true;
    node.backward = nullptr;
    node.inputs.clear();
  }
}

Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   std::function<void(const detail::TensorImpl& out)> backward) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  const bool any = std::any_of(inputs.begin(), inputs.end(), needs_grad);
  if (any) {
    impl->requires_grad = true;
    auto node = std::make_shared<detail::Node>();
    for (auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.impl());
    }
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return Tensor(std::move(impl));
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t n = sb[sb.size() - 1];

  // Broadcast the batch dimensions, right-aligned.
  const Shape ba = batch_of(sa);
  const Shape bb = batch_of(sb);
  const std::size_t rank = std::max(ba.size(), bb.size());
  Shape batch(rank);
  std::vector<std::size_t> stride_a(rank, 0), stride_b(rank, 0);
  {
    std::size_t sta = m * k;
    std::size_t stb = k * n;
    for (std::size_t r = 0; r < rank; ++r) {
      const std::size_t pos = rank - 1 - r;
      const std::size_t da = r < ba.size() ? ba[ba.size() - 1 - r] : 1;
      const std::size_t db = r < bb.size() ? bb[bb.size() - 1 - r] : 1;
      if (da != db && da != 1 && db != 1) {
        throw DimensionError("matmul: batch dimensions of " + shape_str(sa) + " and " +
                             shape_str(sb) + " do not broadcast");
      }
      batch[pos] = std::max(da, db);
      stride_a[pos] = da == 1 ? 0 : sta;
      stride_b[pos] = db == 1 ? 0 : stb;
      sta *= da;
      stb *= db;
    }
  }
  const std::size_t count = numel_of(batch);
  std::vector<std::size_t> off_a(count), off_b(count);
  for (std::size_t lin = 0; lin < count; ++lin) {
    std::size_t rem = lin;
    std::size_t oa = 0, ob = 0;
    for (std::size_t r = rank; r-- > 0;) {
      const std::size_t idx = rem % batch[r];
      rem /= batch[r];
      oa += idx * stride_a[r];
      ob += idx * stride_b[r];
    }
    off_a[lin] = oa;
    off_b[lin] = ob;
  }

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(count * m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  // A single shared right factor: fold the batch into the row dimension.
  const bool fold = bb.empty();
  if (fold) {
    MutMap(out.data(), count * m, n).noalias() = ConstMap(pa, count * m, k) * ConstMap(pb, k, n);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      MutMap(out.data() + i * m * n, m, n).noalias() =
          ConstMap(pa + off_a[i], m, k) * ConstMap(pb + off_b[i], k, n);
    }
  }

  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [ai, bi, m, k, n, count, fold, off_a = std::move(off_a),
                      off_b = std::move(off_b)](const detail::TensorImpl& o) {
                       const double* g = o.grad.data();
                       if (fold) {
                         ConstMap dc(g, count * m, n);
                         if (ai->requires_grad) {
                           MutMap(ai->grad_buffer().data(), count * m, k).noalias() +=
                               dc * ConstMap(bi->data.data(), k, n).transpose();
                         }
                         if (bi->requires_grad) {
                           MutMap(bi->grad_buffer().data(), k, n).noalias() +=
                               ConstMap(ai->data.data(), count * m, k).transpose() * dc;
                         }
                         return;
                       }
                       for (std::size_t i = 0; i < count; ++i) {
                         ConstMap dc(g + i * m * n, m, n);
                         if (ai->requires_grad) {
                           MutMap(ai->grad_buffer().data() + off_a[i], m, k).noalias() +=
                               dc * ConstMap(bi->data.data() + off_b[i], k, n).transpose();
                         }
                         if (bi->requires_grad) {
                           MutMap(bi->grad_buffer().data() + off_b[i], k, n).noalias() +=
                               ConstMap(ai->data.data() + off_a[i], m, k).transpose() * dc;
                         }
                       }
                     });
}

Tensor transpose_last(const Tensor& a) {
  require_defined(a, "transpose_last");
  const Shape& s = a.shape();
  if (s.size() < 2) throw DimensionError("transpose_last: rank < 2 for " + shape_str(s));
  const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
  const std::size_t count = a.numel() / (r * c);
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t b = 0; b < count; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = av[b * r * c + i * c + j];
    }
  }
  auto ai = a.impl();
  return make_result(std::move(out_shape), std::move(out), {a}, [ai, r, c, count](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t b = 0; b < count; ++b) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) ga[b * r * c + i * c + j] += o.grad[b * r * c + j * r + i];
      }
    }
  });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, Binary::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  return unary_op(a, "scale", [factor](double x) { return x * factor; },
                  [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary_op(a, "add_scalar", [value](double x) { return x + value; },
                  [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  static constexpr double kBelowOne = 1.0 - 0x1.0p-53;
  static constexpr double kAboveZero = std::numeric_limits<double>::denorm_min();
  return unary_op(
      a, "sigmoid",
      [](double x) {
        double s;
        if (x >= 0.0) {
          s = 1.0 / (1.0 + std::exp(-x));
        } else {
          const double e = std::exp(x);
          s = e / (1.0 + e);
        }
        return std::clamp(s, kAboveZero, kBelowOne);
      },
      [](double, double s) { return s * (1.0 - s); });
}

// ---- reductions -----------------------------------------------------------

Tensor reduce_sum(const Tensor& a) {
  require_defined(a, "reduce_sum");
  double total = 0.0;
  for (double v : a.data()) total += v;
  auto ai = a.impl();
  return make_result({}, {total}, {a}, [ai](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (auto& g : ga) g += o.grad[0];
  });
}

Tensor reduce_mean(const Tensor& a) {
  require_defined(a, "reduce_mean");
  return scale(reduce_sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reduce_mean(const Tensor& a, int axis) {
  require_defined(a, "reduce_mean");
  const Shape& s = a.shape();
  const std::size_t ax = normalize_axis(axis, s.size(), "reduce_mean");
  const std::size_t len = s[ax];
  const std::size_t outer = numel_of(Shape(s.begin(), s.begin() + ax));
  const std::size_t inner = numel_of(Shape(s.begin() + ax + 1, s.end()));
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + ax);
  std::vector<double> out(outer * inner, 0.0);
  auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * len + l) * inner + i];
    }
  }
  const double inv = 1.0 / static_cast<double>(len);
  for (auto& v : out) v *= inv;
  auto ai = a.impl();
  return make_result(std::move(out_shape), std::move(out), {a}, [ai, outer, len, inner, inv](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t q = 0; q < outer; ++q) {
      for (std::size_t l = 0; l < len; ++l) {
        for (std::size_t i = 0; i < inner; ++i) ga[(q * len + l) * inner + i] += o.grad[q * inner + i] * inv;
      }
    }
  });
}

Tensor sum_except(const Tensor& a, int axis) {
  require_defined(a, "sum_except");
  const Shape& s = a.shape();
  const std::size_t ax = normalize_axis(axis, s.size(), "sum_except");
  const std::size_t len = s[ax];
  const std::size_t outer = numel_of(Shape(s.begin(), s.begin() + ax));
  const std::size_t inner = numel_of(Shape(s.begin() + ax + 1, s.end()));
  std::vector<double> out(len, 0.0);
  auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      double acc = 0.0;
      for (std::size_t i = 0; i < inner; ++i) acc += av[(o * len + l) * inner + i];
      out[l] += acc;
    }
  }
  auto ai = a.impl();
  return make_result({len}, std::move(out), {a}, [ai, outer, len, inner](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t q = 0; q < outer; ++q) {
      for (std::size_t l = 0; l < len; ++l) {
        for (std::size_t i = 0; i < inner; ++i) ga[(q * len + l) * inner + i] += o.grad[l];
      }
    }
  });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  require_defined(pred, "mse");
  require_defined(target, "mse");
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse: shapes " + shape_str(pred.shape()) + " and " + shape_str(target.shape()) + " differ");
  }
  return reduce_mean(square(sub(pred, target)));
}

// ---- normalization --------------------------------------------------------

Tensor softmax_rows(const Tensor& logits) {
  require_defined(logits, "softmax_rows");
  if (logits.rank() == 0) throw DimensionError("softmax_rows: scalar input");
  const std::size_t n = logits.dim(-1);
  const std::size_t rows = n == 0 ? 0 : logits.numel() / n;
  auto x = logits.data();
  std::vector<double> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* yr = out.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ContractError("softmax_rows: row " + std::to_string(r) + " has no finite entry");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      total += yr[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  auto li = logits.impl();
  return make_result(logits.shape(), std::move(out), {logits}, [li, n, rows](const detail::TensorImpl& o) {
    auto& gx = li->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * n;
      const double* gy = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layer_norm");
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match feature size of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xv = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [xi, gi, bi, d, rows, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](const detail::TensorImpl& o) {
                       const auto& g = o.grad;
                       if (gi->requires_grad || bi->requires_grad) {
                         auto& gg = gi->grad_buffer();
                         auto& gb = bi->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) {
                             gg[j] += g[r * d + j] * xhat[r * d + j];
                             gb[j] += g[r * d + j];
                           }
                         }
                       }
                       if (!xi->requires_grad) return;
                       auto& gx = xi->grad_buffer();
                       const double dd = static_cast<double>(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double sum_dh = 0.0, sum_dh_h = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dh = g[r * d + j] * gi->data[j];
                           sum_dh += dh;
                           sum_dh_h += dh * xhat[r * d + j];
                         }
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dh = g[r * d + j] * gi->data[j];
                           gx[r * d + j] += inv_std[r] / dd * (dd * dh - sum_dh - xhat[r * d + j] * sum_dh_h);
                         }
                       }
                     });
}

// ---- shape ops ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto ai = a.impl();
  return make_result(std::move(shape), ai->data, {a}, [ai](const detail::TensorImpl& o) { ai->accumulate(o.grad); });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids, Shape out_shape) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw DimensionError("embedding: table must be rank 2, got " + shape_str(table.shape()));
  if (numel_of(out_shape) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids cannot form " + shape_str(out_shape));
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  auto tv = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw RangeError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  out_shape.push_back(d);
  auto ti = table.impl();
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  return make_result(std::move(out_shape), std::move(out), {table}, [ti, d, saved = std::move(saved)](const detail::TensorImpl& o) {
    auto& gt = ti->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) gt[saved[i] * d + j] += o.grad[i * d + j];
    }
  });
}

Tensor repeat_rows(const Tensor& a, std::size_t times) {
  require_defined(a, "repeat_rows");
  if (a.rank() < 2) throw DimensionError("repeat_rows: rank < 2 for " + shape_str(a.shape()));
  if (times == 0) throw ContractError("repeat_rows: repeat count must be >= 1");
  const std::size_t d = a.dim(-1);
  const std::size_t rows = a.numel() / d;
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 2] *= times;
  std::vector<double> out(a.numel() * times);
  auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t t = 0; t < times; ++t) std::copy_n(av.data() + r * d, d, out.data() + (r * times + t) * d);
  }
  auto ai = a.impl();
  return make_result(std::move(out_shape), std::move(out), {a}, [ai, d, rows, times](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t t = 0; t < times; ++t) {
        for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += o.grad[(r * times + t) * d + j];
      }
    }
  });
}

Tensor expand_rows(const Tensor& a, std::size_t count) {
  require_defined(a, "expand_rows");
  if (a.rank() < 1) throw DimensionError("expand_rows: scalar input");
  const std::size_t d = a.dim(-1);
  const std::size_t outer = a.numel() / d;
  Shape out_shape = a.shape();
  out_shape.insert(out_shape.end() - 1, count);
  std::vector<double> out(outer * count * d);
  auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < count; ++c) std::copy_n(av.data() + o * d, d, out.data() + (o * count + c) * d);
  }
  auto ai = a.impl();
  return make_result(std::move(out_shape), std::move(out), {a}, [ai, d, outer, count](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t q = 0; q < outer; ++q) {
      for (std::size_t c = 0; c < count; ++c) {
        for (std::size_t j = 0; j < d; ++j) ga[q * d + j] += o.grad[(q * count + c) * d + j];
      }
    }
  });
}

Tensor split_heads(const Tensor& a, std::size_t heads) {
  require_defined(a, "split_heads");
  if (a.rank() != 3 || heads == 0 || a.dim(2) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(a.shape()) + " into " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t b = a.dim(0), n = a.dim(1), hd = a.dim(2), d = hd / heads;
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(av.data() + (bi * n + i) * hd + h * d, d, out.data() + ((bi * heads + h) * n + i) * d);
      }
    }
  }
  auto ai = a.impl();
  return make_result({b, heads, n, d}, std::move(out), {a}, [ai, b, n, heads, d, hd](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
          const double* src = o.grad.data() + ((bi * heads + h) * n + i) * d;
          double* dst = ga.data() + (bi * n + i) * hd + h * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    }
  });
}

Tensor merge_heads(const Tensor& a) {
  require_defined(a, "merge_heads");
  if (a.rank() != 4) throw DimensionError("merge_heads: expected rank 4, got " + shape_str(a.shape()));
  const std::size_t b = a.dim(0), heads = a.dim(1), n = a.dim(2), d = a.dim(3), hd = heads * d;
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(av.data() + ((bi * heads + h) * n + i) * d, d, out.data() + (bi * n + i) * hd + h * d);
      }
    }
  }
  auto ai = a.impl();
  return make_result({b, n, hd}, std::move(out), {a}, [ai, b, n, heads, d, hd](const detail::TensorImpl& o) {
    auto& ga = ai->grad_buffer();
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
          const double* src = o.grad.data() + (bi * n + i) * hd + h * d;
          double* dst = ga.data() + ((bi * heads + h) * n + i) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    }
  });
}

}  // namespace spattn
