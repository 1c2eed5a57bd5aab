#include "uadi/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "uadi/random.hpp"

namespace uadi {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using RowVecMap = Eigen::Map<Eigen::RowVectorXd>;
using ConstRowVecMap = Eigen::Map<const Eigen::RowVectorXd>;

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b,
                             std::string_view what = "shape mismatch") {
  std::ostringstream os;
  os << op << ": " << what << " " << shape_str(a) << " vs " << shape_str(b);
  throw ShapeError(os.str());
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, std::string_view what) {
  std::ostringstream os;
  os << op << ": " << what << " " << shape_str(a);
  throw ShapeError(os.str());
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

/// Walks every index of `out`, tracking flat offsets into two operands whose
/// per-axis strides are `sa` and `sb` (0 on broadcast axes).
template <class F>
void for_each_pair(const Shape& out, const std::vector<std::size_t>& sa,
                   const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  const int r = static_cast<int>(out.size());
  std::vector<int> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

Broadcast plan_broadcast(std::string_view op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) shape_fail(op, a, b, "rank mismatch");
  Broadcast p;
  p.same = (a == b);
  p.out.resize(a.size());
  const auto st_a = strides_of(a), st_b = strides_of(b);
  p.sa.resize(a.size());
  p.sb.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) {
      p.out[i] = a[i];
    } else if (a[i] == 1) {
      p.out[i] = b[i];
    } else if (b[i] == 1) {
      p.out[i] = a[i];
    } else {
      shape_fail(op, a, b);
    }
    p.sa[i] = (a[i] == 1 && p.out[i] != 1) ? 0 : st_a[i];
    p.sb[i] = (b[i] == 1 && p.out[i] != 1) ? 0 : st_b[i];
  }
  return p;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

Tensor make_op(std::string_view op, Shape shape, Buffer value,
               std::initializer_list<const Tensor*> inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->op = op;
    for (const Tensor* t : inputs) node->inputs.push_back(t->defined() ? t->node_ptr() : nullptr);
    node->backward = std::move(bw);
  }
  return Tensor(std::move(node));
}

bool wants_grad(const Node& self, std::size_t k) {
  return self.inputs[k] && self.inputs[k]->requires_grad;
}

int normalize_axis(std::string_view op, const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) shape_fail(op, s, "axis out of range for");
  return axis;
}

std::vector<int> normalize_axes(std::string_view op, const Shape& s, const std::vector<int>& axes) {
  std::vector<int> out;
  for (int a : axes) out.push_back(normalize_axis(op, s, a));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

struct Reduction {
  Shape keep;  // reduced axes set to 1
  Shape out;   // keepdim ? keep : reduced axes dropped
  std::vector<std::size_t> in_strides, out_strides;
  std::size_t group = 1;  // elements per output cell
};

Reduction plan_reduction(std::string_view op, const Shape& s, const std::vector<int>& axes_in,
                         bool keepdim) {
  const auto axes = normalize_axes(op, s, axes_in);
  Reduction r;
  r.keep = s;
  for (int a : axes) {
    r.group *= s[a];
    r.keep[a] = 1;
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool reduced = std::find(axes.begin(), axes.end(), static_cast<int>(i)) != axes.end();
    if (!reduced || keepdim) r.out.push_back(r.keep[i]);
  }
  r.in_strides = strides_of(s);
  r.out_strides = strides_of(r.keep);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (r.keep[i] == 1 && s[i] != 1) r.out_strides[i] = 0;
  return r;
}

template <class F, class DF>
Tensor unary_op(std::string_view name, const Tensor& x, F f, DF df) {
  const auto xs = x.data();
  Buffer y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = f(xs[i]);
  return make_op(name, x.shape(), std::move(y), {&x}, [df](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * df(in.value[i], self.value[i]);
  });
}

template <class F, class GA, class GB>
Tensor binary_op(std::string_view name, const Tensor& a, const Tensor& b, F f, GA ga, GB gb) {
  auto plan = plan_broadcast(name, a.shape(), b.shape());
  const auto av = a.data(), bv = b.data();
  Buffer y(shape_numel(plan.out));
  if (plan.same) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i]);
  } else {
    for_each_pair(plan.out, plan.sa, plan.sb,
                  [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = f(av[ia], bv[ib]); });
  }
  Shape out = plan.out;
  return make_op(name, std::move(out), std::move(y), {&a, &b},
                 [plan = std::move(plan), ga, gb](Node& self) {
                   const Node& na = *self.inputs[0];
                   const Node& nb = *self.inputs[1];
                   const bool da = na.requires_grad, db = nb.requires_grad;
                   double* gA = da ? self.inputs[0]->grad_buffer().data() : nullptr;
                   double* gB = db ? self.inputs[1]->grad_buffer().data() : nullptr;
                   auto step = [&](std::size_t i, std::size_t ia, std::size_t ib) {
                     const double g = self.grad[i];
                     if (da) gA[ia] += g * ga(na.value[ia], nb.value[ib]);
                     if (db) gB[ib] += g * gb(na.value[ia], nb.value[ib]);
                   };
                   if (plan.same) {
                     for (std::size_t i = 0; i < self.grad.size(); ++i) step(i, i, i);
                   } else {
                     for_each_pair(plan.out, plan.sa, plan.sb, step);
                   }
                 });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

struct ConvGeom {
  int B, H, W, Cin, Ho, Wo, k, stride, dil, pad;
  std::size_t rows() const { return static_cast<std::size_t>(B) * Ho * Wo; }
  std::size_t cols() const { return static_cast<std::size_t>(k) * k * Cin; }
  bool trivial() const { return k == 1 && stride == 1; }
};

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t ncol = g.cols();
  for (int b = 0; b < g.B; ++b)
    for (int oy = 0; oy < g.Ho; ++oy)
      for (int ox = 0; ox < g.Wo; ++ox) {
        double* row = cols + ((static_cast<std::size_t>(b) * g.Ho + oy) * g.Wo + ox) * ncol;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky * g.dil;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride - g.pad + kx * g.dil;
            double* dst = row + (static_cast<std::size_t>(ky) * g.k + kx) * g.Cin;
            if (iy < 0 || iy >= g.H || ix < 0 || ix >= g.W) {
              std::fill(dst, dst + g.Cin, 0.0);
            } else {
              const double* src = x + ((static_cast<std::size_t>(b) * g.H + iy) * g.W + ix) * g.Cin;
              std::copy(src, src + g.Cin, dst);
            }
          }
        }
      }
}

void col2im(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t ncol = g.cols();
  for (int b = 0; b < g.B; ++b)
    for (int oy = 0; oy < g.Ho; ++oy)
      for (int ox = 0; ox < g.Wo; ++ox) {
        const double* row = cols + ((static_cast<std::size_t>(b) * g.Ho + oy) * g.Wo + ox) * ncol;
        for (int ky = 0; ky < g.k; ++ky) {
          const int iy = oy * g.stride - g.pad + ky * g.dil;
          if (iy < 0 || iy >= g.H) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            const int ix = ox * g.stride - g.pad + kx * g.dil;
            if (ix < 0 || ix >= g.W) continue;
            const double* src = row + (static_cast<std::size_t>(ky) * g.k + kx) * g.Cin;
            double* dst = dx + ((static_cast<std::size_t>(b) * g.H + iy) * g.W + ix) * g.Cin;
            for (int c = 0; c < g.Cin; ++c) dst[c] += src[c];
          }
        }
      }
}

void require_rank(std::string_view op, const Tensor& t, int rank) {
  if (t.rank() != rank) {
    std::ostringstream os;
    os << op << ": expected rank " << rank << ", got " << shape_str(t.shape());
    throw ShapeError(os.str());
  }
}

}  // namespace

// ---------------------------------------------------------------------------

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

Buffer& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor make_leaf(const Shape& shape, Buffer values, bool requires_grad) {
  for (int d : shape)
    if (d <= 0) shape_fail("tensor", shape, "non-positive dimension in");
  if (shape_numel(shape) != values.size()) {
    std::ostringstream os;
    os << "tensor: " << values.size() << " values do not fill shape " << shape_str(shape);
    throw ShapeError(os.str());
  }
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return make_leaf(shape, Buffer(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  return make_leaf(shape, Buffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

int Tensor::dim(int axis) const {
  return node_->shape[normalize_axis("dim", node_->shape, axis)];
}

double Tensor::item() const {
  if (numel() != 1) shape_fail("item", shape(), "not a single-element tensor:");
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return {node_->grad.begin(), node_->grad.end()};
}

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
  return make_leaf(shape(), node_->value, requires_grad);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------

std::vector<const Node*> topological_order(const Tensor& root) {
  std::vector<const Node*> order;
  if (!root.defined()) return order;
  std::unordered_set<const Node*> seen;
  std::vector<std::pair<const Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  const auto order = topological_order(loss);
  for (const Node* n : order) {
    auto* m = const_cast<Node*>(n);
    if (!m->is_leaf) m->grad.assign(m->value.size(), 0.0);
  }
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* m = const_cast<Node*>(*it);
    if (!m->is_leaf && m->backward) m->backward(*m);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor affine(const Tensor& x, double scale, double shift) {
  return unary_op(
      "affine", x, [=](double v) { return scale * v + shift; },
      [=](double, double) { return scale; });
}

Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor pow(const Tensor& x, double p) {
  return unary_op(
      "pow", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) {
        if (v == 0.0) return p < 1.0 ? 0.0 : (p == 1.0 ? 1.0 : 0.0);
        return p * std::pow(v, p - 1.0);
      });
}

// ---------------------------------------------------------------------------
// Softmax family (last axis)

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) shape_fail("softmax", x.shape(), "needs rank >= 1, got");
  const int n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  Buffer y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* out = y.data() + r * n;
    const double m = *std::max_element(in, in + n);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (out[j] = std::exp(in[j] - m));
    for (int j = 0; j < n; ++j) out[j] /= s;
  }
  return make_op("softmax", x.shape(), std::move(y), {&x}, [n, rows](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* s = self.value.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += gy[j] * s[j];
      for (int j = 0; j < n; ++j) g[r * n + j] += s[j] * (gy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() < 1) shape_fail("log_softmax", x.shape(), "needs rank >= 1, got");
  const int n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  Buffer y(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    const double m = *std::max_element(in, in + n);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(in[j] - m);
    const double lse = m + std::log(s);
    for (int j = 0; j < n; ++j) y[r * n + j] = in[j] - lse;
  }
  return make_op("log_softmax", x.shape(), std::move(y), {&x}, [n, rows](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* ly = self.value.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double total = 0.0;
      for (int j = 0; j < n; ++j) total += gy[j];
      for (int j = 0; j < n; ++j) g[r * n + j] += gy[j] - std::exp(ly[j]) * total;
    }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape(), "inner dimension mismatch");
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Buffer y(static_cast<std::size_t>(M) * N);
  MatMap(y.data(), M, N).noalias() =
      ConstMatMap(a.data().data(), M, K) * ConstMatMap(b.data().data(), K, N);
  return make_op("matmul", {M, N}, std::move(y), {&a, &b}, [M, K, N](Node& self) {
    ConstMatMap gy(self.grad.data(), M, N);
    if (wants_grad(self, 0))
      MatMap(self.inputs[0]->grad_buffer().data(), M, K).noalias() +=
          gy * ConstMatMap(self.inputs[1]->value.data(), K, N).transpose();
    if (wants_grad(self, 1))
      MatMap(self.inputs[1]->grad_buffer().data(), K, N).noalias() +=
          ConstMatMap(self.inputs[0]->value.data(), M, K).transpose() * gy;
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  if (x.dim(1) != weight.dim(0))
    shape_fail("linear", x.shape(), weight.shape(), "input width does not match weight");
  const int N = x.dim(0), K = x.dim(1), M = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != M))
    shape_fail("linear", weight.shape(), bias.shape(), "bias does not match weight");
  Buffer y(static_cast<std::size_t>(N) * M);
  MatMap out(y.data(), N, M);
  out.noalias() = ConstMatMap(x.data().data(), N, K) * ConstMatMap(weight.data().data(), K, M);
  if (bias.defined()) out.rowwise() += ConstRowVecMap(bias.data().data(), M);
  return make_op("linear", {N, M}, std::move(y), {&x, &weight, &bias}, [N, K, M](Node& self) {
    ConstMatMap gy(self.grad.data(), N, M);
    if (wants_grad(self, 0))
      MatMap(self.inputs[0]->grad_buffer().data(), N, K).noalias() +=
          gy * ConstMatMap(self.inputs[1]->value.data(), K, M).transpose();
    if (wants_grad(self, 1))
      MatMap(self.inputs[1]->grad_buffer().data(), K, M).noalias() +=
          ConstMatMap(self.inputs[0]->value.data(), N, K).transpose() * gy;
    if (wants_grad(self, 2))
      RowVecMap(self.inputs[2]->grad_buffer().data(), M) += gy.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Convolutions

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int dilation) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  if (weight.dim(0) != weight.dim(1) || weight.dim(0) % 2 == 0)
    shape_fail("conv2d", weight.shape(), "kernel must be square with odd size, got");
  if (x.dim(3) != weight.dim(2))
    shape_fail("conv2d", x.shape(), weight.shape(), "input channels do not match kernel");
  if (stride < 1 || dilation < 1) throw std::invalid_argument("conv2d: stride and dilation >= 1");
  const int Cout = weight.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
    shape_fail("conv2d", weight.shape(), bias.shape(), "bias does not match kernel");

  ConvGeom g{};
  g.B = x.dim(0);
  g.H = x.dim(1);
  g.W = x.dim(2);
  g.Cin = x.dim(3);
  g.k = weight.dim(0);
  g.stride = stride;
  g.dil = dilation;
  g.pad = dilation * (g.k - 1) / 2;
  g.Ho = (g.H - 1) / stride + 1;
  g.Wo = (g.W - 1) / stride + 1;

  const auto R = static_cast<Eigen::Index>(g.rows());
  const auto Kc = static_cast<Eigen::Index>(g.cols());
  Buffer cols;
  const double* colp = x.data().data();
  if (!g.trivial()) {
    cols.resize(g.rows() * g.cols());
    im2col(x.data().data(), g, cols.data());
    colp = cols.data();
  }
  Buffer y(g.rows() * Cout);
  MatMap out(y.data(), R, Cout);
  out.noalias() = ConstMatMap(colp, R, Kc) * ConstMatMap(weight.data().data(), Kc, Cout);
  if (bias.defined()) out.rowwise() += ConstRowVecMap(bias.data().data(), Cout);

  return make_op("conv2d", {g.B, g.Ho, g.Wo, Cout}, std::move(y), {&x, &weight, &bias},
                 [g, Cout, R, Kc](Node& self) {
                   ConstMatMap gy(self.grad.data(), R, Cout);
                   const Node& xin = *self.inputs[0];
                   if (wants_grad(self, 1)) {
                     Buffer cols;
                     const double* colp = xin.value.data();
                     if (!g.trivial()) {
                       cols.resize(g.rows() * g.cols());
                       im2col(xin.value.data(), g, cols.data());
                       colp = cols.data();
                     }
                     MatMap(self.inputs[1]->grad_buffer().data(), Kc, Cout).noalias() +=
                         ConstMatMap(colp, R, Kc).transpose() * gy;
                   }
                   if (wants_grad(self, 2))
                     RowVecMap(self.inputs[2]->grad_buffer().data(), Cout) += gy.colwise().sum();
                   if (wants_grad(self, 0)) {
                     ConstMatMap w(self.inputs[1]->value.data(), Kc, Cout);
                     auto& gx = self.inputs[0]->grad_buffer();
                     if (g.trivial()) {
                       MatMap(gx.data(), R, Kc).noalias() += gy * w.transpose();
                     } else {
                       Buffer dcols(g.rows() * g.cols());
                       MatMap(dcols.data(), R, Kc).noalias() = gy * w.transpose();
                       col2im(dcols.data(), g, gx.data());
                     }
                   }
                 });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int dilation) {
  require_rank("depthwise_conv2d", x, 4);
  require_rank("depthwise_conv2d", weight, 3);
  if (weight.dim(0) != weight.dim(1) || weight.dim(0) % 2 == 0)
    shape_fail("depthwise_conv2d", weight.shape(), "kernel must be square with odd size, got");
  if (x.dim(3) != weight.dim(2))
    shape_fail("depthwise_conv2d", x.shape(), weight.shape(), "channel mismatch");
  if (dilation < 1) throw std::invalid_argument("depthwise_conv2d: dilation >= 1");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3), k = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != C))
    shape_fail("depthwise_conv2d", weight.shape(), bias.shape(), "bias does not match kernel");
  const int pad = dilation * (k - 1) / 2;

  // Calls f(out_offset, in_offset, weight_offset) for every valid tap.
  auto taps = [=](auto&& f) {
    for (int b = 0; b < B; ++b)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          const std::size_t o = ((static_cast<std::size_t>(b) * H + y) * W + xx) * C;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y - pad + ky * dilation;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = xx - pad + kx * dilation;
              if (ix < 0 || ix >= W) continue;
              const std::size_t i = ((static_cast<std::size_t>(b) * H + iy) * W + ix) * C;
              const std::size_t wo = (static_cast<std::size_t>(ky) * k + kx) * C;
              f(o, i, wo);
            }
          }
        }
  };

  const auto xv = x.data();
  const auto wv = weight.data();
  Buffer y(x.numel(), 0.0);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t i = 0; i < y.size(); i += C) std::copy(bv.begin(), bv.end(), y.begin() + i);
  }
  taps([&](std::size_t o, std::size_t i, std::size_t wo) {
    for (int c = 0; c < C; ++c) y[o + c] += xv[i + c] * wv[wo + c];
  });

  return make_op("depthwise_conv2d", x.shape(), std::move(y), {&x, &weight, &bias},
                 [taps, C](Node& self) {
                   const auto& xv = self.inputs[0]->value;
                   const auto& wv = self.inputs[1]->value;
                   const auto& gy = self.grad;
                   double* gx = wants_grad(self, 0) ? self.inputs[0]->grad_buffer().data() : nullptr;
                   double* gw = wants_grad(self, 1) ? self.inputs[1]->grad_buffer().data() : nullptr;
                   if (gx || gw) {
                     taps([&](std::size_t o, std::size_t i, std::size_t wo) {
                       for (int c = 0; c < C; ++c) {
                         if (gx) gx[i + c] += gy[o + c] * wv[wo + c];
                         if (gw) gw[wo + c] += gy[o + c] * xv[i + c];
                       }
                     });
                   }
                   if (wants_grad(self, 2)) {
                     auto& gb = self.inputs[2]->grad_buffer();
                     for (std::size_t o = 0; o < gy.size(); o += C)
                       for (int c = 0; c < C; ++c) gb[c] += gy[o + c];
                   }
                 });
}

Tensor conv_transpose2x2(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("conv_transpose2x2", x, 4);
  require_rank("conv_transpose2x2", weight, 4);
  if (weight.dim(1) != 2 || weight.dim(2) != 2 || weight.dim(0) != x.dim(3))
    shape_fail("conv_transpose2x2", x.shape(), weight.shape(), "kernel must be (Cin,2,2,Cout) for");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3), Cout = weight.dim(3);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
    shape_fail("conv_transpose2x2", weight.shape(), bias.shape(), "bias does not match kernel");
  const Eigen::Index R = static_cast<Eigen::Index>(B) * H * W;

  Buffer tmp(static_cast<std::size_t>(R) * 4 * Cout);
  MatMap(tmp.data(), R, 4 * Cout).noalias() =
      ConstMatMap(x.data().data(), R, Cin) * ConstMatMap(weight.data().data(), Cin, 4 * Cout);

  // tmp row (b,i,j) holds [dy][dx][co] for output pixel (2i+dy, 2j+dx).
  auto scatter = [=](auto&& f) {
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const std::size_t r = (static_cast<std::size_t>(b) * H + i) * W + j;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t o =
                  ((static_cast<std::size_t>(b) * 2 * H + 2 * i + dy) * 2 * W + 2 * j + dx) * Cout;
              const std::size_t t = r * 4 * Cout + (dy * 2 + dx) * Cout;
              f(o, t);
            }
        }
  };

  Buffer y(static_cast<std::size_t>(R) * 4 * Cout);
  const double* bv = bias.defined() ? bias.data().data() : nullptr;
  scatter([&](std::size_t o, std::size_t t) {
    for (int c = 0; c < Cout; ++c) y[o + c] = tmp[t + c] + (bv ? bv[c] : 0.0);
  });

  return make_op("conv_transpose2x2", {B, 2 * H, 2 * W, Cout}, std::move(y), {&x, &weight, &bias},
                 [scatter, R, Cin, Cout](Node& self) {
                   Buffer gt(static_cast<std::size_t>(R) * 4 * Cout);
                   scatter([&](std::size_t o, std::size_t t) {
                     for (int c = 0; c < Cout; ++c) gt[t + c] = self.grad[o + c];
                   });
                   ConstMatMap gtm(gt.data(), R, 4 * Cout);
                   if (wants_grad(self, 0))
                     MatMap(self.inputs[0]->grad_buffer().data(), R, Cin).noalias() +=
                         gtm * ConstMatMap(self.inputs[1]->value.data(), Cin, 4 * Cout).transpose();
                   if (wants_grad(self, 1))
                     MatMap(self.inputs[1]->grad_buffer().data(), Cin, 4 * Cout).noalias() +=
                         ConstMatMap(self.inputs[0]->value.data(), R, Cin).transpose() * gtm;
                   if (wants_grad(self, 2)) {
                     auto& gb = self.inputs[2]->grad_buffer();
                     for (std::size_t o = 0; o < self.grad.size(); o += Cout)
                       for (int c = 0; c < Cout; ++c) gb[c] += self.grad[o + c];
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  auto r = plan_reduction("sum", x.shape(), axes, keepdim);
  Buffer y(shape_numel(r.keep), 0.0);
  const auto xv = x.data();
  for_each_pair(x.shape(), r.in_strides, r.out_strides,
                [&](std::size_t i, std::size_t, std::size_t o) { y[o] += xv[i]; });
  Shape out = r.out;
  return make_op("sum", std::move(out), std::move(y), {&x}, [r = std::move(r)](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for_each_pair(self.inputs[0]->shape, r.in_strides, r.out_strides,
                  [&](std::size_t i, std::size_t, std::size_t o) { g[i] += self.grad[o]; });
  });
}

Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  auto r = plan_reduction("mean", x.shape(), axes, keepdim);
  return affine(sum(x, axes, keepdim), 1.0 / static_cast<double>(r.group), 0.0);
}

namespace {

struct Moments {
  Buffer mean, var;
};

Moments moments(const Tensor& x, const Reduction& r) {
  Moments m{Buffer(shape_numel(r.keep), 0.0),
            Buffer(shape_numel(r.keep), 0.0)};
  const auto xv = x.data();
  const double inv = 1.0 / static_cast<double>(r.group);
  for_each_pair(x.shape(), r.in_strides, r.out_strides,
                [&](std::size_t i, std::size_t, std::size_t o) { m.mean[o] += xv[i]; });
  for (double& v : m.mean) v *= inv;
  for_each_pair(x.shape(), r.in_strides, r.out_strides, [&](std::size_t i, std::size_t, std::size_t o) {
    const double d = xv[i] - m.mean[o];
    m.var[o] += d * d;
  });
  for (double& v : m.var) v *= inv;
  return m;
}

}  // namespace

Tensor variance(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  auto r = plan_reduction("variance", x.shape(), axes, keepdim);
  auto m = moments(x, r);
  Shape out = r.out;
  return make_op("variance", std::move(out), m.var, {&x},
                 [r = std::move(r), mu = std::move(m.mean)](Node& self) {
                   const auto& xv = self.inputs[0]->value;
                   auto& g = self.inputs[0]->grad_buffer();
                   const double scale = 2.0 / static_cast<double>(r.group);
                   for_each_pair(self.inputs[0]->shape, r.in_strides, r.out_strides,
                                 [&](std::size_t i, std::size_t, std::size_t o) {
                                   g[i] += self.grad[o] * scale * (xv[i] - mu[o]);
                                 });
                 });
}

Tensor stddev(const Tensor& x, const std::vector<int>& axes, bool keepdim) {
  auto r = plan_reduction("stddev", x.shape(), axes, keepdim);
  auto m = moments(x, r);
  Buffer sd(m.var.size());
  for (std::size_t i = 0; i < sd.size(); ++i) sd[i] = std::sqrt(m.var[i]);
  Shape out = r.out;
  return make_op("stddev", std::move(out), std::move(sd), {&x},
                 [r = std::move(r), mu = std::move(m.mean)](Node& self) {
                   const auto& xv = self.inputs[0]->value;
                   auto& g = self.inputs[0]->grad_buffer();
                   const double n = static_cast<double>(r.group);
                   for_each_pair(self.inputs[0]->shape, r.in_strides, r.out_strides,
                                 [&](std::size_t i, std::size_t, std::size_t o) {
                                   const double s = self.value[o];
                                   if (s > 0.0) g[i] += self.grad[o] * (xv[i] - mu[o]) / (n * s);
                                 });
                 });
}

Tensor sum_all(const Tensor& x) {
  std::vector<int> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(x, axes, false);
}

Tensor mean_all(const Tensor& x) {
  return affine(sum_all(x), 1.0 / static_cast<double>(x.numel()), 0.0);
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  return mean(x, {1, 2}, false);
}

// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double momentum, double eps) {
  if (x.rank() < 2) shape_fail("batch_norm", x.shape(), "needs rank >= 2, got");
  const int C = x.dim(-1);
  for (const Tensor* p : {&gamma, &beta, static_cast<const Tensor*>(&running_mean),
                          static_cast<const Tensor*>(&running_var)})
    if (p->rank() != 1 || p->dim(0) != C)
      shape_fail("batch_norm", x.shape(), p->shape(), "per-channel parameter mismatch");
  const std::size_t N = x.numel() / C;
  const auto xv = x.data();

  Buffer mu(C, 0.0), var(C, 0.0);
  if (training) {
    for (std::size_t n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) mu[c] += xv[n * C + c];
    for (auto& v : mu) v /= static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double d = xv[n * C + c] - mu[c];
        var[c] += d * d;
      }
    for (auto& v : var) v /= static_cast<double>(N);
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (int c = 0; c < C; ++c) {
      rm[c] = momentum * rm[c] + (1.0 - momentum) * mu[c];
      rv[c] = momentum * rv[c] + (1.0 - momentum) * var[c];
    }
  } else {
    std::copy(running_mean.data().begin(), running_mean.data().end(), mu.begin());
    std::copy(running_var.data().begin(), running_var.data().end(), var.begin());
  }
  Buffer inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);

  const auto gv = gamma.data(), bv = beta.data();
  Buffer xhat(x.numel()), y(x.numel());
  for (std::size_t n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t i = n * C + c;
      xhat[i] = (xv[i] - mu[c]) * inv_std[c];
      y[i] = gv[c] * xhat[i] + bv[c];
    }

  return make_op("batch_norm", x.shape(), std::move(y), {&x, &gamma, &beta},
                 [C, N, training, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node& self) {
                   const auto& gy = self.grad;
                   Buffer sum_g(C, 0.0), sum_gx(C, 0.0);
                   for (std::size_t n = 0; n < N; ++n)
                     for (int c = 0; c < C; ++c) {
                       sum_g[c] += gy[n * C + c];
                       sum_gx[c] += gy[n * C + c] * xhat[n * C + c];
                     }
                   if (wants_grad(self, 1)) {
                     auto& gg = self.inputs[1]->grad_buffer();
                     for (int c = 0; c < C; ++c) gg[c] += sum_gx[c];
                   }
                   if (wants_grad(self, 2)) {
                     auto& gb = self.inputs[2]->grad_buffer();
                     for (int c = 0; c < C; ++c) gb[c] += sum_g[c];
                   }
                   if (wants_grad(self, 0)) {
                     const auto& gamma = self.inputs[1]->value;
                     auto& gx = self.inputs[0]->grad_buffer();
                     const double invN = 1.0 / static_cast<double>(N);
                     for (std::size_t n = 0; n < N; ++n)
                       for (int c = 0; c < C; ++c) {
                         const std::size_t i = n * C + c;
                         const double scale = gamma[c] * inv_std[c];
                         if (training) {
                           gx[i] += scale * (gy[i] - invN * sum_g[c] - xhat[i] * invN * sum_gx[c]);
                         } else {
                           gx[i] += scale * gy[i];
                         }
                       }
                   }
                 });
}

// ---------------------------------------------------------------------------
// Layout

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  axis = normalize_axis("concat", s0, axis);
  Shape out = s0;
  out[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != static_cast<int>(s0.size())) shape_fail("concat", s0, p.shape(), "rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      if (i != axis && p.shape()[i] != s0[i]) shape_fail("concat", s0, p.shape());
    out[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < static_cast<int>(s0.size()); ++i) inner *= s0[i];

  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(static_cast<std::size_t>(p.shape()[axis]) * inner);
  const std::size_t row = static_cast<std::size_t>(out[axis]) * inner;
  Buffer y(shape_numel(out));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * widths[k], widths[k], y.data() + o * row + off);
    off += widths[k];
  }

  auto node = std::make_shared<Node>();
  node->shape = out;
  node->value = std::move(y);
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (g_grad_enabled && needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->op = "concat";
    for (const auto& p : parts) node->inputs.push_back(p.node_ptr());
    node->backward = [outer, row, widths](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        if (self.inputs[k]->requires_grad) {
          auto& g = self.inputs[k]->grad_buffer();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < widths[k]; ++j)
              g[o * widths[k] + j] += self.grad[o * row + off + j];
        }
        off += widths[k];
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor slice(const Tensor& x, int axis, int begin, int end) {
  axis = normalize_axis("slice", x.shape(), axis);
  if (begin < 0 || end > x.shape()[axis] || begin >= end)
    shape_fail("slice", x.shape(), "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                       ") invalid for");
  Shape out = x.shape();
  out[axis] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t in_row = static_cast<std::size_t>(x.shape()[axis]) * inner;
  const std::size_t out_row = static_cast<std::size_t>(end - begin) * inner;
  const std::size_t off = static_cast<std::size_t>(begin) * inner;
  Buffer y(shape_numel(out));
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.data() + o * in_row + off, out_row, y.data() + o * out_row);
  return make_op("slice", std::move(out), std::move(y), {&x}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < out_row; ++j) g[o * in_row + off + j] += self.grad[o * out_row + j];
  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape, "element count differs");
  Buffer y(x.data().begin(), x.data().end());
  return make_op("reshape", shape, std::move(y), {&x}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  require_rank("upsample_nearest", x, 4);
  if (factor < 1) throw std::invalid_argument("upsample_nearest: factor >= 1");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  auto index = [=](int b, int oy, int ox) {
    return (((static_cast<std::size_t>(b) * H + oy / factor) * W + ox / factor) * C);
  };
  Buffer y(static_cast<std::size_t>(B) * Ho * Wo * C);
  const auto xv = x.data();
  for (int b = 0; b < B; ++b)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        std::copy_n(xv.data() + index(b, oy, ox), C,
                    y.data() + ((static_cast<std::size_t>(b) * Ho + oy) * Wo + ox) * C);
  return make_op("upsample_nearest", {B, Ho, Wo, C}, std::move(y), {&x}, [=](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const std::size_t o = ((static_cast<std::size_t>(b) * Ho + oy) * Wo + ox) * C;
          const std::size_t i = index(b, oy, ox);
          for (int c = 0; c < C; ++c) g[i + c] += self.grad[o + c];
        }
  });
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
  require_rank("upsample_bilinear", x, 4);
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor >= 1");
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  struct Tap {
    int i0, i1;
    double w1;
  };
  auto taps = [factor](int n_in, int n_out) {
    std::vector<Tap> t(n_out);
    for (int o = 0; o < n_out; ++o) {
      double src = (o + 0.5) / factor - 0.5;
      if (src < 0.0) src = 0.0;
      int i0 = static_cast<int>(std::floor(src));
      if (i0 > n_in - 1) i0 = n_in - 1;
      const int i1 = std::min(i0 + 1, n_in - 1);
      t[o] = {i0, i1, src - i0};
    }
    return t;
  };
  const auto ty = taps(H, Ho), tx = taps(W, Wo);
  auto visit = [=](auto&& f) {
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const std::size_t o = ((static_cast<std::size_t>(b) * Ho + oy) * Wo + ox) * C;
          const auto& a = ty[oy];
          const auto& c = tx[ox];
          auto at = [&](int yy, int xx) { return ((static_cast<std::size_t>(b) * H + yy) * W + xx) * C; };
          f(o, at(a.i0, c.i0), (1 - a.w1) * (1 - c.w1));
          f(o, at(a.i0, c.i1), (1 - a.w1) * c.w1);
          f(o, at(a.i1, c.i0), a.w1 * (1 - c.w1));
          f(o, at(a.i1, c.i1), a.w1 * c.w1);
        }
  };
  Buffer y(static_cast<std::size_t>(B) * Ho * Wo * C, 0.0);
  const auto xv = x.data();
  visit([&](std::size_t o, std::size_t i, double w) {
    for (int c = 0; c < C; ++c) y[o + c] += w * xv[i + c];
  });
  return make_op("upsample_bilinear", {B, Ho, Wo, C}, std::move(y), {&x}, [visit, C](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    visit([&](std::size_t o, std::size_t i, double w) {
      for (int c = 0; c < C; ++c) g[i + c] += w * self.grad[o + c];
    });
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  const double keep = 1.0 / (1.0 - p);
  Buffer mask(x.numel());
  for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep;
  return mul(x, make_leaf(x.shape(), std::move(mask), false));
}

// ---------------------------------------------------------------------------

void write_tensor(std::ostream& os, const Tensor& t) {
  os << "shape:";
  for (int d : t.shape()) os << ' ' << d;
  os << '\n';
  const auto v = t.data();
  const auto old = os.precision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  os << '\n';
  os.precision(old);
}

Tensor read_tensor(std::istream& is) {
  std::string line;
  while (std::getline(is, line) && line.find_first_not_of(" \t\r") == std::string::npos) {
  }
  if (line.rfind("shape:", 0) != 0) throw std::runtime_error("read_tensor: missing 'shape:' header");
  std::istringstream hs(line.substr(6));
  Shape shape;
  int d;
  while (hs >> d) shape.push_back(d);
  Buffer values(shape_numel(shape));
  for (auto& v : values) {
    std::string tok;
    if (!(is >> tok)) throw std::runtime_error("read_tensor: truncated values for " + shape_str(shape));
    v = std::stod(tok);
  }
  is.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  return make_leaf(shape, std::move(values), false);
}

}  // namespace uadi
