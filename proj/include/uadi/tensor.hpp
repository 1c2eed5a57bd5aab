#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace uadi {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised by every primitive whose input shapes violate its contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor;

/// 64-byte aligned storage. Eigen chooses its vectorised loop peeling from the
/// buffer address, so with plain malloc alignment the rounding of a product
/// would depend on where the heap happened to place the operands.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};
using Buffer = std::vector<double, AlignedAllocator<double>>;

/// One recorded value in the computation graph. Leaves hold parameters and
/// inputs; interior nodes carry the closure that pushes their gradient into
/// their inputs.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Buffer& grad_buffer();
};

/// Handle to a graph node. Copies share the node (reference semantics, like
/// the tensor types of the usual autograd libraries).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  /// Size of axis `axis`; negative values count from the back.
  int dim(int axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> data() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; all zeros when nothing has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  /// New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, primitives on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Graph traversal

/// Nodes reachable from `root` in an order where each node's inputs precede it.
std::vector<const Node*> topological_order(const Tensor& root);

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// interior gradients are recomputed from scratch each call.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Primitives. Binary elementwise ops broadcast over axes of size 1 between
// tensors of equal rank.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

/// scale * x + shift
Tensor affine(const Tensor& x, double scale, double shift);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
/// x^p for x >= 0. The derivative at x = 0 is taken as 0 when p < 1.
Tensor pow(const Tensor& x, double p);

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x (N,K) * weight (K,M) + bias (M).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// NHWC convolution with "same" zero padding. weight is (k,k,Cin,Cout),
/// bias (Cout) or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride = 1,
              int dilation = 1);
/// Depthwise 3x3-style convolution, weight (k,k,C), stride 1, same padding.
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int dilation);
/// Transposed convolution, kernel 2 stride 2: (B,H,W,Cin) -> (B,2H,2W,Cout).
/// weight is (Cin,2,2,Cout).
Tensor conv_transpose2x2(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdim = false);
Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdim = false);
/// Population variance over `axes`.
Tensor variance(const Tensor& x, const std::vector<int>& axes, bool keepdim = false);
/// Population standard deviation over `axes`; derivative is 0 where std == 0.
Tensor stddev(const Tensor& x, const std::vector<int>& axes, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
/// Mean over the two spatial axes: (B,H,W,C) -> (B,C).
Tensor global_avg_pool(const Tensor& x);

/// Normalizes over every axis except the last. In training mode batch
/// statistics are used and the running buffers are updated in place as
/// running = momentum * running + (1 - momentum) * batch.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, double momentum = 0.9, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int begin, int end);
Tensor reshape(const Tensor& x, const Shape& shape);

Tensor upsample_nearest(const Tensor& x, int factor);
/// Half-pixel-centre bilinear upsampling with edge clamping.
Tensor upsample_bilinear(const Tensor& x, int factor);

class Rng;
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// ---------------------------------------------------------------------------
// Text dump: "shape: d0 d1 ..." then whitespace-separated row-major values.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

}  // namespace uadi
