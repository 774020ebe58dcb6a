#pragma once

// Reverse-mode automatic differentiation over dense NCHW arrays.
//
// A Tensor is a shared handle: copies alias the same storage, so a parameter
// captured by a graph node and the same parameter held by a network are one
// object. Graph records one node per operator call and replays the recorded
// adjoints in reverse order exactly once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace armsight::ad {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned buffers. Vectorized kernels peel unaligned heads, which
/// changes summation order; fixed alignment keeps results independent of
/// where the allocator happens to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  /// Data without a gradient buffer (inputs, targets).
  static Tensor constant(Shape shape, std::vector<T> values = {});
  /// Trainable leaf; owns a gradient buffer.
  static Tensor variable(Shape shape, std::vector<T> values = {}, std::string name = {});
  /// Operator output. Has a gradient buffer iff requires_grad.
  static Tensor intermediate(Shape shape, bool requires_grad);

  bool defined() const { return static_cast<bool>(s_); }
  std::uint64_t id() const { return s_->id; }
  const Shape& shape() const { return s_->shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->values.size(); }
  const std::string& name() const { return s_->name; }

  // Handle semantics: constness of the handle does not extend to the data.
  std::span<T> values() const { return s_->values; }
  std::span<T> grad() const { return s_->grad; }

  bool requires_grad() const { return s_->requires_grad; }
  bool trainable() const { return s_->trainable; }
  bool frozen() const { return s_->frozen; }
  void set_frozen(bool frozen);

  void zero_grad();
  T item() const;

  /// Deep copy of values (and trainable/frozen flags) into new storage.
  Tensor clone() const;

 private:
  struct Storage {
    std::uint64_t id = 0;
    Shape shape;
    AlignedVector<T> values;
    AlignedVector<T> grad;
    bool requires_grad = false;
    bool trainable = false;
    bool frozen = false;
    std::string name;
  };
  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}
  static std::shared_ptr<Storage> make_storage(Shape shape, std::vector<T> values);

  std::shared_ptr<Storage> s_;
};

enum class OpKind {
  conv2d,
  max_pool2x2,
  dense,
  relu,
  sigmoid,
  softmax,
  nearest_upsample2x,
  resize_bilinear,
  flatten,
  concat,
  add,
  mul,
  scale,
  mean,
  sum,
  weighted_sum,
  custom,
};

std::string_view op_name(OpKind kind);

template <typename T>
class Graph {
 public:
  struct Node {
    OpKind kind;
    std::string label;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output;
    std::function<void()> backward;
  };

  /// recording=false gives an inference graph: operators compute values only.
  explicit Graph(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  bool consumed() const { return consumed_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Whether an operator over these inputs must produce a differentiable output.
  bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) const;

  void record(OpKind kind, std::vector<std::uint64_t> inputs, const Tensor<T>& output,
              std::function<void()> backward, std::string label = {});

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded adjoint in reverse order.
  void backward(Tensor<T>& loss);

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Operators. Layout is NCHW for images, [N, F] for feature rows.

/// x [N,C,H,W], w [O,C,K,K], b [O] -> [N,O,Ho,Wo]; Ho = (H + 2p - K)/s + 1.
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride = 1, std::size_t padding = 0);

/// [N,C,H,W] -> [N,C,H/2,W/2] (floor); gradient routed to the first maximum.
template <typename T>
Tensor<T> max_pool2x2(Graph<T>& g, const Tensor<T>& x);

/// x [N,F], w [O,F], b [O] -> [N,O].
template <typename T>
Tensor<T> dense(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& x);

/// Softmax over the last dimension.
template <typename T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x);

/// [N,C,H,W] -> [N,C,2H,2W].
template <typename T>
Tensor<T> nearest_upsample2x(Graph<T>& g, const Tensor<T>& x);

/// [N,C,H,W] -> [N,C,out_h,out_w], half-pixel centers, edge clamped.
template <typename T>
Tensor<T> resize_bilinear(Graph<T>& g, const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

/// [N, ...] -> [N, prod(...)].
template <typename T>
Tensor<T> flatten(Graph<T>& g, const Tensor<T>& x);

/// Concatenation along axis 1; all other dimensions must agree.
template <typename T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& xs);

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T factor);

/// Scalar [1].
template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x);

/// Scalar [1].
template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x);

/// Σ w_i·x_i over scalar tensors -> scalar [1].
template <typename T>
Tensor<T> weighted_sum(Graph<T>& g, const std::vector<Tensor<T>>& xs, const std::vector<T>& w);

// ---------------------------------------------------------------------------
// Optimizer.

/// Momentum SGD: v <- momentum*v + g; p <- p - lr*v. Frozen tensors are skipped
/// entirely, including their velocity.
template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor<T>> params, T momentum);

  void step(T lr);
  void zero_grad();
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  T momentum_;
};

/// Adam with bias correction. Frozen tensors are skipped, moments included.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8));

  void step(T lr);
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  std::vector<std::uint64_t> t_;
  T beta1_, beta2_, eps_;
};

/// One update of `params` without persistent state beyond `velocity`.
template <typename T>
void sgd_step(std::span<Tensor<T>> params, std::vector<std::vector<T>>& velocity, T lr,
              T momentum);

}  // namespace armsight::ad
