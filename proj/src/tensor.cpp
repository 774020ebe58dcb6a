#include "armsight/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace armsight::ad {

namespace {
std::atomic<std::uint64_t> g_next_id{1};
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::conv2d: return "conv2d";
    case OpKind::max_pool2x2: return "max_pool2x2";
    case OpKind::dense: return "dense";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax: return "softmax";
    case OpKind::nearest_upsample2x: return "nearest_upsample2x";
    case OpKind::resize_bilinear: return "resize_bilinear";
    case OpKind::flatten: return "flatten";
    case OpKind::concat: return "concat";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::weighted_sum: return "weighted_sum";
    case OpKind::custom: return "custom";
  }
  return "unknown";
}

template <typename T>
std::shared_ptr<typename Tensor<T>::Storage> Tensor<T>::make_storage(Shape shape,
                                                                     std::vector<T> values) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  const auto n = ad::numel(shape);
  if (!values.empty() && values.size() != n) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  }
  auto s = std::make_shared<Storage>();
  s->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  s->shape = std::move(shape);
  if (values.empty()) {
    s->values.assign(n, T(0));
  } else {
    s->values.assign(values.begin(), values.end());
  }
  return s;
}

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  return Tensor(make_storage(std::move(shape), std::move(values)));
}

template <typename T>
Tensor<T> Tensor<T>::variable(Shape shape, std::vector<T> values, std::string name) {
  auto s = make_storage(std::move(shape), std::move(values));
  s->grad.assign(s->values.size(), T(0));
  s->requires_grad = true;
  s->trainable = true;
  s->name = std::move(name);
  return Tensor(std::move(s));
}

template <typename T>
Tensor<T> Tensor<T>::intermediate(Shape shape, bool requires_grad) {
  auto s = make_storage(std::move(shape), {});
  if (requires_grad) {
    s->grad.assign(s->values.size(), T(0));
    s->requires_grad = true;
  }
  return Tensor(std::move(s));
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t i) const {
  if (i >= s_->shape.size()) {
    throw ShapeError("dimension " + std::to_string(i) + " out of range for shape " +
                     to_string(s_->shape));
  }
  return s_->shape[i];
}

template <typename T>
void Tensor<T>::set_frozen(bool frozen) {
  if (!s_->trainable) throw std::logic_error("only trainable tensors can be frozen");
  s_->frozen = frozen;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(s_->grad.begin(), s_->grad.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (s_->values.size() != 1) {
    throw ShapeError("item() on non-scalar tensor of shape " + to_string(s_->shape));
  }
  return s_->values[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto s = make_storage(s_->shape, std::vector<T>(s_->values.begin(), s_->values.end()));
  s->trainable = s_->trainable;
  s->frozen = s_->frozen;
  s->requires_grad = s_->requires_grad;
  s->name = s_->name;
  if (s->requires_grad) s->grad.assign(s->values.size(), T(0));
  return Tensor(std::move(s));
}

template <typename T>
bool Graph<T>::wants_grad(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <typename T>
void Graph<T>::record(OpKind kind, std::vector<std::uint64_t> inputs, const Tensor<T>& output,
                      std::function<void()> backward, std::string label) {
  if (consumed_) throw GraphError("graph was already replayed; run a new forward pass");
  if (!recording_) return;
  nodes_.push_back(Node{kind, std::move(label), std::move(inputs), output.id(), std::move(backward)});
}

template <typename T>
void Graph<T>::backward(Tensor<T>& loss) {
  if (consumed_) throw GraphError("graph was already replayed; run a new forward pass");
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  const bool produced = std::any_of(nodes_.begin(), nodes_.end(),
                                    [&](const Node& n) { return n.output == loss.id(); });
  if (!produced || !loss.requires_grad()) {
    throw GraphError("loss was not produced by this graph");
  }
  loss.grad()[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
  consumed_ = true;
  for (auto& n : nodes_) n.backward = nullptr;
}

template <typename T>
void sgd_step(std::span<Tensor<T>> params, std::vector<std::vector<T>>& velocity, T lr,
              T momentum) {
  if (!(lr > T(0))) throw std::invalid_argument("learning rate must be positive");
  if (velocity.size() != params.size()) velocity.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable() || p.frozen()) continue;
    auto& v = velocity[i];
    if (v.size() != p.numel()) v.assign(p.numel(), T(0));
    auto val = p.values();
    auto grad = p.grad();
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = momentum * v[k] + grad[k];
      val[k] -= lr * v[k];
    }
  }
}

template <typename T>
SgdMomentum<T>::SgdMomentum(std::vector<Tensor<T>> params, T momentum)
    : params_(std::move(params)), velocity_(params_.size()), momentum_(momentum) {
  if (momentum < T(0) || momentum >= T(1)) {
    throw std::invalid_argument("momentum must lie in [0, 1)");
  }
}

template <typename T>
void SgdMomentum<T>::step(T lr) {
  sgd_step<T>(params_, velocity_, lr, momentum_);
}

template <typename T>
void SgdMomentum<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, T beta1, T beta2, T eps)
    : params_(std::move(params)),
      m_(params_.size()),
      v_(params_.size()),
      t_(params_.size(), 0),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  if (!(beta1 >= T(0) && beta1 < T(1) && beta2 >= T(0) && beta2 < T(1) && eps > T(0))) {
    throw std::invalid_argument("Adam: betas must lie in [0, 1) and eps must be positive");
  }
}

template <typename T>
void Adam<T>::step(T lr) {
  if (!(lr > T(0))) throw std::invalid_argument("learning rate must be positive");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.trainable() || p.frozen()) continue;
    if (m_[i].size() != p.numel()) {
      m_[i].assign(p.numel(), T(0));
      v_[i].assign(p.numel(), T(0));
    }
    // Step count is per tensor so a tensor unfrozen later starts its own correction.
    const auto t = static_cast<T>(++t_[i]);
    const T c1 = T(1) - std::pow(beta1_, t);
    const T c2 = T(1) - std::pow(beta2_, t);
    auto val = p.values();
    auto grad = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      m[k] = beta1_ * m[k] + (T(1) - beta1_) * grad[k];
      v[k] = beta2_ * v[k] + (T(1) - beta2_) * grad[k] * grad[k];
      val[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;
template class SgdMomentum<float>;
template class SgdMomentum<double>;
template class Adam<float>;
template class Adam<double>;
template void sgd_step<float>(std::span<Tensor<float>>, std::vector<std::vector<float>>&, float,
                              float);
template void sgd_step<double>(std::span<Tensor<double>>, std::vector<std::vector<double>>&,
                               double, double);

}  // namespace armsight::ad
