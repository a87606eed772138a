#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "masv/error.hpp"
#include "masv/rng.hpp"

namespace masv {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Thread-local switch; when off, ops do not record backward closures.
struct GradMode {
  static bool enabled();
  static void set(bool on);
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  bool prev_;
};

namespace detail {

// One recorded value in the graph. Creation order (seq) is a topological
// order because parents always exist before their consumers.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buf() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

uint64_t next_seq();

}  // namespace detail

// Dense real tensor, row-major, value-semantic handle to a graph node.
// Tensors without recorded closures are plain immutable values.
template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, T v);
  static Tensor from_data(Shape shape, std::vector<T> data);
  static Tensor scalar(T v) { return from_data({1}, {v}); }
  static Tensor rand_uniform(Shape shape, Rng& rng, T lo, T hi);
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1));

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }

  bool has_grad() const { return defined() && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_buf() { return node_->grad_buf(); }
  void zero_grad() {
    if (defined()) node_->grad.assign(node_->value.size(), T(0));
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }

  T item() const {
    MASV_CHECK(numel() == 1, ContractError,
               "item() on non-scalar tensor of shape ", shape_str(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<int64_t> idx) const;

  // Value copy detached from the graph.
  Tensor detach() const {
    Tensor t = from_data(node_->shape, node_->value);
    return t;
  }
  Tensor clone() const { return detach(); }

  uint64_t seq() const { return node_->seq; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into
// every requires_grad ancestor; callers zero grads between steps.
template <typename T>
void backward(const Tensor<T>& loss);

namespace detail {

// Shared op constructor: allocates the output node and, when grad flow is
// live, records parents plus the backward closure.
template <typename T, typename BackwardFn>
Tensor<T> make_op(Shape out_shape, std::vector<T> out_value,
                  std::vector<Tensor<T>> inputs, BackwardFn&& bw) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(out_shape);
  node->value = std::move(out_value);
  node->seq = next_seq();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs && GradMode::enabled()) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::forward<BackwardFn>(bw);
  }
  return Tensor<T>(node);
}

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template void backward<float>(const Tensor<float>&);
extern template void backward<double>(const Tensor<double>&);

}  // namespace masv
