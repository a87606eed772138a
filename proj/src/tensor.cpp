#include "masv/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace masv {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

namespace detail {
uint64_t next_seq() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::ones(Shape shape) {
  return full(std::move(shape), T(1));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T v) {
  for (int64_t d : shape)
    MASV_CHECK(d > 0, DimensionError, "non-positive dim in shape ", shape_str(shape));
  auto node = std::make_shared<Node>();
  node->value.assign(static_cast<size_t>(shape_numel(shape)), v);
  node->shape = std::move(shape);
  node->seq = detail::next_seq();
  return Tensor(node);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data) {
  MASV_CHECK(shape_numel(shape) == static_cast<int64_t>(data.size()), DimensionError,
             "data length ", data.size(), " does not match shape ", shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->seq = detail::next_seq();
  return Tensor(node);
}

template <typename T>
Tensor<T> Tensor<T>::rand_uniform(Shape shape, Rng& rng, T lo, T hi) {
  std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
  return from_data(std::move(shape), std::move(d));
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, T stddev) {
  std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.normal() * stddev);
  return from_data(std::move(shape), std::move(d));
}

template <typename T>
T Tensor<T>::at(std::initializer_list<int64_t> idx) const {
  MASV_CHECK(idx.size() == node_->shape.size(), DimensionError,
             "index rank ", idx.size(), " vs tensor rank ", node_->shape.size());
  int64_t flat = 0;
  size_t i = 0;
  for (int64_t v : idx) {
    MASV_CHECK(v >= 0 && v < node_->shape[i], DimensionError,
               "index ", v, " out of range for axis ", i, " of ", shape_str(shape()));
    flat = flat * node_->shape[i] + v;
    ++i;
  }
  return node_->value[static_cast<size_t>(flat)];
}

template <typename T>
void backward(const Tensor<T>& loss) {
  MASV_CHECK(loss.defined(), ContractError, "backward on undefined tensor");
  MASV_CHECK(loss.numel() == 1, ContractError,
             "backward requires a scalar loss, got shape ", shape_str(loss.shape()));
  MASV_CHECK(loss.requires_grad(), ContractError,
             "backward on a tensor with no recorded graph");

  using Node = detail::Node<T>;
  // Collect the reachable grad-requiring subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Creation order is topological; visit consumers before producers.
  std::sort(order.begin(), order.end(),
            [](Node* a, Node* b) { return a->seq > b->seq; });

  loss.node()->grad_buf()[0] += T(1);
  for (Node* n : order) {
    n->grad_buf();  // every reachable requires_grad node ends with a grad
    if (n->backward_fn) n->backward_fn(*n);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace masv
