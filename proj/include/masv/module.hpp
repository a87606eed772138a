#pragma once

#include <functional>
#include <string>

#include "masv/ops.hpp"

namespace masv {
namespace nn {

template <typename T>
using ParamFn = std::function<void(const std::string&, Tensor<T>&)>;
template <typename T>
using StatsFn = std::function<void(const std::string&, ops::RunningStats<T>&)>;

// Parameter-owning building block. visit_* traversal order is construction
// order and therefore stable across runs; checkpoints key on the names.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void visit_params(const std::string& prefix, const ParamFn<T>& fn) = 0;
  virtual void visit_stats(const std::string& prefix, const StatsFn<T>& fn) { (void)prefix; (void)fn; }

  int64_t param_count() {
    int64_t n = 0;
    visit_params("", [&](const std::string&, Tensor<T>& p) { n += p.numel(); });
    return n;
  }
  void zero_grad() {
    visit_params("", [](const std::string&, Tensor<T>& p) { p.zero_grad(); });
  }
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(int64_t in, int64_t out, bool bias, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void visit_params(const std::string& prefix, const ParamFn<T>& fn) override;

  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out] if enabled
  bool has_bias = false;
};

enum class Pad { none, same, causal };

template <typename T>
class Conv1d : public Module<T> {
 public:
  Conv1d(int64_t in, int64_t out, int64_t kernel, Pad pad, int dilation, int groups,
         bool bias, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void visit_params(const std::string& prefix, const ParamFn<T>& fn) override;

  Tensor<T> weight;  // [out, in/groups, k]
  Tensor<T> bias;
  bool has_bias = false;
  int pad_left = 0, pad_right = 0;
  int dilation = 1, groups = 1;
};

template <typename T>
class InstanceNorm1d : public Module<T> {
 public:
  explicit InstanceNorm1d(int64_t channels, bool affine = true, T eps = T(1e-5));
  Tensor<T> forward(const Tensor<T>& x) const;
  void visit_params(const std::string& prefix, const ParamFn<T>& fn) override;

  Tensor<T> gamma, beta;
  bool affine = true;
  T eps;
};

template <typename T>
class BatchNorm1d : public Module<T> {
 public:
  explicit BatchNorm1d(int64_t channels, bool affine = true, T eps = T(1e-5),
                       T momentum = T(0.1));
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void visit_params(const std::string& prefix, const ParamFn<T>& fn) override;
  void visit_stats(const std::string& prefix, const StatsFn<T>& fn) override;

  Tensor<T> gamma, beta;
  ops::RunningStats<T> stats;
  bool affine = true;
  T eps, momentum;
};

extern template class Linear<float>;
extern template class Linear<double>;
extern template class Conv1d<float>;
extern template class Conv1d<double>;
extern template class InstanceNorm1d<float>;
extern template class InstanceNorm1d<double>;
extern template class BatchNorm1d<float>;
extern template class BatchNorm1d<double>;

}  // namespace nn
}  // namespace masv
