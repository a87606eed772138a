#include "masv/module.hpp"

#include <cmath>

namespace masv {
namespace nn {

namespace {
// PyTorch-style fan-in uniform init.
template <typename T>
Tensor<T> init_weight(Shape shape, int64_t fan_in, Rng& rng) {
  const T k = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
  Tensor<T> w = Tensor<T>::rand_uniform(std::move(shape), rng, -k, k);
  w.set_requires_grad(true);
  return w;
}
template <typename T>
Tensor<T> init_zeros(Shape shape) {
  Tensor<T> b = Tensor<T>::zeros(std::move(shape));
  b.set_requires_grad(true);
  return b;
}
}  // namespace

template <typename T>
Linear<T>::Linear(int64_t in, int64_t out, bool with_bias, Rng& rng)
    : weight(init_weight<T>({out, in}, in, rng)), has_bias(with_bias) {
  if (has_bias) bias = init_zeros<T>({out});
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return ops::linear2d(x, weight, has_bias ? &bias : nullptr);
}

template <typename T>
void Linear<T>::visit_params(const std::string& prefix, const ParamFn<T>& fn) {
  fn(prefix + "weight", weight);
  if (has_bias) fn(prefix + "bias", bias);
}

template <typename T>
Conv1d<T>::Conv1d(int64_t in, int64_t out, int64_t kernel, Pad pad, int dil, int grp,
                  bool with_bias, Rng& rng)
    : has_bias(with_bias), dilation(dil), groups(grp) {
  MASV_CHECK(in % grp == 0 && out % grp == 0, ConfigError,
             "conv channels (", in, ",", out, ") not divisible by groups ", grp);
  weight = init_weight<T>({out, in / grp, kernel}, (in / grp) * kernel, rng);
  if (has_bias) bias = init_zeros<T>({out});
  const int span = dil * static_cast<int>(kernel - 1);
  switch (pad) {
    case Pad::none: break;
    case Pad::same:
      pad_left = span / 2;
      pad_right = span - span / 2;
      break;
    case Pad::causal:
      pad_left = span;
      break;
  }
}

template <typename T>
Tensor<T> Conv1d<T>::forward(const Tensor<T>& x) const {
  return ops::conv1d(x, weight, has_bias ? &bias : nullptr, dilation, pad_left, pad_right,
                     groups);
}

template <typename T>
void Conv1d<T>::visit_params(const std::string& prefix, const ParamFn<T>& fn) {
  fn(prefix + "weight", weight);
  if (has_bias) fn(prefix + "bias", bias);
}

template <typename T>
InstanceNorm1d<T>::InstanceNorm1d(int64_t channels, bool affine_, T eps_)
    : affine(affine_), eps(eps_) {
  if (affine) {
    gamma = Tensor<T>::ones({channels});
    gamma.set_requires_grad(true);
    beta = init_zeros<T>({channels});
  }
}

template <typename T>
Tensor<T> InstanceNorm1d<T>::forward(const Tensor<T>& x) const {
  return ops::instance_norm_1d(x, affine ? &gamma : nullptr, affine ? &beta : nullptr, eps);
}

template <typename T>
void InstanceNorm1d<T>::visit_params(const std::string& prefix, const ParamFn<T>& fn) {
  if (affine) {
    fn(prefix + "gamma", gamma);
    fn(prefix + "beta", beta);
  }
}

template <typename T>
BatchNorm1d<T>::BatchNorm1d(int64_t channels, bool affine_, T eps_, T momentum_)
    : affine(affine_), eps(eps_), momentum(momentum_) {
  if (affine) {
    gamma = Tensor<T>::ones({channels});
    gamma.set_requires_grad(true);
    beta = init_zeros<T>({channels});
  }
  stats.mean.assign(static_cast<size_t>(channels), T(0));
  stats.var.assign(static_cast<size_t>(channels), T(1));
}

template <typename T>
Tensor<T> BatchNorm1d<T>::forward(const Tensor<T>& x, bool training) {
  return ops::batch_norm_1d(x, affine ? &gamma : nullptr, affine ? &beta : nullptr, stats,
                            training, momentum, eps);
}

template <typename T>
void BatchNorm1d<T>::visit_params(const std::string& prefix, const ParamFn<T>& fn) {
  if (affine) {
    fn(prefix + "gamma", gamma);
    fn(prefix + "beta", beta);
  }
}

template <typename T>
void BatchNorm1d<T>::visit_stats(const std::string& prefix, const StatsFn<T>& fn) {
  fn(prefix + "running", stats);
}

template class Linear<float>;
template class Linear<double>;
template class Conv1d<float>;
template class Conv1d<double>;
template class InstanceNorm1d<float>;
template class InstanceNorm1d<double>;
template class BatchNorm1d<float>;
template class BatchNorm1d<double>;

}  // namespace nn
}  // namespace masv
