#pragma once

#include <functional>
#include <type_traits>
#include <utility>
#include <vector>

#include "masv/tensor.hpp"

namespace masv {
namespace ops {

// ---- elementwise unary ----
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> tanh_(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
template <typename T> Tensor<T> exp_(const Tensor<T>& x);
template <typename T> Tensor<T> log_(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);
template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T c);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T c);
// sqrt(max(x,0) + floor); the clamp keeps pooled variances legal.
template <typename T> Tensor<T> sqrt_floor(const Tensor<T>& x, T floor);

// ---- elementwise binary, same shape ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

// ---- shape / layout ----
// Reverses the last (time) axis.
template <typename T> Tensor<T> flip_time(const Tensor<T>& x);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);
template <typename T> Tensor<T> narrow(const Tensor<T>& x, int axis, int64_t start, int64_t len);
// [B,1,T] replicated to [B,C,T]
template <typename T> Tensor<T> broadcast_channel(const Tensor<T>& x, int64_t channels);
// [B,C] replicated along a new trailing time axis -> [B,C,T]
template <typename T> Tensor<T> expand_time(const Tensor<T>& s, int64_t T_len);

// ---- reductions ----
template <typename T> Tensor<T> sum_all(const Tensor<T>& x);
template <typename T> Tensor<T> mean_all(const Tensor<T>& x);
template <typename T> Tensor<T> sum_time(const Tensor<T>& x);   // [B,C,T] -> [B,C]
template <typename T> Tensor<T> mean_time(const Tensor<T>& x);  // [B,C,T] -> [B,C]

// ---- broadcast arithmetic on [B,C,T] ----
template <typename T> Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias);  // bias [C]
template <typename T> Tensor<T> mul_cs(const Tensor<T>& x, const Tensor<T>& s);               // s [B,C]

// ---- linear algebra ----
// Dilated cross-correlation. x [B,Cin,T], w [Cout,Cin/groups,K] -> [B,Cout,T'].
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w,
                 const std::type_identity_t<Tensor<T>>* bias,
                 int dilation, int pad_left, int pad_right, int groups = 1);
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w,
                 const std::type_identity_t<Tensor<T>>* bias,
                 int dilation, int padding);

// y = x W^T + b, x [B,I], W [O,I], b [O] optional
template <typename T>
Tensor<T> linear2d(const Tensor<T>& x, const Tensor<T>& w,
                   const std::type_identity_t<Tensor<T>>* bias);

// S = X X^T, X [B,E] -> [B,B]
template <typename T> Tensor<T> gram(const Tensor<T>& x);

// rows scaled to unit L2 norm; x [B,E]
template <typename T> Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12));

// ---- normalization ----
// Per (batch, channel) over time. gamma/beta [C] or null. Requires T >= 2.
template <typename T>
Tensor<T> instance_norm_1d(const Tensor<T>& x, const std::type_identity_t<Tensor<T>>* gamma,
                           const std::type_identity_t<Tensor<T>>* beta, T eps);

template <typename T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;
  bool initialized = false;
};

// x [B,C,T] or [B,C]. Training mode normalizes over (B,T) per channel and
// updates running stats; eval mode uses running stats (error if never set).
template <typename T>
Tensor<T> batch_norm_1d(const Tensor<T>& x, const std::type_identity_t<Tensor<T>>* gamma,
                        const std::type_identity_t<Tensor<T>>* beta,
                        RunningStats<T>& stats, bool training, T momentum, T eps);

// ---- softmax / logsumexp ----
template <typename T> Tensor<T> softmax_time(const Tensor<T>& x);  // over last axis of [B,C,T]

// Row-wise logsumexp over entries where mask != 0. Z [R,C], mask [R*C].
// Every row must have at least one active entry.
template <typename T>
Tensor<T> masked_row_lse(const Tensor<T>& z, const std::vector<uint8_t>& mask);

// ---- verification helpers ----
// Max over coordinates of |analytic - central_difference| / max(1, |central_difference|).
template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                  const Tensor<T>& x, double h = 1e-5);

}  // namespace ops
}  // namespace masv
