#pragma once

#include <optional>
#include <utility>

#include "masv/module.hpp"

namespace masv {
namespace ssm {

// Diagonal real HIPPO approximation: A_n = -(n+1), stored as log magnitudes,
// replicated per channel. Returns [channels, state_dim].
template <typename T>
Tensor<T> hippo_a_log(int64_t state_dim, int64_t channels);

// Reference ZOH discretization (A exact, B Euler-simplified):
//   A_bar = exp(delta * A), B_bar = delta * B.
// a [D,N], b_t [B,T,N], delta_t [B,T,D] (> 0) -> ([B,T,D,N], [B,T,D,N]).
// Plain values, no graph; used by the scan oracle and contract tests.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize_zoh(const Tensor<T>& a, const Tensor<T>& b_t,
                                               const Tensor<T>& delta_t);

template <typename T>
struct ScanOut {
  Tensor<T> y;        // [B,M,T]
  Tensor<T> h_final;  // [B,M,N]
};

// Selective scan recurrence
//   h_t = exp(delta_t A) * h_{t-1} + delta_t B_t u_t,  y_t = C_t . h_t + D u_t.
// u/delta [B,M,T], a [M,N], b_t/c_t [B,N,T], d_skip [M], h0 [B,M,N].
// chunk <= 0 runs the plain sequential recurrence; chunk >= 1 evaluates in
// blocks composed by the associative rule (a2*a1, a2*b1 + b2).
template <typename T>
ScanOut<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a,
                          const Tensor<T>& b_t, const Tensor<T>& c_t,
                          const Tensor<T>& d_skip, const Tensor<T>& h0, int chunk);

template <typename T>
ScanOut<T> selective_scan_naive(const Tensor<T>& u, const Tensor<T>& delta,
                                const Tensor<T>& a, const Tensor<T>& b_t,
                                const Tensor<T>& c_t, const Tensor<T>& d_skip,
                                const Tensor<T>& h0) {
  return selective_scan(u, delta, a, b_t, c_t, d_skip, h0, 0);
}
template <typename T>
ScanOut<T> selective_scan_fast(const Tensor<T>& u, const Tensor<T>& delta,
                               const Tensor<T>& a, const Tensor<T>& b_t,
                               const Tensor<T>& c_t, const Tensor<T>& d_skip,
                               const Tensor<T>& h0, int chunk = 64) {
  return selective_scan(u, delta, a, b_t, c_t, d_skip, h0, chunk < 1 ? 1 : chunk);
}

// Input-dependent SSM parameters over an M-wide stream:
//   B(t), C(t) from linear taps, delta(t) = softplus(w.u_t + bias_m) > 0.
template <typename T>
class SsmCore : public nn::Module<T> {
 public:
  SsmCore(int64_t channels, int64_t state_dim, Rng& rng);

  // h0 empty -> zero initial state.
  ScanOut<T> forward(const Tensor<T>& u, const Tensor<T>& h0, int chunk = 64) const;

  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;
  int64_t channels() const { return channels_; }
  int64_t state_dim() const { return state_dim_; }

  Tensor<T> a_log;      // [M,N]
  nn::Conv1d<T> b_proj;  // 1x1, M -> N
  nn::Conv1d<T> c_proj;  // 1x1, M -> N
  nn::Conv1d<T> delta_w;  // 1x1, M -> 1, shared scalar projection
  Tensor<T> delta_bias;  // [M]
  Tensor<T> d_skip;      // [M]

 private:
  int64_t channels_, state_dim_;
};

// Carried streaming state of one Mamba layer.
template <typename T>
struct MambaState {
  Tensor<T> conv_tail;  // [B, M, k_conv-1], pre-activation samples
  Tensor<T> h;          // [B, M, N]
  bool initialized = false;
};

struct MambaOpts {
  int64_t state_dim = 16;
  // Inner width = expand * channels unless inner_override > 0.
  int64_t expand = 2;
  int64_t inner_override = 0;
  int64_t conv_kernel = 4;
  int scan_chunk = 64;

  int64_t inner(int64_t channels) const {
    return inner_override > 0 ? inner_override : expand * channels;
  }
};

// in_proj -> (stream, gate); stream -> causal depthwise conv -> SiLU ->
// selective scan; output = scan * SiLU(gate) -> out_proj. Strictly causal.
template <typename T>
class MambaLayer : public nn::Module<T> {
 public:
  MambaLayer(int64_t channels, MambaOpts opts, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, MambaState<T>* state = nullptr) const;

  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;
  int64_t channels() const { return channels_; }
  int64_t inner() const { return inner_; }
  const MambaOpts& opts() const { return opts_; }

  nn::Conv1d<T> in_proj;   // 1x1, D -> 2M
  nn::Conv1d<T> conv;      // depthwise, kernel k on M
  SsmCore<T> core;
  nn::Conv1d<T> out_proj;  // 1x1, M -> D

 private:
  int64_t channels_, inner_;
  MambaOpts opts_;
};

extern template class SsmCore<float>;
extern template class SsmCore<double>;
extern template class MambaLayer<float>;
extern template class MambaLayer<double>;

}  // namespace ssm
}  // namespace masv
