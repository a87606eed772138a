#include "masv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace masv {
namespace ops {

using detail::make_op;
using detail::Node;

namespace {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  MASV_CHECK(a.shape() == b.shape(), DimensionError, op, ": shape mismatch ",
             shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

template <typename T, typename FwdFn, typename GradFn>
Tensor<T> make_unary(const Tensor<T>& x, FwdFn fwd, GradFn grad) {
  auto xv = x.data();
  std::vector<T> yv(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = fwd(xv[i]);
  return make_op<T>(
      x.shape(), std::move(yv), {x}, [grad](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& dx = p.grad_buf();
        for (size_t i = 0; i < self.value.size(); ++i)
          dx[i] += self.grad[i] * grad(p.value[i], self.value[i]);
      });
}

template <typename T>
T stable_softplus(T x) {
  if (x > T(20)) return x;
  if (x < T(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh_(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return std::tanh(v); },
      [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return stable_softplus(v); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Tensor<T> exp_(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return make_unary(
      x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return make_unary(
      x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return make_unary(
      x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sqrt_floor(const Tensor<T>& x, T floor) {
  MASV_CHECK(floor > T(0), ContractError, "sqrt_floor requires a positive floor");
  return make_unary(
      x, [floor](T v) { return std::sqrt((v > T(0) ? v : T(0)) + floor); },
      [](T v, T y) { return v > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> yv(av.size());
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] + bv[i];
  return make_op<T>(a.shape(), std::move(yv), {a, b}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      auto& d = self.parents[k]->grad_buf();
      for (size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> yv(av.size());
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] - bv[i];
  return make_op<T>(a.shape(), std::move(yv), {a, b}, [](Node<T>& self) {
    auto& da = self.parents[0]->grad_buf();
    auto& db = self.parents[1]->grad_buf();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      da[i] += self.grad[i];
      db[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> yv(av.size());
  for (size_t i = 0; i < av.size(); ++i) yv[i] = av[i] * bv[i];
  return make_op<T>(a.shape(), std::move(yv), {a, b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto& da = pa.grad_buf();
    auto& db = pb.grad_buf();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      da[i] += self.grad[i] * pb.value[i];
      db[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Tensor<T> flip_time(const Tensor<T>& x) {
  MASV_CHECK(x.ndim() >= 1, DimensionError, "flip_time on rank-0 tensor");
  const int64_t t_len = x.dim(x.ndim() - 1);
  const int64_t rows = x.numel() / t_len;
  auto xv = x.data();
  std::vector<T> yv(xv.size());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t t = 0; t < t_len; ++t)
      yv[static_cast<size_t>(r * t_len + t)] = xv[static_cast<size_t>(r * t_len + t_len - 1 - t)];
  return make_op<T>(x.shape(), std::move(yv), {x}, [t_len, rows](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buf();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t t = 0; t < t_len; ++t)
        dx[static_cast<size_t>(r * t_len + t_len - 1 - t)] += self.grad[static_cast<size_t>(r * t_len + t)];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  MASV_CHECK(!xs.empty(), ContractError, "concat of zero tensors");
  const int rank = xs[0].ndim();
  MASV_CHECK(axis >= 0 && axis < rank, DimensionError, "concat axis ", axis,
             " out of range for rank ", rank);
  Shape out = xs[0].shape();
  int64_t axis_total = 0;
  for (const auto& x : xs) {
    MASV_CHECK(x.ndim() == rank, DimensionError, "concat rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i == axis) continue;
      MASV_CHECK(x.dim(i) == out[static_cast<size_t>(i)], DimensionError,
                 "concat mismatch on axis ", i, ": ", shape_str(x.shape()), " vs ",
                 shape_str(xs[0].shape()));
    }
    axis_total += x.dim(axis);
  }
  out[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= out[static_cast<size_t>(i)];

  std::vector<T> yv(static_cast<size_t>(outer * axis_total * inner));
  std::vector<int64_t> piece(xs.size());
  int64_t off = 0;
  for (size_t k = 0; k < xs.size(); ++k) {
    const int64_t ax = xs[k].dim(axis);
    piece[k] = ax;
    auto xv = xs[k].data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(yv.data() + (o * axis_total + off) * inner, xv.data() + o * ax * inner,
                  static_cast<size_t>(ax * inner) * sizeof(T));
    off += ax;
  }
  return make_op<T>(std::move(out), std::move(yv), xs,
                    [outer, inner, axis_total, piece](Node<T>& self) {
                      int64_t off2 = 0;
                      for (size_t k = 0; k < self.parents.size(); ++k) {
                        auto& dx = self.parents[k]->grad_buf();
                        const int64_t ax = piece[k];
                        for (int64_t o = 0; o < outer; ++o) {
                          const T* g = self.grad.data() + (o * axis_total + off2) * inner;
                          T* d = dx.data() + o * ax * inner;
                          for (int64_t i = 0; i < ax * inner; ++i) d[i] += g[i];
                        }
                        off2 += ax;
                      }
                    });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
  const int rank = x.ndim();
  MASV_CHECK(axis >= 0 && axis < rank, DimensionError, "narrow axis ", axis,
             " out of range for rank ", rank);
  const int64_t ax = x.dim(axis);
  MASV_CHECK(start >= 0 && len >= 1 && start + len <= ax, DimensionError,
             "narrow window [", start, ",", start + len, ") out of range for axis ", axis,
             " with extent ", ax);
  Shape out = x.shape();
  out[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);

  auto xv = x.data();
  std::vector<T> yv(static_cast<size_t>(outer * len * inner));
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(yv.data() + o * len * inner, xv.data() + (o * ax + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  return make_op<T>(std::move(out), std::move(yv), {x},
                    [outer, inner, ax, start, len](Node<T>& self) {
                      auto& dx = self.parents[0]->grad_buf();
                      for (int64_t o = 0; o < outer; ++o) {
                        const T* g = self.grad.data() + o * len * inner;
                        T* d = dx.data() + (o * ax + start) * inner;
                        for (int64_t i = 0; i < len * inner; ++i) d[i] += g[i];
                      }
                    });
}

template <typename T>
Tensor<T> broadcast_channel(const Tensor<T>& x, int64_t channels) {
  MASV_CHECK(x.ndim() == 3 && x.dim(1) == 1, DimensionError,
             "broadcast_channel expects [B,1,T], got ", shape_str(x.shape()));
  const int64_t b_sz = x.dim(0), t_len = x.dim(2);
  auto xv = x.data();
  std::vector<T> yv(static_cast<size_t>(b_sz * channels * t_len));
  for (int64_t b = 0; b < b_sz; ++b)
    for (int64_t c = 0; c < channels; ++c)
      std::memcpy(yv.data() + (b * channels + c) * t_len, xv.data() + b * t_len,
                  static_cast<size_t>(t_len) * sizeof(T));
  return make_op<T>({b_sz, channels, t_len}, std::move(yv), {x},
                    [b_sz, channels, t_len](Node<T>& self) {
                      auto& dx = self.parents[0]->grad_buf();
                      for (int64_t b = 0; b < b_sz; ++b)
                        for (int64_t c = 0; c < channels; ++c) {
                          const T* g = self.grad.data() + (b * channels + c) * t_len;
                          T* d = dx.data() + b * t_len;
                          for (int64_t t = 0; t < t_len; ++t) d[t] += g[t];
                        }
                    });
}

template <typename T>
Tensor<T> expand_time(const Tensor<T>& s, int64_t t_len) {
  MASV_CHECK(s.ndim() == 2, DimensionError, "expand_time expects [B,C], got ",
             shape_str(s.shape()));
  const int64_t b_sz = s.dim(0), c_sz = s.dim(1);
  auto sv = s.data();
  std::vector<T> yv(static_cast<size_t>(b_sz * c_sz * t_len));
  for (int64_t i = 0; i < b_sz * c_sz; ++i)
    for (int64_t t = 0; t < t_len; ++t) yv[static_cast<size_t>(i * t_len + t)] = sv[static_cast<size_t>(i)];
  return make_op<T>({b_sz, c_sz, t_len}, std::move(yv), {s}, [t_len](Node<T>& self) {
    auto& ds = self.parents[0]->grad_buf();
    for (size_t i = 0; i < ds.size(); ++i) {
      T acc = T(0);
      const T* g = self.grad.data() + static_cast<int64_t>(i) * t_len;
      for (int64_t t = 0; t < t_len; ++t) acc += g[t];
      ds[i] += acc;
    }
  });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto xv = x.data();
  T acc = T(0);
  for (T v : xv) acc += v;
  return make_op<T>({1}, {acc}, {x}, [](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buf();
    const T g = self.grad[0];
    for (auto& d : dx) d += g;
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  auto xv = x.data();
  T acc = T(0);
  for (T v : xv) acc += v;
  const T inv = T(1) / static_cast<T>(xv.size());
  return make_op<T>({1}, {acc * inv}, {x}, [inv](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buf();
    const T g = self.grad[0] * inv;
    for (auto& d : dx) d += g;
  });
}

namespace {
template <typename T>
Tensor<T> time_reduce(const Tensor<T>& x, bool mean) {
  MASV_CHECK(x.ndim() == 3, DimensionError, "time reduction expects [B,C,T], got ",
             shape_str(x.shape()));
  const int64_t rows = x.dim(0) * x.dim(1), t_len = x.dim(2);
  const T w = mean ? T(1) / static_cast<T>(t_len) : T(1);
  auto xv = x.data();
  std::vector<T> yv(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    const T* p = xv.data() + r * t_len;
    for (int64_t t = 0; t < t_len; ++t) acc += p[t];
    yv[static_cast<size_t>(r)] = acc * w;
  }
  return make_op<T>({x.dim(0), x.dim(1)}, std::move(yv), {x}, [rows, t_len, w](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buf();
    for (int64_t r = 0; r < rows; ++r) {
      const T g = self.grad[static_cast<size_t>(r)] * w;
      T* d = dx.data() + r * t_len;
      for (int64_t t = 0; t < t_len; ++t) d[t] += g;
    }
  });
}
}  // namespace

template <typename T>
Tensor<T> sum_time(const Tensor<T>& x) { return time_reduce(x, false); }

template <typename T>
Tensor<T> mean_time(const Tensor<T>& x) { return time_reduce(x, true); }

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  MASV_CHECK(x.ndim() == 3, DimensionError, "add_channel_bias expects [B,C,T]");
  MASV_CHECK(bias.ndim() == 1 && bias.dim(0) == x.dim(1), DimensionError,
             "bias shape ", shape_str(bias.shape()), " does not match channels (axis 1) of ",
             shape_str(x.shape()));
  const int64_t b_sz = x.dim(0), c_sz = x.dim(1), t_len = x.dim(2);
  auto xv = x.data();
  auto bv = bias.data();
  std::vector<T> yv(xv.size());
  for (int64_t b = 0; b < b_sz; ++b)
    for (int64_t c = 0; c < c_sz; ++c) {
      const T add_v = bv[static_cast<size_t>(c)];
      const T* p = xv.data() + (b * c_sz + c) * t_len;
      T* q = yv.data() + (b * c_sz + c) * t_len;
      for (int64_t t = 0; t < t_len; ++t) q[t] = p[t] + add_v;
    }
  return make_op<T>(x.shape(), std::move(yv), {x, bias}, [b_sz, c_sz, t_len](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buf();
    auto& db = self.parents[1]->grad_buf();
    for (size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
    for (int64_t b = 0; b < b_sz; ++b)
      for (int64_t c = 0; c < c_sz; ++c) {
        const T* g = self.grad.data() + (b * c_sz + c) * t_len;
        T acc = T(0);
        for (int64_t t = 0; t < t_len; ++t) acc += g[t];
        db[static_cast<size_t>(c)] += acc;
      }
  });
}

template <typename T>
Tensor<T> mul_cs(const Tensor<T>& x, const Tensor<T>& s) {
  MASV_CHECK(x.ndim() == 3, DimensionError, "mul_cs expects x [B,C,T]");
  MASV_CHECK(s.ndim() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1), DimensionError,
             "mul_cs scale shape ", shape_str(s.shape()), " does not match ", shape_str(x.shape()));
  const int64_t rows = x.dim(0) * x.dim(1), t_len = x.dim(2);
  auto xv = x.data();
  auto sv = s.data();
  std::vector<T> yv(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const T sc = sv[static_cast<size_t>(r)];
    const T* p = xv.data() + r * t_len;
    T* q = yv.data() + r * t_len;
    for (int64_t t = 0; t < t_len; ++t) q[t] = p[t] * sc;
  }
  return make_op<T>(x.shape(), std::move(yv), {x, s}, [rows, t_len](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    auto& dx = px.grad_buf();
    auto& ds = ps.grad_buf();
    for (int64_t r = 0; r < rows; ++r) {
      const T sc = ps.value[static_cast<size_t>(r)];
      const T* g = self.grad.data() + r * t_len;
      const T* xp = px.value.data() + r * t_len;
      T* d = dx.data() + r * t_len;
      T acc = T(0);
      for (int64_t t = 0; t < t_len; ++t) {
        d[t] += g[t] * sc;
        acc += g[t] * xp[t];
      }
      ds[static_cast<size_t>(r)] += acc;
    }
  });
}

// ---------------- conv1d ----------------

namespace {
struct ConvDims {
  int64_t batch, cin, t_in, cout, cig, k, t_out;
  int dil, pad_l, groups;
};
}  // namespace

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w,
                 const std::type_identity_t<Tensor<T>>* bias,
                 int dilation, int pad_left, int pad_right, int groups) {
  MASV_CHECK(x.ndim() == 3, DimensionError, "conv1d: input must be [B,Cin,T], got ",
             shape_str(x.shape()));
  MASV_CHECK(w.ndim() == 3, DimensionError, "conv1d: weight must be [Cout,Cin/groups,K], got ",
             shape_str(w.shape()));
  MASV_CHECK(dilation >= 1, ContractError, "conv1d: dilation must be >= 1, got ", dilation);
  MASV_CHECK(groups >= 1 && x.dim(1) % groups == 0 && w.dim(0) % groups == 0, DimensionError,
             "conv1d: groups ", groups, " must divide input channels (axis 1) ", x.dim(1),
             " and output channels ", w.dim(0));
  MASV_CHECK(w.dim(1) == x.dim(1) / groups, DimensionError,
             "conv1d: weight axis 1 is ", w.dim(1), " but input channels (axis 1) / groups = ",
             x.dim(1) / groups);
  const int64_t k = w.dim(2);
  MASV_CHECK(k >= 1, DimensionError, "conv1d: kernel axis 2 must be >= 1");
  const int64_t t_out = x.dim(2) + pad_left + pad_right - static_cast<int64_t>(dilation) * (k - 1);
  MASV_CHECK(t_out >= 1, DimensionError, "conv1d: output length ", t_out,
             " < 1 for input T=", x.dim(2), " pad=(", pad_left, ",", pad_right,
             ") dilation=", dilation, " K=", k);
  if (bias)
    MASV_CHECK(bias->ndim() == 1 && bias->dim(0) == w.dim(0), DimensionError,
               "conv1d: bias shape ", shape_str(bias->shape()), " vs Cout ", w.dim(0));

  ConvDims d{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(1), k, t_out,
             dilation, pad_left, groups};
  const int64_t co_per_g = d.cout / groups;

  auto xv = x.data();
  auto wv = w.data();
  std::vector<T> yv(static_cast<size_t>(d.batch * d.cout * t_out), T(0));
  for (int64_t b = 0; b < d.batch; ++b) {
    for (int64_t co = 0; co < d.cout; ++co) {
      T* __restrict__ yrow = yv.data() + (b * d.cout + co) * t_out;
      const int64_t g = co / co_per_g;
      for (int64_t cg = 0; cg < d.cig; ++cg) {
        const T* xrow = xv.data() + (b * d.cin + g * d.cig + cg) * d.t_in;
        for (int64_t kk = 0; kk < d.k; ++kk) {
          const T wgt = wv[static_cast<size_t>((co * d.cig + cg) * d.k + kk)];
          if (wgt == T(0)) continue;
          const int64_t off = kk * d.dil - d.pad_l;
          const int64_t t0 = std::max<int64_t>(0, -off);
          const int64_t t1 = std::min<int64_t>(t_out, d.t_in - off);
          const T* __restrict__ src = xrow + off;
          for (int64_t t = t0; t < t1; ++t) yrow[t] += wgt * src[t];
        }
      }
      if (bias) {
        const T bv = bias->data()[static_cast<size_t>(co)];
        for (int64_t t = 0; t < t_out; ++t) yrow[t] += bv;
      }
    }
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return make_op<T>({d.batch, d.cout, t_out}, std::move(yv), std::move(inputs),
                    [d, co_per_g, has_bias](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& dx = px.grad_buf();
    auto& dw = pw.grad_buf();
    for (int64_t b = 0; b < d.batch; ++b) {
      for (int64_t co = 0; co < d.cout; ++co) {
        const T* grow = self.grad.data() + (b * d.cout + co) * d.t_out;
        const int64_t g = co / co_per_g;
        for (int64_t cg = 0; cg < d.cig; ++cg) {
          const int64_t ci = g * d.cig + cg;
          const T* xrow = px.value.data() + (b * d.cin + ci) * d.t_in;
          T* dxrow = dx.data() + (b * d.cin + ci) * d.t_in;
          for (int64_t kk = 0; kk < d.k; ++kk) {
            const int64_t off = kk * d.dil - d.pad_l;
            const int64_t t0 = std::max<int64_t>(0, -off);
            const int64_t t1 = std::min<int64_t>(d.t_out, d.t_in - off);
            const T wgt = pw.value[static_cast<size_t>((co * d.cig + cg) * d.k + kk)];
            T* __restrict__ dst = dxrow + off;
            const T* __restrict__ gsrc = grow;
            if (wgt != T(0))
              for (int64_t t = t0; t < t1; ++t) dst[t] += wgt * gsrc[t];
            const T* __restrict__ xsrc = xrow + off;
            T acc = T(0);
            for (int64_t t = t0; t < t1; ++t) acc += gsrc[t] * xsrc[t];
            dw[static_cast<size_t>((co * d.cig + cg) * d.k + kk)] += acc;
          }
        }
      }
    }
    if (has_bias) {
      auto& db = self.parents[2]->grad_buf();
      for (int64_t b = 0; b < d.batch; ++b)
        for (int64_t co = 0; co < d.cout; ++co) {
          const T* grow = self.grad.data() + (b * d.cout + co) * d.t_out;
          T acc = T(0);
          for (int64_t t = 0; t < d.t_out; ++t) acc += grow[t];
          db[static_cast<size_t>(co)] += acc;
        }
    }
  });
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w,
                 const std::type_identity_t<Tensor<T>>* bias,
                 int dilation, int padding) {
  return conv1d(x, w, bias, dilation, padding, padding, 1);
}

template <typename T>
Tensor<T> linear2d(const Tensor<T>& x, const Tensor<T>& w,
                   const std::type_identity_t<Tensor<T>>* bias) {
  MASV_CHECK(x.ndim() == 2, DimensionError, "linear2d: input must be [B,I], got ",
             shape_str(x.shape()));
  MASV_CHECK(w.ndim() == 2 && w.dim(1) == x.dim(1), DimensionError,
             "linear2d: weight ", shape_str(w.shape()), " input features (axis 1) ", x.dim(1));
  if (bias)
    MASV_CHECK(bias->ndim() == 1 && bias->dim(0) == w.dim(0), DimensionError,
               "linear2d: bias shape vs output features");
  const int64_t b_sz = x.dim(0), in = x.dim(1), out = w.dim(0);
  auto xv = x.data();
  auto wv = w.data();
  std::vector<T> yv(static_cast<size_t>(b_sz * out));
  for (int64_t b = 0; b < b_sz; ++b)
    for (int64_t o = 0; o < out; ++o) {
      const T* xr = xv.data() + b * in;
      const T* wr = wv.data() + o * in;
      T acc = bias ? bias->data()[static_cast<size_t>(o)] : T(0);
      for (int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      yv[static_cast<size_t>(b * out + o)] = acc;
    }
  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return make_op<T>({b_sz, out}, std::move(yv), std::move(inputs),
                    [b_sz, in, out, has_bias](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& dx = px.grad_buf();
    auto& dw = pw.grad_buf();
    for (int64_t b = 0; b < b_sz; ++b)
      for (int64_t o = 0; o < out; ++o) {
        const T g = self.grad[static_cast<size_t>(b * out + o)];
        if (g == T(0)) continue;
        const T* wr = pw.value.data() + o * in;
        const T* xr = px.value.data() + b * in;
        T* dxr = dx.data() + b * in;
        T* dwr = dw.data() + o * in;
        for (int64_t i = 0; i < in; ++i) {
          dxr[i] += g * wr[i];
          dwr[i] += g * xr[i];
        }
      }
    if (has_bias) {
      auto& db = self.parents[2]->grad_buf();
      for (int64_t b = 0; b < b_sz; ++b)
        for (int64_t o = 0; o < out; ++o) db[static_cast<size_t>(o)] += self.grad[static_cast<size_t>(b * out + o)];
    }
  });
}

template <typename T>
Tensor<T> gram(const Tensor<T>& x) {
  MASV_CHECK(x.ndim() == 2, DimensionError, "gram expects [B,E], got ", shape_str(x.shape()));
  const int64_t b_sz = x.dim(0), e_sz = x.dim(1);
  auto xv = x.data();
  std::vector<T> yv(static_cast<size_t>(b_sz * b_sz));
  for (int64_t i = 0; i < b_sz; ++i)
    for (int64_t j = 0; j < b_sz; ++j) {
      const T* a = xv.data() + i * e_sz;
      const T* b = xv.data() + j * e_sz;
      T acc = T(0);
      for (int64_t e = 0; e < e_sz; ++e) acc += a[e] * b[e];
      yv[static_cast<size_t>(i * b_sz + j)] = acc;
    }
  return make_op<T>({b_sz, b_sz}, std::move(yv), {x}, [b_sz, e_sz](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& dx = px.grad_buf();
    for (int64_t i = 0; i < b_sz; ++i)
      for (int64_t j = 0; j < b_sz; ++j) {
        const T g = self.grad[static_cast<size_t>(i * b_sz + j)] + self.grad[static_cast<size_t>(j * b_sz + i)];
        if (g == T(0)) continue;
        const T* xr = px.value.data() + j * e_sz;
        T* dxr = dx.data() + i * e_sz;
        for (int64_t e = 0; e < e_sz; ++e) dxr[e] += g * xr[e];
      }
  });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps) {
  MASV_CHECK(x.ndim() == 2, DimensionError, "l2_normalize_rows expects [B,E]");
  const int64_t b_sz = x.dim(0), e_sz = x.dim(1);
  auto xv = x.data();
  std::vector<T> yv(xv.size());
  std::vector<T> norms(static_cast<size_t>(b_sz));
  for (int64_t b = 0; b < b_sz; ++b) {
    const T* p = xv.data() + b * e_sz;
    T acc = eps;
    for (int64_t e = 0; e < e_sz; ++e) acc += p[e] * p[e];
    const T n = std::sqrt(acc);
    norms[static_cast<size_t>(b)] = n;
    T* q = yv.data() + b * e_sz;
    for (int64_t e = 0; e < e_sz; ++e) q[e] = p[e] / n;
  }
  return make_op<T>(x.shape(), std::move(yv), {x}, [b_sz, e_sz, norms](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buf();
    for (int64_t b = 0; b < b_sz; ++b) {
      const T* g = self.grad.data() + b * e_sz;
      const T* y = self.value.data() + b * e_sz;
      T dot = T(0);
      for (int64_t e = 0; e < e_sz; ++e) dot += g[e] * y[e];
      const T inv = T(1) / norms[static_cast<size_t>(b)];
      T* d = dx.data() + b * e_sz;
      for (int64_t e = 0; e < e_sz; ++e) d[e] += (g[e] - y[e] * dot) * inv;
    }
  });
}

// ---------------- normalization ----------------

template <typename T>
Tensor<T> instance_norm_1d(const Tensor<T>& x, const std::type_identity_t<Tensor<T>>* gamma,
                           const std::type_identity_t<Tensor<T>>* beta, T eps) {
  MASV_CHECK(x.ndim() == 3, DimensionError, "instance_norm_1d expects [B,C,T], got ",
             shape_str(x.shape()));
  MASV_CHECK(x.dim(2) >= 2, ContractError,
             "instance_norm_1d: time axis has length ", x.dim(2),
             ", statistics are degenerate (need T >= 2)");
  MASV_CHECK((gamma == nullptr) == (beta == nullptr), ContractError,
             "instance_norm_1d: gamma and beta must be given together");
  const int64_t b_sz = x.dim(0), c_sz = x.dim(1), t_len = x.dim(2);
  if (gamma) {
    MASV_CHECK(gamma->numel() == c_sz && beta->numel() == c_sz, DimensionError,
               "instance_norm_1d affine size vs channels (axis 1)");
  }
  auto xv = x.data();
  std::vector<T> yv(xv.size());
  std::vector<T> means(static_cast<size_t>(b_sz * c_sz)), invs(static_cast<size_t>(b_sz * c_sz));
  for (int64_t r = 0; r < b_sz * c_sz; ++r) {
    const T* p = xv.data() + r * t_len;
    T mu = T(0);
    for (int64_t t = 0; t < t_len; ++t) mu += p[t];
    mu /= static_cast<T>(t_len);
    T var = T(0);
    for (int64_t t = 0; t < t_len; ++t) {
      const T dv = p[t] - mu;
      var += dv * dv;
    }
    var /= static_cast<T>(t_len);
    const T inv = T(1) / std::sqrt(var + eps);
    means[static_cast<size_t>(r)] = mu;
    invs[static_cast<size_t>(r)] = inv;
    const int64_t c = r % c_sz;
    const T gm = gamma ? gamma->data()[static_cast<size_t>(c)] : T(1);
    const T bt = beta ? beta->data()[static_cast<size_t>(c)] : T(0);
    T* q = yv.data() + r * t_len;
    for (int64_t t = 0; t < t_len; ++t) q[t] = (p[t] - mu) * inv * gm + bt;
  }
  std::vector<Tensor<T>> inputs{x};
  if (gamma) {
    inputs.push_back(*gamma);
    inputs.push_back(*beta);
  }
  const bool affine = gamma != nullptr;
  return make_op<T>(x.shape(), std::move(yv), std::move(inputs),
                    [b_sz, c_sz, t_len, means, invs, affine](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& dx = px.grad_buf();
    const T tn = static_cast<T>(t_len);
    for (int64_t r = 0; r < b_sz * c_sz; ++r) {
      const int64_t c = r % c_sz;
      const T gm = affine ? self.parents[1]->value[static_cast<size_t>(c)] : T(1);
      const T mu = means[static_cast<size_t>(r)], inv = invs[static_cast<size_t>(r)];
      const T* g = self.grad.data() + r * t_len;
      const T* p = px.value.data() + r * t_len;
      T sum_g = T(0), sum_gx = T(0);
      for (int64_t t = 0; t < t_len; ++t) {
        sum_g += g[t];
        sum_gx += g[t] * (p[t] - mu) * inv;
      }
      if (affine) {
        self.parents[1]->grad_buf()[static_cast<size_t>(c)] += sum_gx;
        self.parents[2]->grad_buf()[static_cast<size_t>(c)] += sum_g;
      }
      const T mg = sum_g / tn, mgx = sum_gx / tn;
      T* d = dx.data() + r * t_len;
      for (int64_t t = 0; t < t_len; ++t) {
        const T xh = (p[t] - mu) * inv;
        d[t] += gm * inv * (g[t] - mg - xh * mgx);
      }
    }
  });
}

template <typename T>
Tensor<T> batch_norm_1d(const Tensor<T>& x, const std::type_identity_t<Tensor<T>>* gamma,
                        const std::type_identity_t<Tensor<T>>* beta,
                        RunningStats<T>& stats, bool training, T momentum, T eps) {
  MASV_CHECK(x.ndim() == 2 || x.ndim() == 3, DimensionError,
             "batch_norm_1d expects [B,C] or [B,C,T], got ", shape_str(x.shape()));
  const int64_t b_sz = x.dim(0), c_sz = x.dim(1);
  const int64_t t_len = x.ndim() == 3 ? x.dim(2) : 1;
  const int64_t n = b_sz * t_len;
  MASV_CHECK((gamma == nullptr) == (beta == nullptr), ContractError,
             "batch_norm_1d: gamma and beta must be given together");
  if (gamma)
    MASV_CHECK(gamma->numel() == c_sz && beta->numel() == c_sz, DimensionError,
               "batch_norm_1d affine size vs channels (axis 1)");
  if (stats.mean.empty()) {
    stats.mean.assign(static_cast<size_t>(c_sz), T(0));
    stats.var.assign(static_cast<size_t>(c_sz), T(1));
  }
  MASV_CHECK(static_cast<int64_t>(stats.mean.size()) == c_sz, StateError,
             "batch_norm_1d: running stats sized for ", stats.mean.size(),
             " channels, input has ", c_sz);

  auto xv = x.data();
  std::vector<T> mu(static_cast<size_t>(c_sz)), inv(static_cast<size_t>(c_sz));
  if (training) {
    MASV_CHECK(n >= 2, ContractError,
               "batch_norm_1d training requires B*T >= 2, got ", n);
    for (int64_t c = 0; c < c_sz; ++c) {
      T m = T(0);
      for (int64_t b = 0; b < b_sz; ++b) {
        const T* p = xv.data() + (b * c_sz + c) * t_len;
        for (int64_t t = 0; t < t_len; ++t) m += p[t];
      }
      m /= static_cast<T>(n);
      T v = T(0);
      for (int64_t b = 0; b < b_sz; ++b) {
        const T* p = xv.data() + (b * c_sz + c) * t_len;
        for (int64_t t = 0; t < t_len; ++t) {
          const T dv = p[t] - m;
          v += dv * dv;
        }
      }
      v /= static_cast<T>(n);
      mu[static_cast<size_t>(c)] = m;
      inv[static_cast<size_t>(c)] = T(1) / std::sqrt(v + eps);
      const T unbiased = v * static_cast<T>(n) / static_cast<T>(n - 1);
      stats.mean[static_cast<size_t>(c)] = (T(1) - momentum) * stats.mean[static_cast<size_t>(c)] + momentum * m;
      stats.var[static_cast<size_t>(c)] = (T(1) - momentum) * stats.var[static_cast<size_t>(c)] + momentum * unbiased;
    }
    stats.initialized = true;
  } else {
    MASV_CHECK(stats.initialized, StateError,
               "batch_norm_1d evaluated before any statistics update");
    for (int64_t c = 0; c < c_sz; ++c) {
      mu[static_cast<size_t>(c)] = stats.mean[static_cast<size_t>(c)];
      inv[static_cast<size_t>(c)] = T(1) / std::sqrt(stats.var[static_cast<size_t>(c)] + eps);
    }
  }

  std::vector<T> yv(xv.size());
  for (int64_t b = 0; b < b_sz; ++b)
    for (int64_t c = 0; c < c_sz; ++c) {
      const T gm = gamma ? gamma->data()[static_cast<size_t>(c)] : T(1);
      const T bt = beta ? beta->data()[static_cast<size_t>(c)] : T(0);
      const T m = mu[static_cast<size_t>(c)], iv = inv[static_cast<size_t>(c)];
      const T* p = xv.data() + (b * c_sz + c) * t_len;
      T* q = yv.data() + (b * c_sz + c) * t_len;
      for (int64_t t = 0; t < t_len; ++t) q[t] = (p[t] - m) * iv * gm + bt;
    }

  std::vector<Tensor<T>> inputs{x};
  if (gamma) {
    inputs.push_back(*gamma);
    inputs.push_back(*beta);
  }
  const bool affine = gamma != nullptr;
  return make_op<T>(x.shape(), std::move(yv), std::move(inputs),
                    [b_sz, c_sz, t_len, n, mu, inv, affine, training](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& dx = px.grad_buf();
    for (int64_t c = 0; c < c_sz; ++c) {
      const T gm = affine ? self.parents[1]->value[static_cast<size_t>(c)] : T(1);
      const T m = mu[static_cast<size_t>(c)], iv = inv[static_cast<size_t>(c)];
      T sum_g = T(0), sum_gx = T(0);
      for (int64_t b = 0; b < b_sz; ++b) {
        const T* g = self.grad.data() + (b * c_sz + c) * t_len;
        const T* p = px.value.data() + (b * c_sz + c) * t_len;
        for (int64_t t = 0; t < t_len; ++t) {
          sum_g += g[t];
          sum_gx += g[t] * (p[t] - m) * iv;
        }
      }
      if (affine) {
        self.parents[1]->grad_buf()[static_cast<size_t>(c)] += sum_gx;
        self.parents[2]->grad_buf()[static_cast<size_t>(c)] += sum_g;
      }
      const T mg = sum_g / static_cast<T>(n), mgx = sum_gx / static_cast<T>(n);
      for (int64_t b = 0; b < b_sz; ++b) {
        const T* g = self.grad.data() + (b * c_sz + c) * t_len;
        const T* p = px.value.data() + (b * c_sz + c) * t_len;
        T* d = dx.data() + (b * c_sz + c) * t_len;
        for (int64_t t = 0; t < t_len; ++t) {
          if (training) {
            const T xh = (p[t] - m) * iv;
            d[t] += gm * iv * (g[t] - mg - xh * mgx);
          } else {
            d[t] += gm * iv * g[t];
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> softmax_time(const Tensor<T>& x) {
  MASV_CHECK(x.ndim() == 3, DimensionError, "softmax_time expects [B,C,T]");
  const int64_t rows = x.dim(0) * x.dim(1), t_len = x.dim(2);
  auto xv = x.data();
  std::vector<T> yv(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = xv.data() + r * t_len;
    T m = p[0];
    for (int64_t t = 1; t < t_len; ++t) m = std::max(m, p[t]);
    T s = T(0);
    T* q = yv.data() + r * t_len;
    for (int64_t t = 0; t < t_len; ++t) {
      q[t] = std::exp(p[t] - m);
      s += q[t];
    }
    const T invs = T(1) / s;
    for (int64_t t = 0; t < t_len; ++t) q[t] *= invs;
  }
  return make_op<T>(x.shape(), std::move(yv), {x}, [rows, t_len](Node<T>& self) {
    auto& dx = self.parents[0]->grad_buf();
    for (int64_t r = 0; r < rows; ++r) {
      const T* g = self.grad.data() + r * t_len;
      const T* y = self.value.data() + r * t_len;
      T dot = T(0);
      for (int64_t t = 0; t < t_len; ++t) dot += g[t] * y[t];
      T* d = dx.data() + r * t_len;
      for (int64_t t = 0; t < t_len; ++t) d[t] += y[t] * (g[t] - dot);
    }
  });
}

template <typename T>
Tensor<T> masked_row_lse(const Tensor<T>& z, const std::vector<uint8_t>& mask) {
  MASV_CHECK(z.ndim() == 2, DimensionError, "masked_row_lse expects [R,C]");
  const int64_t rows = z.dim(0), cols = z.dim(1);
  MASV_CHECK(static_cast<int64_t>(mask.size()) == rows * cols, DimensionError,
             "masked_row_lse: mask size ", mask.size(), " vs ", rows * cols);
  auto zv = z.data();
  std::vector<T> yv(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = zv.data() + r * cols;
    const uint8_t* mk = mask.data() + r * cols;
    T m = -std::numeric_limits<T>::infinity();
    int64_t active = 0;
    for (int64_t c = 0; c < cols; ++c)
      if (mk[c]) {
        m = std::max(m, p[c]);
        ++active;
      }
    MASV_CHECK(active > 0, ContractError, "masked_row_lse: row ", r, " has no active entries");
    T s = T(0);
    for (int64_t c = 0; c < cols; ++c)
      if (mk[c]) s += std::exp(p[c] - m);
    yv[static_cast<size_t>(r)] = m + std::log(s);
  }
  return make_op<T>({rows}, std::move(yv), {z}, [rows, cols, mask](Node<T>& self) {
    auto& pz = *self.parents[0];
    auto& dz = pz.grad_buf();
    for (int64_t r = 0; r < rows; ++r) {
      const T g = self.grad[static_cast<size_t>(r)];
      if (g == T(0)) continue;
      const T lse = self.value[static_cast<size_t>(r)];
      const T* p = pz.value.data() + r * cols;
      const uint8_t* mk = mask.data() + r * cols;
      T* d = dz.data() + r * cols;
      for (int64_t c = 0; c < cols; ++c)
        if (mk[c]) d[c] += g * std::exp(p[c] - lse);
    }
  });
}

template <typename T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                  const Tensor<T>& x0, double h) {
  Tensor<T> x = x0.clone();
  x.set_requires_grad(true);
  Tensor<T> y = f(x);
  MASV_CHECK(y.numel() == 1, ContractError, "grad_check requires a scalar-valued function");
  backward(y);
  std::vector<double> analytic(x.grad().begin(), x.grad().end());

  NoGradGuard ng;
  double max_err = 0.0;
  for (int64_t i = 0; i < x0.numel(); ++i) {
    Tensor<T> xp = x0.clone();
    xp.mutable_data()[static_cast<size_t>(i)] += static_cast<T>(h);
    Tensor<T> xm = x0.clone();
    xm.mutable_data()[static_cast<size_t>(i)] -= static_cast<T>(h);
    const double fp = static_cast<double>(f(xp).item());
    const double fm = static_cast<double>(f(xm).item());
    const double fd = (fp - fm) / (2.0 * h);
    MASV_CHECK(std::isfinite(fd) && std::isfinite(analytic[static_cast<size_t>(i)]), NumericError,
               "grad_check: non-finite value at coordinate ", i);
    const double err = std::abs(analytic[static_cast<size_t>(i)] - fd) / std::max(1.0, std::abs(fd));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

// ---- explicit instantiations ----
#define MASV_INSTANTIATE_OPS(T)                                                            \
  template Tensor<T> relu(const Tensor<T>&);                                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                            \
  template Tensor<T> tanh_(const Tensor<T>&);                                              \
  template Tensor<T> silu(const Tensor<T>&);                                               \
  template Tensor<T> softplus(const Tensor<T>&);                                           \
  template Tensor<T> exp_(const Tensor<T>&);                                               \
  template Tensor<T> log_(const Tensor<T>&);                                               \
  template Tensor<T> square(const Tensor<T>&);                                             \
  template Tensor<T> neg(const Tensor<T>&);                                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                      \
  template Tensor<T> sqrt_floor(const Tensor<T>&, T);                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> flip_time(const Tensor<T>&);                                          \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                           \
  template Tensor<T> narrow(const Tensor<T>&, int, int64_t, int64_t);                      \
  template Tensor<T> broadcast_channel(const Tensor<T>&, int64_t);                         \
  template Tensor<T> expand_time(const Tensor<T>&, int64_t);                               \
  template Tensor<T> sum_all(const Tensor<T>&);                                            \
  template Tensor<T> mean_all(const Tensor<T>&);                                           \
  template Tensor<T> sum_time(const Tensor<T>&);                                           \
  template Tensor<T> mean_time(const Tensor<T>&);                                          \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> mul_cs(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&,                       \
                            const std::type_identity_t<Tensor<T>>*, int, int, int, int);                                                \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&,                       \
                            const std::type_identity_t<Tensor<T>>*, int, int);                                                          \
  template Tensor<T> linear2d(const Tensor<T>&, const Tensor<T>&,                     \
                              const std::type_identity_t<Tensor<T>>*);       \
  template Tensor<T> gram(const Tensor<T>&);                                               \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&, T);                               \
  template Tensor<T> instance_norm_1d(const Tensor<T>&,                               \
                                      const std::type_identity_t<Tensor<T>>*,           \
                                      const std::type_identity_t<Tensor<T>>*, T);       \
  template Tensor<T> batch_norm_1d(const Tensor<T>&,                                  \
                                   const std::type_identity_t<Tensor<T>>*,              \
                                   const std::type_identity_t<Tensor<T>>*,              \
                                   RunningStats<T>&, bool, T, T);                          \
  template Tensor<T> softmax_time(const Tensor<T>&);                                       \
  template Tensor<T> masked_row_lse(const Tensor<T>&, const std::vector<uint8_t>&);        \
  template double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>&,            \
                             const Tensor<T>&, double);

MASV_INSTANTIATE_OPS(float)
MASV_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace masv
