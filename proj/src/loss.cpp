#include "masv/loss.hpp"

namespace masv {
namespace train {

namespace o = masv::ops;

template <typename T>
Tensor<T> circle_loss(const Tensor<T>& embeddings, const std::vector<int>& labels,
                      const CircleLossConfig& cfg) {
  cfg.validate();
  MASV_CHECK(embeddings.ndim() == 2, DimensionError, "circle_loss expects [B,E] embeddings");
  const int64_t b_sz = embeddings.dim(0);
  MASV_CHECK(static_cast<int64_t>(labels.size()) == b_sz, DimensionError,
             "circle_loss: ", labels.size(), " labels for batch of ", b_sz);
  MASV_CHECK(b_sz >= 2, ContractError, "circle_loss needs a batch of at least 2");

  std::vector<uint8_t> pos(static_cast<size_t>(b_sz * b_sz), 0);
  std::vector<uint8_t> neg(static_cast<size_t>(b_sz * b_sz), 0);
  int64_t n_pos = 0, n_neg = 0;
  for (int64_t i = 0; i < b_sz; ++i)
    for (int64_t j = 0; j < b_sz; ++j) {
      if (i == j) continue;
      if (labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)]) {
        pos[static_cast<size_t>(i * b_sz + j)] = 1;
        ++n_pos;
      } else {
        neg[static_cast<size_t>(i * b_sz + j)] = 1;
        ++n_neg;
      }
    }
  MASV_CHECK(n_pos > 0, ContractError, "circle_loss: batch has no positive pair");
  MASV_CHECK(n_neg > 0, ContractError, "circle_loss: batch has no negative pair");

  // Anchors need both kinds of pairs; others drop out of the average. Rows
  // that drop out still need one active lse entry, so point them at the
  // diagonal and weight them zero.
  std::vector<T> w(static_cast<size_t>(b_sz), T(0));
  int64_t n_valid = 0;
  for (int64_t i = 0; i < b_sz; ++i) {
    bool has_p = false, has_n = false;
    for (int64_t j = 0; j < b_sz; ++j) {
      has_p = has_p || pos[static_cast<size_t>(i * b_sz + j)];
      has_n = has_n || neg[static_cast<size_t>(i * b_sz + j)];
    }
    if (has_p && has_n) {
      w[static_cast<size_t>(i)] = T(1);
      ++n_valid;
    } else {
      pos[static_cast<size_t>(i * b_sz + i)] = 1;
      neg[static_cast<size_t>(i * b_sz + i)] = 1;
    }
  }
  MASV_CHECK(n_valid > 0, ContractError, "circle_loss: no anchor has both pair kinds");

  const T m = static_cast<T>(cfg.m);
  const T s = static_cast<T>(cfg.s);

  Tensor<T> sim = o::gram(o::l2_normalize_rows(embeddings));
  Tensor<T> alpha_p = o::relu(o::add_scalar(o::neg(sim), T(1) + m));  // relu(1+m-s_p)
  Tensor<T> alpha_n = o::relu(o::add_scalar(sim, m));                 // relu(s_n+m)
  Tensor<T> zn = o::scale(o::mul(alpha_n, o::add_scalar(sim, -m)), s);
  Tensor<T> zp = o::scale(o::mul(alpha_p, o::add_scalar(sim, -(T(1) - m))), -s);
  Tensor<T> lse_n = o::masked_row_lse(zn, neg);
  Tensor<T> lse_p = o::masked_row_lse(zp, pos);
  Tensor<T> per_anchor = o::softplus(o::add(lse_n, lse_p));
  Tensor<T> weights = Tensor<T>::from_data({b_sz}, std::move(w));
  return o::scale(o::sum_all(o::mul(per_anchor, weights)), T(1) / static_cast<T>(n_valid));
}

template Tensor<float> circle_loss(const Tensor<float>&, const std::vector<int>&,
                                   const CircleLossConfig&);
template Tensor<double> circle_loss(const Tensor<double>&, const std::vector<int>&,
                                    const CircleLossConfig&);

}  // namespace train
}  // namespace masv
