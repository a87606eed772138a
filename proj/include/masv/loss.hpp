#pragma once

#include <vector>

#include "masv/ops.hpp"

namespace masv {
namespace train {

struct CircleLossConfig {
  double m = 0.35;
  double s = 60.0;
  void validate() const {
    MASV_CHECK(m > 0.0 && m < 1.0, ConfigError, "circle loss margin m must be in (0,1), got ", m);
    MASV_CHECK(s > 0.0, ConfigError, "circle loss scale s must be positive, got ", s);
  }
};

// Pairwise Circle loss over a labeled batch of embeddings [B,E].
// Similarities are cosine; optima O_p = 1+m, O_n = -m and margins
// delta_p = 1-m, delta_n = m. Per anchor:
//   softplus( lse_{j in N} s*relu(s_n+m)*(s_n-m) + lse_{j in P} -s*relu(1+m-s_p)*(s_p-(1-m)) )
// averaged over anchors that have at least one positive and one negative.
template <typename T>
Tensor<T> circle_loss(const Tensor<T>& embeddings, const std::vector<int>& labels,
                      const CircleLossConfig& cfg);

extern template Tensor<float> circle_loss(const Tensor<float>&, const std::vector<int>&,
                                          const CircleLossConfig&);
extern template Tensor<double> circle_loss(const Tensor<double>&, const std::vector<int>&,
                                           const CircleLossConfig&);

}  // namespace train
}  // namespace masv
