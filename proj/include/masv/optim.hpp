#pragma once

#include <vector>

#include "masv/tensor.hpp"

namespace masv {
namespace train {

struct ScheduleConfig {
  double lr_min = 1e-8;
  double lr_max = 1e-3;
  int64_t cycle_steps = 100000;
  double weight_decay = 5e-5;
  int64_t batch_size = 64;
  void validate() const {
    MASV_CHECK(lr_min < lr_max, ConfigError, "cyclical lr needs lr_min < lr_max");
    MASV_CHECK(cycle_steps >= 2, ConfigError, "cycle_steps must be >= 2");
    MASV_CHECK(weight_decay >= 0.0, ConfigError, "weight_decay must be >= 0");
    MASV_CHECK(batch_size >= 2, ConfigError, "batch_size must be >= 2");
  }
};

// Triangular policy: linear rise lr_min -> lr_max over the first half cycle,
// linear fall back over the second; periodic in cycle_steps.
double cyclical_lr(int64_t step, const ScheduleConfig& cfg);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction (Kingma & Ba, Alg. 1) and decoupled weight decay
// p <- p - lr*wd*p. A non-finite gradient refuses the whole step.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {});

  void step(double lr, double weight_decay);
  void zero_grad();

  int64_t steps_taken() const { return step_; }
  void set_steps_taken(int64_t s) { step_ = s; }
  std::vector<std::vector<T>>& moment1() { return m_; }
  std::vector<std::vector<T>>& moment2() { return v_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamConfig cfg_;
  int64_t step_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace train
}  // namespace masv
