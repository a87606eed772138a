#include "masv/optim.hpp"

#include <cmath>

namespace masv {
namespace train {

double cyclical_lr(int64_t step, const ScheduleConfig& cfg) {
  cfg.validate();
  MASV_CHECK(step >= 0, ContractError, "cyclical_lr: step must be >= 0");
  const int64_t pos = step % cfg.cycle_steps;
  const double half = static_cast<double>(cfg.cycle_steps) / 2.0;
  const double frac = pos <= half ? pos / half : (cfg.cycle_steps - pos) / half;
  return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * frac;
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.numel()), T(0));
    v_.emplace_back(static_cast<size_t>(p.numel()), T(0));
  }
}

template <typename T>
void Adam<T>::step(double lr, double weight_decay) {
  // validate every gradient before touching any parameter
  for (auto& p : params_) {
    auto g = p.grad();
    for (T v : g)
      MASV_CHECK(std::isfinite(static_cast<double>(v)), NumericError,
                 "adam: non-finite gradient, step refused");
  }
  step_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto pv = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < pv.size(); ++j) {
      const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
      const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      const double upd = lr * mhat / (std::sqrt(vhat) + cfg_.eps) +
                         lr * weight_decay * static_cast<double>(pv[j]);
      pv[j] = static_cast<T>(pv[j] - static_cast<T>(upd));
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace train
}  // namespace masv
