#include <cmath>
#include <limits>

#include "doctest.h"
#include "masv/loss.hpp"
#include "masv/optim.hpp"
#include "testutil.hpp"

using namespace masv;
namespace o = masv::ops;
using testutil::rand_tensor;

namespace {

// Independent scalar reimplementation of the adopted pairwise formulation,
// operating on a precomputed similarity matrix.
double circle_loss_scalar(const std::vector<double>& sim, const std::vector<int>& labels,
                          double m, double s) {
  const int64_t b = static_cast<int64_t>(labels.size());
  double total = 0.0;
  int64_t valid = 0;
  for (int64_t i = 0; i < b; ++i) {
    std::vector<double> zp, zn;
    for (int64_t j = 0; j < b; ++j) {
      if (i == j) continue;
      const double sv = sim[static_cast<size_t>(i * b + j)];
      if (labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)]) {
        const double ap = std::max(0.0, 1.0 + m - sv);
        zp.push_back(-s * ap * (sv - (1.0 - m)));
      } else {
        const double an = std::max(0.0, sv + m);
        zn.push_back(s * an * (sv - m));
      }
    }
    if (zp.empty() || zn.empty()) continue;
    auto lse = [](const std::vector<double>& z) {
      double mx = z[0];
      for (double v : z) mx = std::max(mx, v);
      double acc = 0;
      for (double v : z) acc += std::exp(v - mx);
      return mx + std::log(acc);
    };
    const double t = lse(zn) + lse(zp);
    total += t > 20 ? t : std::log1p(std::exp(t));
    ++valid;
  }
  return total / valid;
}

std::vector<double> cosine_matrix(const Tensor<double>& e) {
  const int64_t b = e.dim(0), d = e.dim(1);
  std::vector<double> sim(static_cast<size_t>(b * b));
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < b; ++j) {
      double dot = 0, ni = 1e-12, nj = 1e-12;
      for (int64_t k = 0; k < d; ++k) {
        dot += e.at({i, k}) * e.at({j, k});
        ni += e.at({i, k}) * e.at({i, k});
        nj += e.at({j, k}) * e.at({j, k});
      }
      sim[static_cast<size_t>(i * b + j)] = dot / std::sqrt(ni * nj);
    }
  return sim;
}

}  // namespace

TEST_CASE("circle loss: near-zero at the pairwise optimum") {
  // classes {A, A, B}; A at v, B at -v: s_p = 1, s_n = -1
  Tensor<double> e = Tensor<double>::from_data({3, 2}, {1, 0, 1, 0, -1, 0});
  train::CircleLossConfig cfg;  // m = 0.35, s = 60
  const double loss = train::circle_loss(e, {0, 0, 1}, cfg).item();
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-3);
}

TEST_CASE("circle loss: undiscriminated embeddings are strongly penalized") {
  Tensor<double> e = Tensor<double>::from_data({4, 2}, {1, 0, 1, 0, 1, 0, 1, 0});
  const double loss = train::circle_loss(e, {0, 0, 1, 1}, {}).item();
  CHECK(loss > std::log(2.0));  // far above the softplus(0) region
}

TEST_CASE("circle loss matches the independent scalar oracle") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const int64_t b = 4 + static_cast<int64_t>(rng.uniform_int(5));
    Tensor<double> e = rand_tensor<double>({b, 6}, rng);
    std::vector<int> labels(static_cast<size_t>(b));
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(3));
    labels[0] = 0;
    labels[1] = 0;
    labels[2] = 1;  // guarantee both pair kinds
    const double got = train::circle_loss(e, labels, {}).item();
    const double want = circle_loss_scalar(cosine_matrix(e), labels, 0.35, 60.0);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("circle loss: gradient check against finite differences") {
  Rng rng(5);
  Tensor<double> e = rand_tensor<double>({6, 5}, rng);
  std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  const double err = o::grad_check<double>(
      [&](const Tensor<double>& x) { return train::circle_loss(x, labels, {}); }, e, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("circle loss: decreasing in any active positive similarity") {
  // directional-derivative sign check on the scalar formulation
  Rng rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    const int64_t b = 5;
    std::vector<int> labels = {0, 0, 0, 1, 1};
    std::vector<double> sim(25);
    for (int64_t i = 0; i < 5; ++i)
      for (int64_t j = 0; j < 5; ++j)
        sim[static_cast<size_t>(i * 5 + j)] =
            i == j ? 1.0 : rng.uniform(-0.9, 0.9);
    // symmetrize
    for (int64_t i = 0; i < 5; ++i)
      for (int64_t j = i + 1; j < 5; ++j)
        sim[static_cast<size_t>(j * 5 + i)] = sim[static_cast<size_t>(i * 5 + j)];
    // pick a positive pair with active alpha_p (s_p < 1+m always true when < 0.9)
    const double base = circle_loss_scalar(sim, labels, 0.35, 60.0);
    const double h = 1e-6;
    auto bumped = sim;
    bumped[0 * 5 + 1] += h;
    bumped[1 * 5 + 0] += h;
    const double up = circle_loss_scalar(bumped, labels, 0.35, 60.0);
    CHECK(up <= base + 1e-12);
    (void)b;
  }
}

TEST_CASE("circle loss: contract errors") {
  Tensor<double> e = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  CHECK_THROWS_AS(train::circle_loss(e, {0, 1}, {}), ContractError);  // no positive pair
  CHECK_THROWS_AS(train::circle_loss(e, {0, 0}, {}), ContractError);  // no negative pair
  Tensor<double> one = Tensor<double>::from_data({1, 2}, {1, 0});
  CHECK_THROWS_AS(train::circle_loss(one, {0}, {}), ContractError);
  train::CircleLossConfig bad;
  bad.m = 1.5;
  CHECK_THROWS_AS(train::circle_loss(e, {0, 0}, bad), ConfigError);
}

TEST_CASE("cyclical lr: endpoints, peak, periodicity") {
  train::ScheduleConfig cfg;  // 1e-8 .. 1e-3 over 100k
  CHECK(train::cyclical_lr(0, cfg) == 1e-8);
  CHECK(train::cyclical_lr(50000, cfg) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(train::cyclical_lr(100000, cfg) == 1e-8);
  CHECK(train::cyclical_lr(25000, cfg) ==
        doctest::Approx(1e-8 + (1e-3 - 1e-8) * 0.5).epsilon(1e-12));
  for (int64_t s : {123, 4567, 99999})
    CHECK(train::cyclical_lr(s, cfg) == train::cyclical_lr(s + 100000, cfg));
  CHECK_THROWS_AS(train::cyclical_lr(-1, cfg), ContractError);
}

TEST_CASE("adam: identity on zero grads, one-step closed form, asymptote") {
  // zero grads, zero state, no decay: parameters unchanged
  Tensor<double> p = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  p.zero_grad();
  train::Adam<double> opt({p});
  opt.step(1e-3, 0.0);
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == -2.0);
  CHECK(p.data()[2] == 0.5);

  // single scalar, one step from zero state: delta = -lr*g/(|g| + eps)
  Tensor<double> q = Tensor<double>::from_data({1}, {0.7});
  q.set_requires_grad(true);
  q.zero_grad();
  q.grad_buf()[0] = 0.3;
  train::AdamConfig acfg;
  train::Adam<double> opt2({q});
  opt2.step(1e-2, 0.0);
  const double expect = 0.7 - 1e-2 * 0.3 / (std::abs(0.3) + acfg.eps);
  CHECK(q.data()[0] == doctest::Approx(expect).epsilon(1e-12));

  // constant gradient: update magnitude approaches lr, sign-consistent
  Tensor<double> r = Tensor<double>::from_data({1}, {0.0});
  r.set_requires_grad(true);
  train::Adam<double> opt3({r});
  double prev = 0.0;
  for (int i = 0; i < 500; ++i) {
    r.zero_grad();
    r.grad_buf()[0] = -0.42;
    prev = r.data()[0];
    opt3.step(1e-3, 0.0);
  }
  const double step_size = r.data()[0] - prev;
  CHECK(step_size > 0.0);  // opposite the gradient sign
  CHECK(std::abs(step_size - 1e-3) < 1e-5);
}

TEST_CASE("adam: decoupled weight decay shrinks parameters without grads") {
  Tensor<double> p = Tensor<double>::from_data({2}, {2.0, -4.0});
  p.set_requires_grad(true);
  p.zero_grad();
  train::Adam<double> opt({p});
  opt.step(0.1, 0.01);
  CHECK(p.data()[0] == doctest::Approx(2.0 - 0.1 * 0.01 * 2.0).epsilon(1e-12));
  CHECK(p.data()[1] == doctest::Approx(-4.0 - 0.1 * 0.01 * -4.0).epsilon(1e-12));
}

TEST_CASE("adam: non-finite gradients refuse the step and leave state intact") {
  Tensor<double> p = Tensor<double>::from_data({2}, {1.0, 2.0});
  p.set_requires_grad(true);
  p.zero_grad();
  p.grad_buf()[0] = std::numeric_limits<double>::quiet_NaN();
  train::Adam<double> opt({p});
  CHECK_THROWS_AS(opt.step(1e-3, 0.0), NumericError);
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == 2.0);
  CHECK(opt.steps_taken() == 0);
}
