#include <cmath>

#include "doctest.h"
#include "masv/ops.hpp"
#include "testutil.hpp"

using namespace masv;
namespace o = masv::ops;
using testutil::bit_equal;
using testutil::conv1d_oracle;
using testutil::max_abs_diff;
using testutil::rand_tensor;
using testutil::rand_tensor_nokink;

namespace {
using Fn = std::function<Tensor<double>(const Tensor<double>&)>;

// grad_check over >= 10 random inputs, h = 1e-5, f64
void check_many(const char* name, const Shape& shape, const Fn& f, bool avoid_kinks = false,
                double lo = -1.0, double hi = 1.0, double tol = 1e-4) {
  Rng rng(fnv1a(name));
  for (int i = 0; i < 10; ++i) {
    Tensor<double> x = avoid_kinks ? rand_tensor_nokink<double>(shape, rng)
                                   : rand_tensor<double>(shape, rng, lo, hi);
    const double err = o::grad_check<double>(f, x, 1e-5);
    INFO(name, " case ", i, " err=", err);
    CHECK(err < tol);
  }
}
}  // namespace

TEST_CASE("conv1d trivial and oracle examples") {
  // scalar kernel acts as scaling
  Tensor<double> x = Tensor<double>::from_data({1, 1, 3}, {1, 2, 3});
  Tensor<double> w = Tensor<double>::from_data({1, 1, 1}, {2});
  Tensor<double> y = o::conv1d(x, w, nullptr, 1, 0);
  CHECK(y.data()[0] == 2.0);
  CHECK(y.data()[1] == 4.0);
  CHECK(y.data()[2] == 6.0);

  // K=3 shift kernel, checked against direct summation
  Tensor<double> w3 = Tensor<double>::from_data({1, 1, 3}, {1, 0, 0});
  Tensor<double> y3 = o::conv1d(x, w3, nullptr, 1, 1);
  auto ref = conv1d_oracle({1, 2, 3}, 1, 1, 3, {1, 0, 0}, 1, 3, 1, 1, 1, 1, nullptr);
  for (int i = 0; i < 3; ++i) CHECK(y3.data()[static_cast<size_t>(i)] == ref[static_cast<size_t>(i)]);

  // identity kernel (delta at center, same padding) reproduces the input
  Rng rng(3);
  Tensor<double> xr = rand_tensor<double>({2, 3, 7}, rng);
  std::vector<double> ident(3 * 3 * 3, 0.0);
  for (int c = 0; c < 3; ++c) ident[static_cast<size_t>((c * 3 + c) * 3 + 1)] = 1.0;
  Tensor<double> wi = Tensor<double>::from_data({3, 3, 3}, std::move(ident));
  CHECK(max_abs_diff(o::conv1d(xr, wi, nullptr, 1, 1), xr) == 0.0);
}

TEST_CASE("conv1d randomized against direct-summation oracle") {
  Rng rng(17);
  for (int i = 0; i < 20; ++i) {
    const int64_t b = 1 + static_cast<int64_t>(rng.uniform_int(2));
    const int64_t groups = (i % 3 == 0) ? 2 : 1;
    const int64_t cin = groups * (1 + static_cast<int64_t>(rng.uniform_int(3)));
    const int64_t cout = groups * (1 + static_cast<int64_t>(rng.uniform_int(3)));
    const int64_t k = 1 + static_cast<int64_t>(rng.uniform_int(4));
    const int dil = 1 + static_cast<int>(rng.uniform_int(2));
    const int64_t t = dil * (k - 1) + 1 + static_cast<int64_t>(rng.uniform_int(6));
    const int pl = static_cast<int>(rng.uniform_int(3)), pr = static_cast<int>(rng.uniform_int(3));
    Tensor<double> x = rand_tensor<double>({b, cin, t}, rng);
    Tensor<double> w = rand_tensor<double>({cout, cin / groups, k}, rng);
    Tensor<double> bias = rand_tensor<double>({cout}, rng);
    Tensor<double> y = o::conv1d(x, w, &bias, dil, pl, pr, static_cast<int>(groups));
    std::vector<double> xv(x.data().begin(), x.data().end());
    std::vector<double> wv(w.data().begin(), w.data().end());
    std::vector<double> bv(bias.data().begin(), bias.data().end());
    auto ref = conv1d_oracle(xv, b, cin, t, wv, cout, k, dil, pl, pr, groups, &bv);
    double m = 0;
    for (size_t j = 0; j < ref.size(); ++j)
      m = std::max(m, std::abs(ref[j] - y.data()[j]));
    CHECK(m < 1e-12);
  }
}

TEST_CASE("conv1d dimension errors name the offending axes") {
  Tensor<double> x = Tensor<double>::zeros({1, 3, 5});
  Tensor<double> w = Tensor<double>::zeros({2, 4, 3});
  try {
    o::conv1d(x, w, nullptr, 1, 0);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("axis 1") != std::string::npos);
  }
  // output length < 1
  CHECK_THROWS_AS(o::conv1d(x, Tensor<double>::zeros({2, 3, 7}), nullptr, 1, 0), DimensionError);
}

TEST_CASE("instance_norm examples") {
  // hand-checked (1,2,3) with eps=0
  Tensor<double> x = Tensor<double>::from_data({1, 1, 3}, {1, 2, 3});
  Tensor<double> y = o::instance_norm_1d<double>(x, nullptr, nullptr, 0.0);
  CHECK(y.data()[0] == doctest::Approx(-1.224744871391589).epsilon(1e-12));
  CHECK(y.data()[1] == doctest::Approx(0.0));
  CHECK(y.data()[2] == doctest::Approx(1.224744871391589).epsilon(1e-12));

  // constant slice absorbed by eps
  Tensor<double> c = Tensor<double>::from_data({1, 1, 3}, {5, 5, 5});
  Tensor<double> yc = o::instance_norm_1d<double>(c, nullptr, nullptr, 1e-5);
  for (double v : yc.data()) CHECK(std::abs(v) < 1e-9);

  // idempotent on already-normalized input
  Tensor<double> yy = o::instance_norm_1d<double>(y, nullptr, nullptr, 1e-12);
  CHECK(max_abs_diff(yy, y) < 1e-6);

  // per-slice statistics on random input
  Rng rng(5);
  Tensor<double> r = rand_tensor<double>({2, 3, 16}, rng);
  Tensor<double> yr = o::instance_norm_1d<double>(r, nullptr, nullptr, 1e-10);
  for (int64_t row = 0; row < 6; ++row) {
    double mu = 0, var = 0;
    for (int64_t t = 0; t < 16; ++t) mu += yr.data()[static_cast<size_t>(row * 16 + t)];
    mu /= 16;
    for (int64_t t = 0; t < 16; ++t) {
      const double d = yr.data()[static_cast<size_t>(row * 16 + t)] - mu;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }

  // degenerate time axis
  CHECK_THROWS_AS(o::instance_norm_1d<double>(Tensor<double>::zeros({1, 2, 1}), nullptr, nullptr, 1e-5),
                  ContractError);
}

TEST_CASE("batch_norm examples") {
  ops::RunningStats<double> stats;
  // two-point symmetry: per-channel values (0,2) -> (-1,1), eps=0
  Tensor<double> x = Tensor<double>::from_data({2, 1}, {0, 2});
  Tensor<double> y = o::batch_norm_1d<double>(x, nullptr, nullptr, stats, true, 0.1, 0.0);
  CHECK(y.data()[0] == doctest::Approx(-1.0));
  CHECK(y.data()[1] == doctest::Approx(1.0));

  // eval with running mean 0, var 1 is the identity
  ops::RunningStats<double> st2;
  st2.mean = {0.0};
  st2.var = {1.0};
  st2.initialized = true;
  Tensor<double> z = Tensor<double>::from_data({3, 1}, {0.5, -2.0, 7.0});
  Tensor<double> yz = o::batch_norm_1d<double>(z, nullptr, nullptr, st2, false, 0.1, 0.0);
  CHECK(max_abs_diff(yz, z) == 0.0);

  // eval before any update
  ops::RunningStats<double> st3;
  CHECK_THROWS_AS(o::batch_norm_1d<double>(z, nullptr, nullptr, st3, false, 0.1, 1e-5), StateError);

  // training-mode output has per-channel mean ~0
  Rng rng(9);
  ops::RunningStats<double> st4;
  Tensor<double> r = rand_tensor<double>({4, 3, 8}, rng);
  Tensor<double> yr = o::batch_norm_1d<double>(r, nullptr, nullptr, st4, true, 0.1, 1e-5);
  for (int64_t c = 0; c < 3; ++c) {
    double mu = 0;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t t = 0; t < 8; ++t) mu += yr.data()[static_cast<size_t>((b * 3 + c) * 8 + t)];
    CHECK(std::abs(mu / 32.0) < 1e-6);
  }
  CHECK(st4.initialized);

  // training needs at least two values per channel
  ops::RunningStats<double> st5;
  CHECK_THROWS_AS(o::batch_norm_1d<double>(Tensor<double>::zeros({1, 2}), nullptr, nullptr, st5,
                                           true, 0.1, 1e-5),
                  ContractError);
}

TEST_CASE("flip_time examples") {
  Tensor<double> x = Tensor<double>::from_data({1, 1, 3}, {1, 2, 3});
  Tensor<double> y = o::flip_time(x);
  CHECK(y.data()[0] == 3.0);
  CHECK(y.data()[1] == 2.0);
  CHECK(y.data()[2] == 1.0);

  Tensor<double> one = Tensor<double>::from_data({1, 2, 1}, {4, 5});
  CHECK(bit_equal(o::flip_time(one), one));

  Rng rng(13);
  Tensor<double> r = rand_tensor<double>({2, 3, 9}, rng);
  CHECK(bit_equal(o::flip_time(o::flip_time(r)), r));  // involution, exact

  // gradient of sum(flip(x)) is all ones (finite differences)
  const double err = o::grad_check<double>(
      [](const Tensor<double>& t) { return o::sum_all(o::flip_time(t)); }, r, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("concat then narrow is the identity; masked lse checks rows") {
  Rng rng(21);
  Tensor<double> a = rand_tensor<double>({2, 3, 4}, rng);
  Tensor<double> b = rand_tensor<double>({2, 2, 4}, rng);
  Tensor<double> cat = o::concat<double>({a, b}, 1);
  CHECK(bit_equal(o::narrow(cat, 1, 0, 3), a));
  CHECK(bit_equal(o::narrow(cat, 1, 3, 2), b));

  std::vector<uint8_t> empty_mask(4, 0);
  CHECK_THROWS_AS(o::masked_row_lse(Tensor<double>::zeros({2, 2}), empty_mask), ContractError);
}

TEST_CASE("softmax_time rows sum to one") {
  Rng rng(23);
  Tensor<double> x = rand_tensor<double>({2, 3, 7}, rng, -3.0, 3.0);
  Tensor<double> y = o::softmax_time(x);
  for (int64_t r = 0; r < 6; ++r) {
    double s = 0;
    for (int64_t t = 0; t < 7; ++t) s += y.data()[static_cast<size_t>(r * 7 + t)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("grad_check on the trivial function is tight") {
  Rng rng(1);
  Tensor<double> x = rand_tensor<double>({5}, rng);
  const double err =
      o::grad_check<double>([](const Tensor<double>& t) { return o::sum_all(t); }, x, 1e-5);
  CHECK(err < 1e-10);
}

// every primitive passes grad_check with rel err < 1e-4 on >= 10 random inputs
TEST_CASE("gradient suite: elementwise primitives") {
  auto wrap = [](Tensor<double> (*op)(const Tensor<double>&)) {
    return [op](const Tensor<double>& t) { return o::sum_all(o::mul(op(t), op(t))); };
  };
  check_many("relu", {3, 4}, wrap(&o::relu<double>), true);
  check_many("sigmoid", {3, 4}, wrap(&o::sigmoid<double>));
  check_many("tanh", {3, 4}, wrap(&o::tanh_<double>));
  check_many("silu", {3, 4}, wrap(&o::silu<double>));
  check_many("softplus", {3, 4}, wrap(&o::softplus<double>));
  check_many("exp", {3, 4}, wrap(&o::exp_<double>));
  check_many("log", {3, 4},
             [](const Tensor<double>& t) { return o::sum_all(o::square(o::log_(t))); }, false,
             0.2, 3.0);
  check_many("square", {3, 4}, wrap(&o::square<double>));
  check_many("neg", {3, 4}, wrap(&o::neg<double>));
  check_many("scale", {3, 4}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::scale(t, 1.7)));
  });
  check_many("add_scalar", {3, 4}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::add_scalar(t, 0.3)));
  });
  check_many("sqrt_floor", {3, 4},
             [](const Tensor<double>& t) { return o::sum_all(o::sqrt_floor(t, 1e-6)); }, true);
}

TEST_CASE("gradient suite: binary and broadcast primitives") {
  Rng rng(31);
  Tensor<double> other = rand_tensor<double>({3, 4}, rng);
  check_many("add", {3, 4}, [other](const Tensor<double>& t) {
    return o::sum_all(o::square(o::add(t, other)));
  });
  check_many("sub", {3, 4}, [other](const Tensor<double>& t) {
    return o::sum_all(o::square(o::sub(t, other)));
  });
  check_many("mul", {3, 4}, [other](const Tensor<double>& t) {
    return o::sum_all(o::square(o::mul(t, other)));
  });
  Tensor<double> bias = rand_tensor<double>({3}, rng);
  check_many("add_channel_bias", {2, 3, 5}, [bias](const Tensor<double>& t) {
    return o::sum_all(o::square(o::add_channel_bias(t, bias)));
  });
  Tensor<double> cs = rand_tensor<double>({2, 3}, rng);
  check_many("mul_cs", {2, 3, 5}, [cs](const Tensor<double>& t) {
    return o::sum_all(o::square(o::mul_cs(t, cs)));
  });
  // also differentiate through the scale argument
  Tensor<double> x235 = rand_tensor<double>({2, 3, 5}, rng);
  check_many("mul_cs_scale", {2, 3}, [x235](const Tensor<double>& s) {
    return o::sum_all(o::square(o::mul_cs(x235, s)));
  });
}

TEST_CASE("gradient suite: shape, reduction and linalg primitives") {
  check_many("flip_time", {2, 3, 5}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::flip_time(t)));
  });
  check_many("concat_narrow", {2, 3, 5}, [](const Tensor<double>& t) {
    Tensor<double> c = o::concat<double>({t, o::scale(t, 0.5)}, 1);
    return o::sum_all(o::square(o::narrow(c, 1, 2, 3)));
  });
  check_many("concat_time", {2, 3, 5}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::concat<double>({t, t}, 2)));
  });
  check_many("broadcast_channel", {2, 1, 5}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::broadcast_channel(t, 4)));
  });
  check_many("expand_time", {2, 3}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::expand_time(t, 5)));
  });
  check_many("mean_all", {3, 4}, [](const Tensor<double>& t) {
    return o::square(o::mean_all(o::square(t)));
  });
  check_many("sum_time", {2, 3, 5}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::sum_time(t)));
  });
  check_many("mean_time", {2, 3, 5}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::mean_time(t)));
  });
  check_many("softmax_time", {2, 2, 6}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::softmax_time(t)));
  });

  Rng rng(37);
  Tensor<double> w = rand_tensor<double>({4, 6}, rng);
  Tensor<double> b = rand_tensor<double>({4}, rng);
  check_many("linear2d", {3, 6}, [w, b](const Tensor<double>& t) {
    return o::sum_all(o::square(o::linear2d(t, w, &b)));
  });
  Tensor<double> x36 = rand_tensor<double>({3, 6}, rng);
  check_many("linear2d_w", {4, 6}, [x36](const Tensor<double>& t) {
    return o::sum_all(o::square(o::linear2d(x36, t, nullptr)));
  });
  check_many("gram", {3, 5}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::gram(t)));
  });
  check_many("l2_normalize_rows", {3, 5}, [](const Tensor<double>& t) {
    return o::sum_all(o::square(o::l2_normalize_rows(t, 1e-12)));
  });
  Tensor<double> cw = rand_tensor<double>({4, 3, 3}, rng);
  Tensor<double> cb = rand_tensor<double>({4}, rng);
  check_many("conv1d_x", {2, 3, 6}, [cw, cb](const Tensor<double>& t) {
    return o::sum_all(o::square(o::conv1d(t, cw, &cb, 1, 1)));
  });
  Tensor<double> cx = rand_tensor<double>({2, 3, 6}, rng);
  check_many("conv1d_w", {4, 3, 3}, [cx, cb](const Tensor<double>& t) {
    return o::sum_all(o::square(o::conv1d(cx, t, &cb, 1, 1)));
  });
  check_many("conv1d_bias", {4}, [cx, cw](const Tensor<double>& t) {
    return o::sum_all(o::square(o::conv1d(cx, cw, &t, 1, 1)));
  });
  // depthwise grouped conv
  Tensor<double> dwx = rand_tensor<double>({2, 4, 8}, rng);
  check_many("conv1d_depthwise_w", {4, 1, 3}, [dwx](const Tensor<double>& t) {
    return o::sum_all(o::square(o::conv1d(dwx, t, nullptr, 1, 2, 0, 4)));
  });

  std::vector<uint8_t> mask = {1, 0, 1, 1, 1, 0, 0, 1, 1};
  check_many("masked_row_lse", {3, 3}, [mask](const Tensor<double>& t) {
    return o::sum_all(o::square(o::masked_row_lse(t, mask)));
  });
}

TEST_CASE("gradient suite: normalization primitives") {
  Rng rng(41);
  Tensor<double> gamma = rand_tensor<double>({3}, rng, 0.5, 1.5);
  Tensor<double> beta = rand_tensor<double>({3}, rng);
  check_many("instance_norm", {2, 3, 6}, [gamma, beta](const Tensor<double>& t) {
    return o::sum_all(o::square(o::instance_norm_1d<double>(t, &gamma, &beta, 1e-5)));
  });
  // gamma/beta gradients
  Tensor<double> xin = rand_tensor<double>({2, 3, 6}, rng);
  const double eg = o::grad_check<double>(
      [xin, beta](const Tensor<double>& g) {
        return o::sum_all(o::square(o::instance_norm_1d<double>(xin, &g, &beta, 1e-5)));
      },
      gamma, 1e-5);
  CHECK(eg < 1e-4);

  check_many("batch_norm_train", {4, 3, 5}, [gamma, beta](const Tensor<double>& t) {
    ops::RunningStats<double> st;  // fresh stats per call keeps f pure
    return o::sum_all(o::square(o::batch_norm_1d<double>(t, &gamma, &beta, st, true, 0.1, 1e-5)));
  });
  ops::RunningStats<double> ev;
  ev.mean = {0.1, -0.2, 0.3};
  ev.var = {1.1, 0.9, 1.3};
  ev.initialized = true;
  check_many("batch_norm_eval", {4, 3, 5}, [gamma, beta, ev](const Tensor<double>& t) {
    ops::RunningStats<double> st = ev;
    return o::sum_all(o::square(o::batch_norm_1d<double>(t, &gamma, &beta, st, false, 0.1, 1e-5)));
  });
}
