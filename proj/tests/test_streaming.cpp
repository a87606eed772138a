#include <cmath>

#include "doctest.h"
#include "masv/blocks.hpp"
#include "masv/checkpoint.hpp"
#include "testutil.hpp"

using namespace masv;
namespace o = masv::ops;
using testutil::bit_equal;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {
model::ModelConfig micro_cfg() {
  model::ModelConfig c;
  c.channels = 8;
  c.feat_dim = 8;
  c.mfa_channels = 12;
  c.num_blocks = 2;
  c.state_dim = 4;
  c.context_window = 3;
  c.embedding_dim = 6;
  c.mamba_inner = 8;
  c.asp_bottleneck = 4;
  return c;
}

// one training step to populate the BN running statistics
template <typename T>
void warm_up(model::MasvModel<T>& m, Rng& rng) {
  Tensor<T> feats = rand_tensor<T>({2, m.config().feat_dim, 24}, rng);
  m.forward(feats, true);
}

template <typename T>
Tensor<T> cmn_tensor(const Tensor<T>& raw) {
  Tensor<T> out = raw.clone();
  const int64_t c_sz = raw.dim(1), t_len = raw.dim(2);
  for (int64_t c = 0; c < c_sz; ++c) {
    T mu = T(0);
    for (int64_t t = 0; t < t_len; ++t) mu += raw.at({0, c, t});
    mu /= static_cast<T>(t_len);
    for (int64_t t = 0; t < t_len; ++t)
      out.mutable_data()[static_cast<size_t>(c * t_len + t)] -= mu;
  }
  return out;
}
}  // namespace

TEST_CASE("streaming: first call equals the non-streaming pass on the same buffer") {
  model::MasvModel<double> m(micro_cfg(), 17);
  Rng rng(3);
  warm_up(m, rng);
  Tensor<double> raw = rand_tensor<double>({1, 8, 20}, rng);

  model::StreamState<double> st;
  Tensor<double> streamed = m.streaming_update(st, raw);
  NoGradGuard ng;
  Tensor<double> batch = m.forward(cmn_tensor(raw), false);
  CHECK(max_abs_diff(streamed, batch) < 1e-12);
  CHECK(st.buffers_seen == 1);
  CHECK(st.frames_seen == 20);
}

TEST_CASE("streaming: embeddings never depend on future buffers") {
  model::MasvModel<double> m(micro_cfg(), 19);
  Rng rng(5);
  warm_up(m, rng);
  Tensor<double> b1 = rand_tensor<double>({1, 8, 14}, rng);
  Tensor<double> b2 = rand_tensor<double>({1, 8, 18}, rng);
  Tensor<double> b3 = rand_tensor<double>({1, 8, 11}, rng);

  model::StreamState<double> sa;
  m.streaming_update(sa, b1);
  Tensor<double> e2a = m.streaming_update(sa, b2);

  model::StreamState<double> sb;
  m.streaming_update(sb, b1);
  Tensor<double> e2b = m.streaming_update(sb, b2);
  m.streaming_update(sb, b3);  // extending the stream afterwards

  CHECK(bit_equal(e2a, e2b));
}

TEST_CASE("streaming: accumulated attention statistics are exact over buffers") {
  // the pooled result over all frames equals the direct weighted statistics
  // recomputed from the stored per-buffer logits
  model::MasvModel<double> m(micro_cfg(), 23);
  Rng rng(7);
  warm_up(m, rng);
  Tensor<double> b1 = rand_tensor<double>({1, 8, 9}, rng);
  Tensor<double> b2 = rand_tensor<double>({1, 8, 13}, rng);

  model::StreamState<double> st;
  m.streaming_update(st, b1);
  m.streaming_update(st, b2);

  // reference: recompute both buffers' mfa outputs and logits with carried
  // state, then form the softmax-weighted stats over the union of frames
  NoGradGuard ng;
  model::StreamState<double> st2;
  // causal CMN replica
  auto apply_cmn = [&](const Tensor<double>& raw, std::vector<double>& sum, int64_t& count) {
    Tensor<double> out = raw.clone();
    const int64_t c_sz = raw.dim(1), t_len = raw.dim(2);
    for (int64_t c = 0; c < c_sz; ++c) {
      for (int64_t t = 0; t < t_len; ++t) sum[static_cast<size_t>(c)] += raw.at({0, c, t});
    }
    count += t_len;
    for (int64_t c = 0; c < c_sz; ++c) {
      const double mu = sum[static_cast<size_t>(c)] / count;
      for (int64_t t = 0; t < t_len; ++t)
        out.mutable_data()[static_cast<size_t>(c * t_len + t)] -= mu;
    }
    return out;
  };
  std::vector<double> cmn_sum(8, 0.0);
  int64_t cmn_n = 0;
  st2.global_states.assign(2, ssm::MambaState<double>{});
  st2.initialized = true;  // partially; reuse only the global states
  st2.asp_max.assign(12, 0.0);
  st2.asp_s0.assign(12, 0.0);
  st2.asp_s1.assign(12, 0.0);
  st2.asp_s2.assign(12, 0.0);
  st2.cmn_sum.assign(8, 0.0);

  Tensor<double> f1 = apply_cmn(b1, cmn_sum, cmn_n);
  Tensor<double> h1 = m.mfa_output(f1, false, &st2);
  Tensor<double> l1 = m.asp.logits(h1);
  Tensor<double> f2 = apply_cmn(b2, cmn_sum, cmn_n);
  Tensor<double> h2 = m.mfa_output(f2, false, &st2);
  Tensor<double> l2 = m.asp.logits(h2);

  Tensor<double> h = o::concat<double>({h1, h2}, 2);
  Tensor<double> l = o::concat<double>({l1, l2}, 2);
  const int64_t t_all = h.dim(2);
  for (int64_t c = 0; c < 12; ++c) {
    double mx = -1e300;
    for (int64_t t = 0; t < t_all; ++t) mx = std::max(mx, l.at({0, c, t}));
    double s0 = 0, s1 = 0, s2 = 0;
    for (int64_t t = 0; t < t_all; ++t) {
      const double w = std::exp(l.at({0, c, t}) - mx);
      s0 += w;
      s1 += w * h.at({0, c, t});
      s2 += w * h.at({0, c, t}) * h.at({0, c, t});
    }
    const double mu = s1 / s0;
    const double var = s2 / s0 - mu * mu;
    const double mu_acc = st.asp_s1[static_cast<size_t>(c)] / st.asp_s0[static_cast<size_t>(c)];
    const double var_acc = st.asp_s2[static_cast<size_t>(c)] / st.asp_s0[static_cast<size_t>(c)] -
                           mu_acc * mu_acc;
    CHECK(mu == doctest::Approx(mu_acc).epsilon(1e-10));
    CHECK(var == doctest::Approx(var_acc).epsilon(1e-8));
  }
}

TEST_CASE("streaming: serialized state reproduces the identical continuation") {
  model::MasvModel<double> m(micro_cfg(), 29);
  Rng rng(11);
  warm_up(m, rng);
  Tensor<double> b1 = rand_tensor<double>({1, 8, 16}, rng);
  Tensor<double> b2 = rand_tensor<double>({1, 8, 12}, rng);

  model::StreamState<double> cont;
  m.streaming_update(cont, b1);
  Tensor<double> e_cont = m.streaming_update(cont, b2);

  model::StreamState<double> first;
  m.streaming_update(first, b1);
  io::Checkpoint ck = io::snapshot_stream(first);
  io::write_checkpoint("/tmp/masv_stream_state.bin", ck);
  model::StreamState<double> restored =
      io::restore_stream<double>(io::read_checkpoint("/tmp/masv_stream_state.bin"));
  Tensor<double> e_rest = m.streaming_update(restored, b2);

  CHECK(bit_equal(e_cont, e_rest));
}

TEST_CASE("streaming: incompatible state raises StateError") {
  model::MasvModel<double> m(micro_cfg(), 31);
  Rng rng(13);
  warm_up(m, rng);
  model::ModelConfig other = micro_cfg();
  other.mfa_channels = 16;
  model::MasvModel<double> m2(other, 31);
  Rng rng2(13);
  warm_up(m2, rng2);

  model::StreamState<double> st;
  m.streaming_update(st, rand_tensor<double>({1, 8, 10}, rng));
  CHECK_THROWS_AS(m2.streaming_update(st, rand_tensor<double>({1, 8, 10}, rng)), StateError);
}

TEST_CASE("streaming: buffers shorter than two frames are rejected") {
  model::MasvModel<double> m(micro_cfg(), 37);
  Rng rng(17);
  warm_up(m, rng);
  model::StreamState<double> st;
  CHECK_THROWS_AS(m.streaming_update(st, rand_tensor<double>({1, 8, 1}, rng)), ContractError);
}
