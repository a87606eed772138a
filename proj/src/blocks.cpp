#include "masv/blocks.hpp"

#include <algorithm>
#include <cmath>

namespace masv {
namespace model {

namespace o = masv::ops;

// ---------------- ModelConfig ----------------

void ModelConfig::validate() const {
  MASV_CHECK(channels >= 1, ConfigError, "channels must be >= 1");
  MASV_CHECK(feat_dim >= 1, ConfigError, "feat_dim must be >= 1");
  MASV_CHECK(mfa_channels >= 1, ConfigError, "mfa_channels must be >= 1");
  MASV_CHECK(num_blocks >= 1, ConfigError, "num_blocks must be >= 1");
  MASV_CHECK(state_dim >= 1, ConfigError, "state_dim must be >= 1");
  MASV_CHECK(context_window >= 0, ConfigError, "context_window must be >= 0");
  MASV_CHECK(embedding_dim >= 1, ConfigError, "embedding_dim must be >= 1");
  MASV_CHECK(mamba_inner >= 1, ConfigError, "mamba_inner must be >= 1");
  MASV_CHECK(mamba_conv_kernel >= 1, ConfigError, "mamba_conv_kernel must be >= 1");
  MASV_CHECK(se_reduction >= 1 && channels / se_reduction >= 1, ConfigError,
             "se_reduction ", se_reduction, " too large for ", channels, " channels");
  MASV_CHECK(asp_bottleneck >= 1, ConfigError, "asp_bottleneck must be >= 1");
  MASV_CHECK(stem_kernel >= 1, ConfigError, "stem_kernel must be >= 1");
  if (baseline_res2)
    MASV_CHECK(res2_scale >= 1 && channels % res2_scale == 0, ConfigError,
               "res2 scale ", res2_scale, " must divide channels ", channels);
  MASV_CHECK(scan_chunk >= 1, ConfigError, "scan_chunk must be >= 1");
}

std::string ModelConfig::name() const {
  std::string head;
  if (baseline_res2)
    head = "base";
  else if (use_lcb && !use_tri)
    head = "+lcb";
  else if (use_tri && !use_full_skip)
    head = "+tri";
  else if (use_lcb && use_tri && use_full_skip)
    head = "masv";
  else
    head = "custom";
  return head + "-" + std::to_string(channels);
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["channels"] = std::to_string(channels);
  kv["feat_dim"] = std::to_string(feat_dim);
  kv["mfa_channels"] = std::to_string(mfa_channels);
  kv["num_blocks"] = std::to_string(num_blocks);
  kv["state_dim"] = std::to_string(state_dim);
  kv["context_window"] = std::to_string(context_window);
  kv["embedding_dim"] = std::to_string(embedding_dim);
  kv["mamba_inner"] = std::to_string(mamba_inner);
  kv["mamba_conv_kernel"] = std::to_string(mamba_conv_kernel);
  kv["se_reduction"] = std::to_string(se_reduction);
  kv["asp_bottleneck"] = std::to_string(asp_bottleneck);
  kv["stem_kernel"] = std::to_string(stem_kernel);
  kv["res2_scale"] = std::to_string(res2_scale);
  kv["scan_chunk"] = std::to_string(scan_chunk);
  kv["use_lcb"] = use_lcb ? "1" : "0";
  kv["use_tri"] = use_tri ? "1" : "0";
  kv["use_full_skip"] = use_full_skip ? "1" : "0";
  kv["baseline_res2"] = baseline_res2 ? "1" : "0";
  return kv;
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto geti = [&](const char* k, int64_t& out) {
    auto it = kv.find(k);
    if (it != kv.end()) out = std::stoll(it->second);
  };
  auto getb = [&](const char* k, bool& out) {
    auto it = kv.find(k);
    if (it != kv.end()) out = it->second != "0" && it->second != "false";
  };
  geti("channels", c.channels);
  geti("feat_dim", c.feat_dim);
  geti("mfa_channels", c.mfa_channels);
  geti("num_blocks", c.num_blocks);
  geti("state_dim", c.state_dim);
  geti("context_window", c.context_window);
  geti("embedding_dim", c.embedding_dim);
  geti("mamba_inner", c.mamba_inner);
  geti("mamba_conv_kernel", c.mamba_conv_kernel);
  geti("se_reduction", c.se_reduction);
  geti("asp_bottleneck", c.asp_bottleneck);
  geti("stem_kernel", c.stem_kernel);
  geti("res2_scale", c.res2_scale);
  int64_t chunk = c.scan_chunk;
  geti("scan_chunk", chunk);
  c.scan_chunk = static_cast<int>(chunk);
  getb("use_lcb", c.use_lcb);
  getb("use_tri", c.use_tri);
  getb("use_full_skip", c.use_full_skip);
  getb("baseline_res2", c.baseline_res2);
  c.validate();
  return c;
}

ModelConfig ModelConfig::base_model(int64_t channels) {
  ModelConfig c;
  c.channels = channels;
  c.baseline_res2 = true;
  c.use_lcb = c.use_tri = c.use_full_skip = false;
  return c;
}

ModelConfig ModelConfig::plus_lcb(int64_t channels) {
  ModelConfig c;
  c.channels = channels;
  c.use_lcb = true;
  c.use_tri = false;
  c.use_full_skip = false;
  return c;
}

ModelConfig ModelConfig::plus_tri(int64_t channels) {
  ModelConfig c = plus_lcb(channels);
  c.use_tri = true;
  return c;
}

ModelConfig ModelConfig::complete(int64_t channels) {
  ModelConfig c = plus_tri(channels);
  c.use_full_skip = true;
  return c;
}

ModelConfig ModelConfig::tiny(bool with_lcb) {
  ModelConfig c;
  c.channels = 64;
  c.num_blocks = 2;
  c.state_dim = 8;
  c.mamba_inner = 32;
  c.mfa_channels = 128;
  c.embedding_dim = 64;
  c.asp_bottleneck = 32;
  c.context_window = 4;
  c.use_lcb = with_lcb;
  return c;
}

// ---------------- AspPool ----------------

template <typename T>
AspPool<T>::AspPool(int64_t channels, int64_t bottleneck, Rng& rng)
    : w1(3 * channels, bottleneck, 1, nn::Pad::none, 1, 1, true, rng),
      w2(bottleneck, channels, 1, nn::Pad::none, 1, 1, true, rng) {}

template <typename T>
Tensor<T> AspPool<T>::logits(const Tensor<T>& x) const {
  MASV_CHECK(x.ndim() == 3, DimensionError, "asp: input must be [B,F,T]");
  MASV_CHECK(x.dim(2) >= 2, ContractError,
             "asp: pooled std is degenerate for T = ", x.dim(2), " (need T >= 2)");
  const int64_t t_len = x.dim(2);
  Tensor<T> mu = o::mean_time(x);
  Tensor<T> sd = o::sqrt_floor(o::sub(o::mean_time(o::square(x)), o::square(mu)), T(1e-10));
  Tensor<T> ctx = o::concat<T>({x, o::expand_time(mu, t_len), o::expand_time(sd, t_len)}, 1);
  return w2.forward(o::tanh_(w1.forward(ctx)));
}

template <typename T>
Tensor<T> AspPool<T>::pool(const Tensor<T>& x) const {
  Tensor<T> alpha = o::softmax_time(logits(x));
  Tensor<T> mu = o::sum_time(o::mul(x, alpha));
  Tensor<T> m2 = o::sum_time(o::mul(o::square(x), alpha));
  Tensor<T> sd = o::sqrt_floor(o::sub(m2, o::square(mu)), T(1e-10));
  return o::concat<T>({mu, sd}, 1);
}

template <typename T>
void AspPool<T>::visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) {
  w1.visit_params(prefix + "w1.", fn);
  w2.visit_params(prefix + "w2.", fn);
}

// ---------------- SeBlock ----------------

template <typename T>
SeBlock<T>::SeBlock(int64_t channels, int64_t reduction, Rng& rng)
    : w1(channels, std::max<int64_t>(1, channels / reduction), true, rng),
      w2(std::max<int64_t>(1, channels / reduction), channels, true, rng) {}

template <typename T>
Tensor<T> SeBlock<T>::gates(const Tensor<T>& x) const {
  return o::sigmoid(w2.forward(o::relu(w1.forward(o::mean_time(x)))));
}

template <typename T>
Tensor<T> SeBlock<T>::forward(const Tensor<T>& x) const {
  return o::mul_cs(x, gates(x));
}

template <typename T>
void SeBlock<T>::visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) {
  w1.visit_params(prefix + "w1.", fn);
  w2.visit_params(prefix + "w2.", fn);
}

// ---------------- LocalContext ----------------

template <typename T>
LocalContext<T>::LocalContext(int64_t channels, int64_t win, Rng& rng) : window(win) {
  if (window > 0) {
    const T k = static_cast<T>(1.0 / std::sqrt(static_cast<double>(window + 1)));
    weight = Tensor<T>::rand_uniform({channels, 1, window + 1}, rng, -k, k);
    weight.set_requires_grad(true);
    bias = Tensor<T>::zeros({channels});
    bias.set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> LocalContext<T>::forward(const Tensor<T>& x) const {
  if (window == 0) return x;
  Tensor<T> ctx = o::conv1d(x, weight, &bias, 1, static_cast<int>(window), 0,
                            static_cast<int>(x.dim(1)));
  return o::add(x, ctx);
}

template <typename T>
void LocalContext<T>::visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) {
  if (window > 0) {
    fn(prefix + "weight", weight);
    fn(prefix + "bias", bias);
  }
}

template <typename T>
Tensor<T> local_context_window(const Tensor<T>& x, const LocalContext<T>& ctx, Direction dir) {
  if (dir == Direction::forward) return ctx.forward(x);
  return o::flip_time(ctx.forward(o::flip_time(x)));
}

// ---------------- LcbBlock ----------------

template <typename T>
LcbBlock<T>::LcbBlock(int64_t channels, const ModelConfig& cfg, Rng& rng)
    : in_input(channels),
      in_fwd(channels),
      in_bwd(channels),
      in_out(channels),
      ctx_f(channels, cfg.context_window, rng),
      ctx_b(channels, cfg.context_window, rng),
      mamba_f(channels,
              ssm::MambaOpts{cfg.state_dim, 2, cfg.mamba_inner, cfg.mamba_conv_kernel,
                             cfg.scan_chunk},
              rng),
      mamba_b(channels,
              ssm::MambaOpts{cfg.state_dim, 2, cfg.mamba_inner, cfg.mamba_conv_kernel,
                             cfg.scan_chunk},
              rng),
      merge(2 * channels, channels, 1, nn::Pad::none, 1, 1, true, rng) {}

template <typename T>
Tensor<T> LcbBlock<T>::forward_path(const Tensor<T>& x) const {
  return in_fwd.forward(mamba_f.forward(ctx_f.forward(x)));
}

template <typename T>
Tensor<T> LcbBlock<T>::backward_path(const Tensor<T>& x) const {
  Tensor<T> rev = o::flip_time(x);
  Tensor<T> y = in_bwd.forward(mamba_b.forward(ctx_b.forward(rev)));
  return o::flip_time(y);
}

template <typename T>
Tensor<T> LcbBlock<T>::forward(const Tensor<T>& x) const {
  Tensor<T> x1 = in_input.forward(o::relu(x));
  Tensor<T> fwd = forward_path(x1);
  Tensor<T> bwd = backward_path(x1);
  Tensor<T> merged = merge.forward(o::concat<T>({fwd, bwd}, 1));
  Tensor<T> res = o::add(merged, x1);
  return in_out.forward(o::relu(res));
}

template <typename T>
void LcbBlock<T>::visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) {
  in_input.visit_params(prefix + "in_input.", fn);
  ctx_f.visit_params(prefix + "ctx_f.", fn);
  mamba_f.visit_params(prefix + "mamba_f.", fn);
  in_fwd.visit_params(prefix + "in_fwd.", fn);
  ctx_b.visit_params(prefix + "ctx_b.", fn);
  mamba_b.visit_params(prefix + "mamba_b.", fn);
  in_bwd.visit_params(prefix + "in_bwd.", fn);
  merge.visit_params(prefix + "merge.", fn);
  in_out.visit_params(prefix + "in_out.", fn);
}

// ---------------- TriBlock ----------------

template <typename T>
TriBlock<T>::TriBlock(const ModelConfig& cfg, Rng& rng)
    : conv_in(cfg.channels, cfg.channels, 1, nn::Pad::none, 1, 1, true, rng),
      bn_in(cfg.channels),
      conv_out(cfg.channels, cfg.channels, 1, nn::Pad::none, 1, 1, true, rng),
      bn_out(cfg.channels),
      se(cfg.channels, cfg.se_reduction, rng) {
  if (cfg.use_lcb) lcb = std::make_unique<LcbBlock<T>>(cfg.channels, cfg, rng);
  if (cfg.use_tri) {
    global_mamba = std::make_unique<ssm::MambaLayer<T>>(
        cfg.channels,
        ssm::MambaOpts{cfg.state_dim, 2, cfg.mamba_inner, cfg.mamba_conv_kernel,
                       cfg.scan_chunk},
        rng);
    bn_mid = std::make_unique<nn::BatchNorm1d<T>>(cfg.channels);
  }
}

template <typename T>
Tensor<T> TriBlock<T>::forward(const Tensor<T>& x, bool training,
                               ssm::MambaState<T>* global_state) {
  Tensor<T> h = bn_in.forward(o::relu(conv_in.forward(x)), training);
  if (lcb) h = lcb->forward(h);
  if (global_mamba)
    h = bn_mid->forward(o::relu(global_mamba->forward(h, global_state)), training);
  h = bn_out.forward(o::relu(conv_out.forward(h)), training);
  h = se.forward(h);
  return o::add(h, x);
}

template <typename T>
void TriBlock<T>::visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) {
  conv_in.visit_params(prefix + "conv_in.", fn);
  bn_in.visit_params(prefix + "bn_in.", fn);
  if (lcb) lcb->visit_params(prefix + "lcb.", fn);
  if (global_mamba) global_mamba->visit_params(prefix + "global.", fn);
  if (bn_mid) bn_mid->visit_params(prefix + "bn_mid.", fn);
  conv_out.visit_params(prefix + "conv_out.", fn);
  bn_out.visit_params(prefix + "bn_out.", fn);
  se.visit_params(prefix + "se.", fn);
}

template <typename T>
void TriBlock<T>::visit_stats(const std::string& prefix, const nn::StatsFn<T>& fn) {
  bn_in.visit_stats(prefix + "bn_in.", fn);
  if (bn_mid) bn_mid->visit_stats(prefix + "bn_mid.", fn);
  bn_out.visit_stats(prefix + "bn_out.", fn);
}

// ---------------- SeRes2Block ----------------

template <typename T>
SeRes2Block<T>::SeRes2Block(const ModelConfig& cfg, int dilation, Rng& rng)
    : conv_in(cfg.channels, cfg.channels, 1, nn::Pad::none, 1, 1, true, rng),
      bn_in(cfg.channels),
      bn_res(cfg.channels),
      conv_out(cfg.channels, cfg.channels, 1, nn::Pad::none, 1, 1, true, rng),
      bn_out(cfg.channels),
      se(cfg.channels, cfg.se_reduction, rng),
      scale(cfg.res2_scale) {
  MASV_CHECK(cfg.channels % scale == 0, ConfigError, "res2 scale ", scale,
             " must divide channels ", cfg.channels);
  const int64_t width = cfg.channels / scale;
  if (scale == 1) {
    res2.emplace_back(cfg.channels, cfg.channels, 3, nn::Pad::same, dilation, 1, true, rng);
  } else {
    for (int64_t i = 0; i + 1 < scale; ++i)
      res2.emplace_back(width, width, 3, nn::Pad::same, dilation, 1, true, rng);
  }
}

template <typename T>
Tensor<T> SeRes2Block<T>::forward(const Tensor<T>& x, bool training,
                                  ssm::MambaState<T>* /*global_state*/) {
  Tensor<T> h = bn_in.forward(o::relu(conv_in.forward(x)), training);
  Tensor<T> r;
  if (scale == 1) {
    r = res2[0].forward(h);
  } else {
    const int64_t width = h.dim(1) / scale;
    std::vector<Tensor<T>> ys;
    ys.reserve(static_cast<size_t>(scale));
    Tensor<T> prev;
    for (int64_t i = 0; i < scale; ++i) {
      Tensor<T> xi = o::narrow(h, 1, i * width, width);
      if (i == 0) {
        prev = xi;
      } else {
        prev = res2[static_cast<size_t>(i - 1)].forward(i == 1 ? xi : o::add(xi, prev));
      }
      ys.push_back(prev);
    }
    r = o::concat(ys, 1);
  }
  r = bn_res.forward(o::relu(r), training);
  Tensor<T> h2 = bn_out.forward(o::relu(conv_out.forward(r)), training);
  return o::add(se.forward(h2), x);
}

template <typename T>
void SeRes2Block<T>::visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) {
  conv_in.visit_params(prefix + "conv_in.", fn);
  bn_in.visit_params(prefix + "bn_in.", fn);
  for (size_t i = 0; i < res2.size(); ++i)
    res2[i].visit_params(prefix + "res2." + std::to_string(i) + ".", fn);
  bn_res.visit_params(prefix + "bn_res.", fn);
  conv_out.visit_params(prefix + "conv_out.", fn);
  bn_out.visit_params(prefix + "bn_out.", fn);
  se.visit_params(prefix + "se.", fn);
}

template <typename T>
void SeRes2Block<T>::visit_stats(const std::string& prefix, const nn::StatsFn<T>& fn) {
  bn_in.visit_stats(prefix + "bn_in.", fn);
  bn_res.visit_stats(prefix + "bn_res.", fn);
  bn_out.visit_stats(prefix + "bn_out.", fn);
}

// ---------------- MasvModel ----------------

template <typename T>
MasvModel<T>::MasvModel(const ModelConfig& cfg, uint64_t seed)
    : MasvModel(cfg, Rng(hash_combine(seed, fnv1a("masv-model")))) {}

template <typename T>
MasvModel<T>::MasvModel(const ModelConfig& cfg, Rng rng)
    : stem(cfg.feat_dim, cfg.channels, cfg.stem_kernel, nn::Pad::same, 1, 1, true, rng),
      bn_stem(cfg.channels),
      mfa(cfg.num_blocks * cfg.channels, cfg.mfa_channels, 1, nn::Pad::none, 1, 1, true, rng),
      asp(cfg.mfa_channels, cfg.asp_bottleneck, rng),
      bn_emb(2 * cfg.mfa_channels),
      emb(2 * cfg.mfa_channels, cfg.embedding_dim, true, rng),
      cfg_(cfg) {
  cfg_.validate();
  blocks.reserve(static_cast<size_t>(cfg_.num_blocks));
  for (int64_t i = 0; i < cfg_.num_blocks; ++i) {
    if (cfg_.baseline_res2)
      blocks.push_back(std::make_unique<SeRes2Block<T>>(cfg_, static_cast<int>(2 + i), rng));
    else
      blocks.push_back(std::make_unique<TriBlock<T>>(cfg_, rng));
  }
}

template <typename T>
Tensor<T> MasvModel<T>::mfa_output(const Tensor<T>& feats, bool training,
                                   StreamState<T>* stream) {
  MASV_CHECK(feats.ndim() == 3, DimensionError, "model input must be [B,feat,T], got ",
             shape_str(feats.shape()));
  MASV_CHECK(feats.dim(1) == cfg_.feat_dim, DimensionError, "model input features (axis 1) ",
             feats.dim(1), " do not match configured ", cfg_.feat_dim);
  MASV_CHECK(feats.dim(2) >= 2, ContractError, "model input needs T >= 2 frames");

  Tensor<T> s = bn_stem.forward(o::relu(stem.forward(feats)), training);
  std::vector<Tensor<T>> outs;
  outs.reserve(blocks.size());
  for (size_t i = 0; i < blocks.size(); ++i) {
    Tensor<T> in_i;
    if (cfg_.use_full_skip) {
      in_i = s;
      for (const auto& prev : outs) in_i = o::add(in_i, prev);
    } else {
      in_i = outs.empty() ? s : outs.back();
    }
    ssm::MambaState<T>* gs = stream ? &stream->global_states[i] : nullptr;
    outs.push_back(blocks[i]->forward(in_i, training, gs));
  }
  return o::relu(mfa.forward(o::concat(outs, 1)));
}

template <typename T>
Tensor<T> MasvModel<T>::embed_pooled(const Tensor<T>& pooled, bool training) {
  return o::l2_normalize_rows(emb.forward(bn_emb.forward(pooled, training)));
}

template <typename T>
Tensor<T> MasvModel<T>::forward(const Tensor<T>& feats, bool training) {
  Tensor<T> h = mfa_output(feats, training, nullptr);
  return embed_pooled(asp.pool(h), training);
}

template <typename T>
Tensor<T> MasvModel<T>::streaming_update(StreamState<T>& state, const Tensor<T>& raw_feats) {
  MASV_CHECK(raw_feats.ndim() == 3 && raw_feats.dim(0) == 1, DimensionError,
             "streaming_update expects a single-stream buffer [1,feat,T]");
  MASV_CHECK(raw_feats.dim(2) >= 2, ContractError, "streaming buffer needs T >= 2 frames");
  const int64_t f_dim = cfg_.feat_dim;
  const int64_t f_mfa = cfg_.mfa_channels;
  const int64_t t_len = raw_feats.dim(2);

  if (!state.initialized) {
    state.global_states.assign(static_cast<size_t>(cfg_.num_blocks), ssm::MambaState<T>{});
    state.asp_max.assign(static_cast<size_t>(f_mfa), -std::numeric_limits<T>::infinity());
    state.asp_s0.assign(static_cast<size_t>(f_mfa), T(0));
    state.asp_s1.assign(static_cast<size_t>(f_mfa), T(0));
    state.asp_s2.assign(static_cast<size_t>(f_mfa), T(0));
    state.cmn_sum.assign(static_cast<size_t>(f_dim), T(0));
    state.cmn_frames = 0;
    state.initialized = true;
  }
  MASV_CHECK(static_cast<int64_t>(state.global_states.size()) == cfg_.num_blocks &&
                 static_cast<int64_t>(state.asp_s0.size()) == f_mfa &&
                 static_cast<int64_t>(state.cmn_sum.size()) == f_dim,
             StateError, "stream state is incompatible with this model config");

  NoGradGuard ng;

  // causal CMN: running mean over every frame seen so far, current buffer included
  auto rv = raw_feats.data();
  for (int64_t c = 0; c < f_dim; ++c) {
    const T* p = rv.data() + c * t_len;
    T acc = T(0);
    for (int64_t t = 0; t < t_len; ++t) acc += p[t];
    state.cmn_sum[static_cast<size_t>(c)] += acc;
  }
  state.cmn_frames += t_len;
  std::vector<T> norm(rv.begin(), rv.end());
  for (int64_t c = 0; c < f_dim; ++c) {
    const T mean = state.cmn_sum[static_cast<size_t>(c)] / static_cast<T>(state.cmn_frames);
    T* p = norm.data() + c * t_len;
    for (int64_t t = 0; t < t_len; ++t) p[t] -= mean;
  }
  Tensor<T> feats = Tensor<T>::from_data(raw_feats.shape(), std::move(norm));

  Tensor<T> h = mfa_output(feats, false, &state);
  Tensor<T> lg = asp.logits(h);

  // pooled statistics accumulated across buffers, max-rescaled for stability
  auto hv = h.data();
  auto lv = lg.data();
  for (int64_t c = 0; c < f_mfa; ++c) {
    const T* lrow = lv.data() + c * t_len;
    const T* xrow = hv.data() + c * t_len;
    T m_new = state.asp_max[static_cast<size_t>(c)];
    for (int64_t t = 0; t < t_len; ++t) m_new = std::max(m_new, lrow[t]);
    const T m_old = state.asp_max[static_cast<size_t>(c)];
    const T rescale = (state.buffers_seen == 0) ? T(0) : std::exp(m_old - m_new);
    T s0 = state.asp_s0[static_cast<size_t>(c)] * rescale;
    T s1 = state.asp_s1[static_cast<size_t>(c)] * rescale;
    T s2 = state.asp_s2[static_cast<size_t>(c)] * rescale;
    for (int64_t t = 0; t < t_len; ++t) {
      const T w = std::exp(lrow[t] - m_new);
      s0 += w;
      s1 += w * xrow[t];
      s2 += w * xrow[t] * xrow[t];
    }
    state.asp_max[static_cast<size_t>(c)] = m_new;
    state.asp_s0[static_cast<size_t>(c)] = s0;
    state.asp_s1[static_cast<size_t>(c)] = s1;
    state.asp_s2[static_cast<size_t>(c)] = s2;
  }
  state.buffers_seen += 1;
  state.frames_seen += t_len;

  std::vector<T> pooled(static_cast<size_t>(2 * f_mfa));
  for (int64_t c = 0; c < f_mfa; ++c) {
    const T mu = state.asp_s1[static_cast<size_t>(c)] / state.asp_s0[static_cast<size_t>(c)];
    const T m2 = state.asp_s2[static_cast<size_t>(c)] / state.asp_s0[static_cast<size_t>(c)];
    const T var = m2 - mu * mu;
    pooled[static_cast<size_t>(c)] = mu;
    pooled[static_cast<size_t>(f_mfa + c)] = std::sqrt((var > T(0) ? var : T(0)) + T(1e-10));
  }
  return embed_pooled(Tensor<T>::from_data({1, 2 * f_mfa}, std::move(pooled)), false);
}

template <typename T>
void MasvModel<T>::visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) {
  stem.visit_params(prefix + "stem.", fn);
  bn_stem.visit_params(prefix + "bn_stem.", fn);
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i]->visit_params(prefix + "block" + std::to_string(i) + ".", fn);
  mfa.visit_params(prefix + "mfa.", fn);
  asp.visit_params(prefix + "asp.", fn);
  bn_emb.visit_params(prefix + "bn_emb.", fn);
  emb.visit_params(prefix + "emb.", fn);
}

template <typename T>
void MasvModel<T>::visit_stats(const std::string& prefix, const nn::StatsFn<T>& fn) {
  bn_stem.visit_stats(prefix + "bn_stem.", fn);
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i]->visit_stats(prefix + "block" + std::to_string(i) + ".", fn);
  bn_emb.visit_stats(prefix + "bn_emb.", fn);
}

// ---- instantiations ----
template class AspPool<float>;
template class AspPool<double>;
template class SeBlock<float>;
template class SeBlock<double>;
template class LocalContext<float>;
template class LocalContext<double>;
template Tensor<float> local_context_window(const Tensor<float>&, const LocalContext<float>&,
                                            Direction);
template Tensor<double> local_context_window(const Tensor<double>&,
                                             const LocalContext<double>&, Direction);
template class LcbBlock<float>;
template class LcbBlock<double>;
template class TriBlock<float>;
template class TriBlock<double>;
template class SeRes2Block<float>;
template class SeRes2Block<double>;
template class MasvModel<float>;
template class MasvModel<double>;

}  // namespace model
}  // namespace masv
