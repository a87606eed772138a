#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "masv/ssm.hpp"

namespace masv {
namespace model {

struct ModelConfig {
  int64_t channels = 512;       // block width C
  int64_t feat_dim = 80;        // log-Mel coefficients
  int64_t mfa_channels = 1536;  // aggregated width after MFA
  int64_t num_blocks = 3;
  int64_t state_dim = 16;       // SSM N
  int64_t context_window = 8;   // LCB local window, frames
  int64_t embedding_dim = 192;
  int64_t mamba_inner = 128;    // inner width of every Mamba layer
  int64_t mamba_conv_kernel = 4;
  int64_t se_reduction = 8;
  int64_t asp_bottleneck = 128;
  int64_t stem_kernel = 5;
  int64_t res2_scale = 8;  // baseline blocks only
  int scan_chunk = 64;

  // Table-2 ablation axes
  bool use_lcb = true;
  bool use_tri = true;
  bool use_full_skip = true;
  bool baseline_res2 = false;

  void validate() const;
  std::string name() const;

  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);

  // Ablation presets
  static ModelConfig base_model(int64_t channels);
  static ModelConfig plus_lcb(int64_t channels);
  static ModelConfig plus_tri(int64_t channels);
  static ModelConfig complete(int64_t channels);
  static ModelConfig tiny(bool with_lcb = true);  // desk-scale training config
};

// Attention-weighted mean/std over time. pool() maps [B,F,T] -> [B,2F].
template <typename T>
class AspPool : public nn::Module<T> {
 public:
  AspPool(int64_t channels, int64_t bottleneck, Rng& rng);
  Tensor<T> logits(const Tensor<T>& x) const;  // [B,F,T] scores before softmax
  Tensor<T> pool(const Tensor<T>& x) const;
  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;

  nn::Conv1d<T> w1;  // 3F -> bottleneck (input is x with mean/std context)
  nn::Conv1d<T> w2;  // bottleneck -> F
};

template <typename T>
class SeBlock : public nn::Module<T> {
 public:
  SeBlock(int64_t channels, int64_t reduction, Rng& rng);
  Tensor<T> gates(const Tensor<T>& x) const;  // [B,C] in (0,1)
  Tensor<T> forward(const Tensor<T>& x) const;
  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;

  nn::Linear<T> w1, w2;
};

// Per-step context summary added to the Mamba input stream: a depthwise
// window over the previous `window` frames plus the current one.
// window == 0 is the identity.
template <typename T>
class LocalContext : public nn::Module<T> {
 public:
  LocalContext(int64_t channels, int64_t window, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;

  Tensor<T> weight;  // [C,1,window+1]
  Tensor<T> bias;    // [C]
  int64_t window = 0;
};

enum class Direction { forward, backward };

// Spec-level helper: backward direction is the flip conjugate of forward.
template <typename T>
Tensor<T> local_context_window(const Tensor<T>& x, const LocalContext<T>& ctx, Direction dir);

// Local Context Bidirectional Mamba (Fig. 1b). Stateless across buffers by
// construction: the signature admits no carried state.
template <typename T>
class LcbBlock : public nn::Module<T> {
 public:
  LcbBlock(int64_t channels, const ModelConfig& cfg, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x) const;
  // Exposed for the flip-conjugation identity checks.
  Tensor<T> forward_path(const Tensor<T>& x) const;   // ctx -> mamba -> IN
  Tensor<T> backward_path(const Tensor<T>& x) const;  // flip -> ctx -> mamba -> IN -> flip
  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;

  nn::InstanceNorm1d<T> in_input, in_fwd, in_bwd, in_out;
  LocalContext<T> ctx_f, ctx_b;
  ssm::MambaLayer<T> mamba_f, mamba_b;
  nn::Conv1d<T> merge;  // 1x1, 2C -> C
};

// One backbone block: either Tri-Mamba or the baseline SE-Res2.
template <typename T>
class BlockBase : public nn::Module<T> {
 public:
  virtual Tensor<T> forward(const Tensor<T>& x, bool training,
                            ssm::MambaState<T>* global_state) = 0;
};

template <typename T>
class TriBlock : public BlockBase<T> {
 public:
  TriBlock(const ModelConfig& cfg, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training,
                    ssm::MambaState<T>* global_state) override;
  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;
  void visit_stats(const std::string& prefix, const nn::StatsFn<T>& fn) override;

  nn::Conv1d<T> conv_in;
  nn::BatchNorm1d<T> bn_in;
  std::unique_ptr<LcbBlock<T>> lcb;          // when use_lcb
  std::unique_ptr<ssm::MambaLayer<T>> global_mamba;  // when use_tri
  std::unique_ptr<nn::BatchNorm1d<T>> bn_mid;
  nn::Conv1d<T> conv_out;
  nn::BatchNorm1d<T> bn_out;
  SeBlock<T> se;
};

template <typename T>
class SeRes2Block : public BlockBase<T> {
 public:
  SeRes2Block(const ModelConfig& cfg, int dilation, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training,
                    ssm::MambaState<T>* global_state) override;
  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;
  void visit_stats(const std::string& prefix, const nn::StatsFn<T>& fn) override;

  nn::Conv1d<T> conv_in;
  nn::BatchNorm1d<T> bn_in;
  std::vector<nn::Conv1d<T>> res2;  // scale-1 dilated convs (or one full-width conv)
  nn::BatchNorm1d<T> bn_res;
  nn::Conv1d<T> conv_out;
  nn::BatchNorm1d<T> bn_out;
  SeBlock<T> se;
  int64_t scale;
};

// Carried state of one audio stream: global-path Mamba carries, attention
// pooling partial sums, and the causal feature-mean for CMN.
template <typename T>
struct StreamState {
  std::vector<ssm::MambaState<T>> global_states;
  std::vector<T> asp_max, asp_s0, asp_s1, asp_s2;  // per MFA channel
  std::vector<T> cmn_sum;                          // per feature coefficient
  int64_t cmn_frames = 0;
  int64_t buffers_seen = 0;
  int64_t frames_seen = 0;
  bool initialized = false;
};

template <typename T>
class MasvModel : public nn::Module<T> {
 public:
  MasvModel(const ModelConfig& cfg, uint64_t seed);
  MasvModel(const ModelConfig& cfg, Rng rng);

  // feats [B, feat_dim, T] -> unit-norm [B, embedding_dim]
  Tensor<T> forward(const Tensor<T>& feats, bool training);
  // Backbone through MFA: [B, mfa_channels, T]
  Tensor<T> mfa_output(const Tensor<T>& feats, bool training,
                       StreamState<T>* stream = nullptr);
  // Head from pooled statistics [B, 2F]
  Tensor<T> embed_pooled(const Tensor<T>& pooled, bool training);

  // Streaming: consumes one raw (not yet CMN-normalized) feature buffer,
  // returns the embedding over all audio seen so far.
  Tensor<T> streaming_update(StreamState<T>& state, const Tensor<T>& raw_feats);

  void visit_params(const std::string& prefix, const nn::ParamFn<T>& fn) override;
  void visit_stats(const std::string& prefix, const nn::StatsFn<T>& fn) override;

  const ModelConfig& config() const { return cfg_; }

  nn::Conv1d<T> stem;
  nn::BatchNorm1d<T> bn_stem;
  std::vector<std::unique_ptr<BlockBase<T>>> blocks;
  nn::Conv1d<T> mfa;
  AspPool<T> asp;
  nn::BatchNorm1d<T> bn_emb;
  nn::Linear<T> emb;

 private:
  ModelConfig cfg_;
};

extern template class AspPool<float>;
extern template class AspPool<double>;
extern template class SeBlock<float>;
extern template class SeBlock<double>;
extern template class LocalContext<float>;
extern template class LocalContext<double>;
extern template class LcbBlock<float>;
extern template class LcbBlock<double>;
extern template class TriBlock<float>;
extern template class TriBlock<double>;
extern template class SeRes2Block<float>;
extern template class SeRes2Block<double>;
extern template class MasvModel<float>;
extern template class MasvModel<double>;

}  // namespace model
}  // namespace masv
