#include "masv/complexity.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace masv {
namespace complexity {

using model::ModelConfig;

namespace {

struct Acc {
  std::vector<LayerCost>* out;
  int64_t frames;
  double scan_flops = 0.0;
  void add(const std::string& name, const std::string& kind, int64_t params, double flops) {
    out->push_back({name, kind, params, flops});
  }
};

int64_t conv_params(int64_t in, int64_t out, int64_t k, int64_t groups, bool bias) {
  return out * (in / groups) * k + (bias ? out : 0);
}
double conv_flops(int64_t in, int64_t out, int64_t k, int64_t groups, bool bias, int64_t t) {
  return static_cast<double>(out * (in / groups) * k) * 2.0 * t +
         (bias ? static_cast<double>(out) * t : 0.0);
}
int64_t linear_params(int64_t in, int64_t out, bool bias) {
  return out * in + (bias ? out : 0);
}

// mean+var pass, normalize, affine: ~6 element ops per entry
double norm_flops(int64_t c, int64_t t) { return 6.0 * static_cast<double>(c) * t; }

int64_t se_params(const ModelConfig& cfg) {
  const int64_t h = std::max<int64_t>(1, cfg.channels / cfg.se_reduction);
  return linear_params(cfg.channels, h, true) + linear_params(h, cfg.channels, true);
}
double se_flops(const ModelConfig& cfg, int64_t t) {
  const int64_t c = cfg.channels;
  const int64_t h = std::max<int64_t>(1, c / cfg.se_reduction);
  // time mean + once-per-utterance MLP + per-frame channel scaling
  return static_cast<double>(c) * t + 2.0 * static_cast<double>(h) * c + h +
         2.0 * static_cast<double>(c) * h + 5.0 * c + static_cast<double>(c) * t;
}

int64_t mamba_params(const ModelConfig& cfg) {
  const int64_t d = cfg.channels, m = cfg.mamba_inner, n = cfg.state_dim,
                k = cfg.mamba_conv_kernel;
  int64_t p = 0;
  p += conv_params(d, 2 * m, 1, 1, true);  // in_proj
  p += conv_params(m, m, k, m, true);      // depthwise conv
  p += m * n;                              // a_log
  p += conv_params(m, n, 1, 1, true) * 2;  // b_proj, c_proj
  p += m;                                  // delta_w (no bias)
  p += m;                                  // delta_bias
  p += m;                                  // d_skip
  p += conv_params(m, d, 1, 1, true);      // out_proj
  return p;
}

void mamba_flops(const ModelConfig& cfg, int64_t t, const std::string& name, Acc& acc) {
  const int64_t d = cfg.channels, m = cfg.mamba_inner, n = cfg.state_dim,
                k = cfg.mamba_conv_kernel;
  double f = 0.0;
  f += conv_flops(d, 2 * m, 1, 1, true, t);
  f += conv_flops(m, m, k, m, true, t);
  f += 5.0 * m * t;                        // SiLU on the conv stream
  f += conv_flops(m, n, 1, 1, true, t) * 2;
  f += conv_flops(m, 1, 1, 1, false, t) + 4.0 * m * t;  // delta: proj + bias + softplus
  f += 5.0 * m * t + static_cast<double>(m) * t;        // gate SiLU + gating mul
  f += conv_flops(m, d, 1, 1, true, t);
  acc.add(name, "mamba", mamba_params(cfg), f);
  // recurrence: exp, delta*A, state update, input injection, readout
  const double scan = static_cast<double>(t) * m * (8.0 * n + 2.0);
  acc.scan_flops += scan;
  acc.add(name + ".scan", "scan", 0, scan);
}

void lcb_cost(const ModelConfig& cfg, int64_t t, const std::string& p, Acc& acc) {
  const int64_t c = cfg.channels;
  const int64_t w = cfg.context_window;
  acc.add(p + "in_norms", "norm", 4 * 2 * c,
          static_cast<double>(c) * t + 4.0 * norm_flops(c, t));  // input relu + 4 INs
  if (w > 0) {
    const int64_t ctx_p = c * (w + 1) + c;
    const double ctx_f = conv_flops(1, 1, w + 1, 1, true, t) * c + static_cast<double>(c) * t;
    acc.add(p + "ctx_f", "ctx", ctx_p, ctx_f);
    acc.add(p + "ctx_b", "ctx", ctx_p, ctx_f);
  }
  mamba_flops(cfg, t, p + "mamba_f", acc);
  mamba_flops(cfg, t, p + "mamba_b", acc);
  acc.add(p + "merge", "conv_cc", conv_params(2 * c, c, 1, 1, true),
          conv_flops(2 * c, c, 1, 1, true, t) + 2.0 * c * t);  // + residual add + relu
}

void tri_cost(const ModelConfig& cfg, int64_t t, const std::string& p, Acc& acc) {
  const int64_t c = cfg.channels;
  acc.add(p + "conv_in", "conv_cc", conv_params(c, c, 1, 1, true),
          conv_flops(c, c, 1, 1, true, t) + c * t);
  acc.add(p + "bn_in", "norm", 2 * c, norm_flops(c, t));
  if (cfg.use_lcb) lcb_cost(cfg, t, p + "lcb.", acc);
  if (cfg.use_tri) {
    mamba_flops(cfg, t, p + "global", acc);
    acc.add(p + "bn_mid", "norm", 2 * c, norm_flops(c, t) + c * t);
  }
  acc.add(p + "conv_out", "conv_cc", conv_params(c, c, 1, 1, true),
          conv_flops(c, c, 1, 1, true, t) + c * t);
  acc.add(p + "bn_out", "norm", 2 * c, norm_flops(c, t));
  acc.add(p + "se", "se", se_params(cfg), se_flops(cfg, t) + c * t);  // + residual add
}

void res2_cost(const ModelConfig& cfg, int64_t t, const std::string& p, Acc& acc) {
  const int64_t c = cfg.channels, s = cfg.res2_scale;
  acc.add(p + "conv_in", "conv_cc", conv_params(c, c, 1, 1, true),
          conv_flops(c, c, 1, 1, true, t) + c * t);
  acc.add(p + "bn_in", "norm", 2 * c, norm_flops(c, t));
  if (s == 1) {
    acc.add(p + "res2", "conv_cc", conv_params(c, c, 3, 1, true),
            conv_flops(c, c, 3, 1, true, t));
  } else {
    const int64_t w = c / s;
    acc.add(p + "res2", "conv_cc", (s - 1) * conv_params(w, w, 3, 1, true),
            (s - 1) * (conv_flops(w, w, 3, 1, true, t) + static_cast<double>(w) * t));
  }
  acc.add(p + "bn_res", "norm", 2 * c, norm_flops(c, t) + c * t);
  acc.add(p + "conv_out", "conv_cc", conv_params(c, c, 1, 1, true),
          conv_flops(c, c, 1, 1, true, t) + c * t);
  acc.add(p + "bn_out", "norm", 2 * c, norm_flops(c, t));
  acc.add(p + "se", "se", se_params(cfg), se_flops(cfg, t) + c * t);
}

CostReport build_report(const ModelConfig& cfg, int64_t frames) {
  cfg.validate();
  MASV_CHECK(frames >= 1, ContractError, "flops estimate needs frames >= 1");
  CostReport rep;
  rep.frames = frames;
  Acc acc{&rep.layers, frames};
  const int64_t c = cfg.channels, t = frames, f = cfg.mfa_channels;

  acc.add("stem", "stem",
          conv_params(cfg.feat_dim, c, cfg.stem_kernel, 1, true) + 2 * c,
          conv_flops(cfg.feat_dim, c, cfg.stem_kernel, 1, true, t) + c * t + norm_flops(c, t));
  for (int64_t b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    if (cfg.baseline_res2)
      res2_cost(cfg, t, p, acc);
    else
      tri_cost(cfg, t, p, acc);
    if (cfg.use_full_skip && b > 0)
      acc.add(p + "skip", "norm", 0, static_cast<double>(b) * c * t);  // dense adds
  }
  acc.add("mfa", "mfa", conv_params(cfg.num_blocks * c, f, 1, 1, true),
          conv_flops(cfg.num_blocks * c, f, 1, 1, true, t) + f * t);
  const int64_t a = cfg.asp_bottleneck;
  acc.add("asp", "asp",
          conv_params(3 * f, a, 1, 1, true) + conv_params(a, f, 1, 1, true),
          6.0 * f * t +                              // context mean/std
              conv_flops(3 * f, a, 1, 1, true, t) +  // scorer bottleneck
              static_cast<double>(a) * t +           // tanh
              conv_flops(a, f, 1, 1, true, t) +      // scores
              4.0 * f * t +                          // softmax
              6.0 * f * t + 4.0 * f);                // weighted stats + sqrt
  acc.add("head", "head",
          4 * f + linear_params(2 * f, cfg.embedding_dim, true),
          10.0 * f + 2.0 * linear_params(2 * f, cfg.embedding_dim, false) +
              3.0 * cfg.embedding_dim);
  rep.scan_flops = acc.scan_flops;
  for (const auto& l : rep.layers) {
    rep.params += l.params;
    rep.flops_total += l.flops;
  }
  rep.flops_per_frame = rep.flops_total / static_cast<double>(frames);
  return rep;
}

}  // namespace

double CostReport::kind_flops(const std::string& kind) const {
  double acc = 0.0;
  for (const auto& l : layers)
    if (l.kind == kind) acc += l.flops;
  return acc;
}

int64_t CostReport::kind_params(const std::string& kind) const {
  int64_t acc = 0;
  for (const auto& l : layers)
    if (l.kind == kind) acc += l.params;
  return acc;
}

int64_t count_params_analytic(const ModelConfig& cfg) {
  CostReport rep = build_report(cfg, 2);
  return rep.params;
}

int64_t count_params_instantiated(const ModelConfig& cfg) {
  model::MasvModel<float> m(cfg, /*seed=*/0);
  return m.param_count();
}

CostReport estimate_flops(const ModelConfig& cfg, int64_t frames) {
  return build_report(cfg, frames);
}

std::string emit_comparison_csv(const std::vector<ModelConfig>& configs, int64_t frames,
                                bool include_reference) {
  MASV_CHECK(!configs.empty(), ContractError, "comparison needs at least one config");
  struct Row {
    std::string name;
    double params;
    double flops;
    bool reference;
  };
  std::vector<Row> rows;
  for (const auto& cfg : configs) {
    CostReport rep = estimate_flops(cfg, frames);
    rows.push_back({cfg.name(), static_cast<double>(rep.params), rep.flops_total, false});
  }
  if (include_reference)
    for (const auto& r : reference_points()) rows.push_back({r.name, r.params, r.flops, true});
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) { return a.params < b.params; });
  std::string out = "name,params,flops,source\n";
  char buf[160];
  for (const auto& r : rows) {
    if (r.flops >= 0)
      std::snprintf(buf, sizeof(buf), "%s,%.0f,%.17g,%s\n", r.name.c_str(), r.params, r.flops,
                    r.reference ? "reference" : "computed");
    else
      std::snprintf(buf, sizeof(buf), "%s,%.0f,,%s\n", r.name.c_str(), r.params,
                    r.reference ? "reference" : "computed");
    out += buf;
  }
  return out;
}

std::string breakdown_json(const CostReport& rep) {
  nlohmann::ordered_json j;
  j["params"] = rep.params;
  j["frames"] = rep.frames;
  j["flops_total"] = rep.flops_total;
  j["flops_per_frame"] = rep.flops_per_frame;
  j["scan_flops"] = rep.scan_flops;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& l : rep.layers) {
    nlohmann::ordered_json e;
    e["name"] = l.name;
    e["kind"] = l.kind;
    e["params"] = l.params;
    e["flops"] = l.flops;
    layers.push_back(e);
  }
  j["layers"] = layers;
  return j.dump(2);
}

const std::vector<ReferencePoint>& reference_points() {
  // Published ablation/complexity anchors; FLOPS are only public for the
  // 1024-channel model.
  static const std::vector<ReferencePoint> pts = {
      {"published-base-512", 6.2e6, -1.0},
      {"published-+lcb-512", 8.7e6, -1.0},
      {"published-+tri-512", 9.1e6, -1.0},
      {"published-masv-512", 9.2e6, -1.0},
      {"published-masv-1024", 22.2e6, 6.2e9},
  };
  return pts;
}

}  // namespace complexity
}  // namespace masv
