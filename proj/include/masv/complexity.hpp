#pragma once

#include <string>
#include <vector>

#include "masv/blocks.hpp"

namespace masv {
namespace complexity {

// Calibration length for the published-FLOPS comparison: the paper reports
// model FLOPS without the input duration, so the frame count used for the
// headline numbers is pinned here (140 frames = 1.4 s at a 10 ms hop).
constexpr int64_t kCalibrationFrames = 140;

struct LayerCost {
  std::string name;
  std::string kind;  // stem | conv_cc | ctx | mamba | scan | se | norm | mfa | asp | head
  int64_t params = 0;
  double flops = 0.0;  // for the requested frame count, batch 1
};

struct CostReport {
  int64_t params = 0;
  double flops_total = 0.0;
  double flops_per_frame = 0.0;
  double scan_flops = 0.0;  // scan recurrences only; exactly linear in T
  int64_t frames = 0;
  std::vector<LayerCost> layers;
  double kind_flops(const std::string& kind) const;
  int64_t kind_params(const std::string& kind) const;
};

// Closed-form count from the layer formulas; must equal the instantiated sum.
int64_t count_params_analytic(const model::ModelConfig& cfg);
// Ground truth: builds the model and sums parameter tensor sizes.
int64_t count_params_instantiated(const model::ModelConfig& cfg);

// MAC = 2 FLOPs; element ops (activations, norms, softmax, exp) = 1 each.
CostReport estimate_flops(const model::ModelConfig& cfg, int64_t frames);

// name,params,flops rows sorted by params; stable formatting.
std::string emit_comparison_csv(const std::vector<model::ModelConfig>& configs, int64_t frames,
                                bool include_reference = false);
std::string breakdown_json(const CostReport& report);

// Published numbers used only as comparison anchors, never computed here.
struct ReferencePoint {
  std::string name;
  double params = 0.0;  // absolute count
  double flops = 0.0;   // absolute FLOPs; <0 when unpublished
};
const std::vector<ReferencePoint>& reference_points();

}  // namespace complexity
}  // namespace masv
