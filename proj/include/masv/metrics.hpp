#pragma once

#include <span>
#include <string>
#include <vector>

#include "masv/error.hpp"

namespace masv {
namespace eval {

struct DcfConfig {
  double p_target = 0.01;
  double c_fa = 1.0;
  double c_miss = 1.0;
  void validate() const {
    MASV_CHECK(p_target > 0.0 && p_target < 1.0, ConfigError, "p_target must be in (0,1)");
    MASV_CHECK(c_fa > 0.0 && c_miss > 0.0, ConfigError, "detection costs must be positive");
  }
};

struct Trial {
  int label = 0;  // 1 target, 0 nontarget
  std::string enroll;
  std::string test;
  double score = 0.0;
};

struct TrialSet {
  std::vector<Trial> trials;
  std::vector<double> scores() const;
  std::vector<int> labels() const;
};

// One achievable (FAR, FRR) operating point of the detector.
struct RocPoint {
  double far = 0.0;
  double frr = 0.0;
};

// All operating points swept over thresholds, FAR descending.
std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<int>& labels);

// EER at the crossing of the interpolated ROC convex hull with FAR == FRR.
double compute_eer(const std::vector<double>& scores, const std::vector<int>& labels,
                   double* threshold_at_eer = nullptr);

// min over thresholds of (c_miss p_t P_miss + c_fa (1-p_t) P_fa), normalized
// by min(c_miss p_t, c_fa (1-p_t)).
double compute_min_dcf(const std::vector<double>& scores, const std::vector<int>& labels,
                       const DcfConfig& cfg = {});

// Dot product of unit-norm embeddings.
double cosine_score(std::span<const float> a, std::span<const float> b);
double cosine_score(std::span<const double> a, std::span<const double> b);

// Text format: `label enroll_path test_path` (+ appended score when scored).
TrialSet read_trial_list(const std::string& path);
void write_scored_trials(const std::string& path, const TrialSet& set);

}  // namespace eval
}  // namespace masv
