#pragma once

#include <functional>
#include <string>
#include <vector>

#include "masv/blocks.hpp"
#include "masv/loss.hpp"
#include "masv/optim.hpp"
#include "masv/synth.hpp"

namespace masv {
namespace train {

// Extracted, CMN-normalized features with speaker labels.
struct FeatureDataset {
  std::vector<audio::FeatureSeq> feats;
  std::vector<int> labels;
  std::vector<std::string> ids;  // relative wav paths where known
  int num_speakers = 0;
};

FeatureDataset features_from_synth(const data::SynthDataset& ds);
// Scans dir for spk*/ subdirectories of wav files; label = directory index.
FeatureDataset features_from_dir(const std::string& dir);

struct TrainConfig {
  ScheduleConfig schedule;
  CircleLossConfig loss;
  int64_t steps = 2000;
  int64_t speakers_per_batch = 4;
  int64_t utts_per_speaker = 4;
  int64_t crop_frames = 120;
  int64_t log_every = 10;
  int64_t checkpoint_every = 1000;
  uint64_t seed = 1;
  void validate() const {
    MASV_CHECK(steps >= 1, ConfigError, "train steps must be >= 1");
    MASV_CHECK(speakers_per_batch >= 2, ConfigError, "need >= 2 speakers per batch");
    MASV_CHECK(utts_per_speaker >= 2, ConfigError, "need >= 2 utterances per speaker per batch");
    MASV_CHECK(crop_frames >= 2, ConfigError, "crop_frames must be >= 2");
    schedule.validate();
    loss.validate();
  }
};

struct StepStats {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

// Deterministic batch of [P*K, feat, crop] crops with speaker labels; the
// batch at a given (seed, step) never depends on optimizer state, so resumed
// runs see identical data.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> sample_batch(const FeatureDataset& ds,
                                                    const TrainConfig& cfg, int64_t step);

// Runs [start_step, cfg.steps); on_step fires every step, on_checkpoint per
// cfg.checkpoint_every and at the end. Non-finite loss raises NumericError
// with a diagnostic of step, lr and gradient norm.
template <typename T>
void train_loop(model::MasvModel<T>& m, Adam<T>& opt, const FeatureDataset& ds,
                const TrainConfig& cfg, int64_t start_step,
                const std::function<void(const StepStats&)>& on_step,
                const std::function<void(int64_t)>& on_checkpoint = nullptr);

// Embedding of one utterance (full length, eval mode, no grad).
template <typename T>
std::vector<T> extract_embedding(model::MasvModel<T>& m, const audio::FeatureSeq& feats);

extern template std::pair<Tensor<float>, std::vector<int>> sample_batch(
    const FeatureDataset&, const TrainConfig&, int64_t);
extern template std::pair<Tensor<double>, std::vector<int>> sample_batch(
    const FeatureDataset&, const TrainConfig&, int64_t);
extern template void train_loop(model::MasvModel<float>&, Adam<float>&, const FeatureDataset&,
                                const TrainConfig&, int64_t,
                                const std::function<void(const StepStats&)>&,
                                const std::function<void(int64_t)>&);
extern template void train_loop(model::MasvModel<double>&, Adam<double>&,
                                const FeatureDataset&, const TrainConfig&, int64_t,
                                const std::function<void(const StepStats&)>&,
                                const std::function<void(int64_t)>&);
extern template std::vector<float> extract_embedding(model::MasvModel<float>&,
                                                     const audio::FeatureSeq&);
extern template std::vector<double> extract_embedding(model::MasvModel<double>&,
                                                      const audio::FeatureSeq&);

}  // namespace train
}  // namespace masv
