#pragma once

#include <string>
#include <vector>

#include "masv/features.hpp"
#include "masv/metrics.hpp"

namespace masv {
namespace data {

struct SynthUtterance {
  int speaker = 0;
  int index = 0;
  audio::AudioBuffer audio;
  std::string id() const;  // spkNNN/uttNNN.wav
};

struct SynthDataset {
  std::vector<SynthUtterance> utterances;
  int num_speakers = 0;
  int utts_per_speaker = 0;
};

// Formant-filtered pulse-train voices: each speaker is a fixed profile of
// pitch plus 3-4 resonances; utterances jitter pitch, add aspiration noise
// and wander through a few vowel-like segments. Deterministic in the seed.
SynthDataset synth_speakers(int num_speakers, int utts_per_speaker, uint64_t seed);
audio::AudioBuffer synth_utterance(int num_speakers, int speaker, int utt, uint64_t seed);

void write_dataset(const SynthDataset& ds, const std::string& dir);

// Trials over the held-out tail [train_utts, utts_per_speaker) of each
// speaker: every same-speaker pair as targets plus a deterministic sample of
// cross-speaker pairs.
eval::TrialSet build_trials(const SynthDataset& ds, int train_utts, int nontarget_per_target,
                            uint64_t seed);

}  // namespace data
}  // namespace masv
