#pragma once

#include <string>
#include <vector>

#include "masv/tensor.hpp"

namespace masv {
namespace audio {

struct AudioBuffer {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 16000;
  double seconds() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

struct FeatureParams {
  int sample_rate = 16000;
  double frame_ms = 25.0;
  double shift_ms = 10.0;
  int n_fft = 512;
  int n_mels = 80;
  double preemphasis = 0.97;
  double log_floor = 1e-6;

  int frame_samples() const { return static_cast<int>(sample_rate * frame_ms / 1000.0); }
  int shift_samples() const { return static_cast<int>(sample_rate * shift_ms / 1000.0); }
  std::string cache_key() const;
};

struct FeatureSeq {
  std::vector<float> frames;  // [T, n_mels] row-major
  int64_t num_frames = 0;
  int64_t num_mels = 0;
  double frame_ms = 25.0;
  double shift_ms = 10.0;

  // model layout [1, n_mels, T]
  template <typename T>
  Tensor<T> to_tensor() const {
    std::vector<T> v(static_cast<size_t>(num_frames * num_mels));
    for (int64_t t = 0; t < num_frames; ++t)
      for (int64_t m = 0; m < num_mels; ++m)
        v[static_cast<size_t>(m * num_frames + t)] =
            static_cast<T>(frames[static_cast<size_t>(t * num_mels + m)]);
    return Tensor<T>::from_data({1, num_mels, num_frames}, std::move(v));
  }
};

// RIFF/WAVE, PCM16 or IEEE float32, mono or stereo (averaged). Input rates
// 8/16/44.1/48 kHz accepted; anything not 16 kHz is resampled to 16 kHz.
AudioBuffer read_wav(const std::string& path);
void write_wav(const std::string& path, const AudioBuffer& a);  // PCM16 mono

// Windowed-sinc polyphase resampler.
AudioBuffer resample(const AudioBuffer& a, int target_rate);

// Triangular Mel filterbank geometry, exposed for tests.
struct MelFilterbank {
  std::vector<std::vector<double>> weights;  // [n_mels][n_fft/2+1]
  std::vector<double> center_hz;             // [n_mels]
};
MelFilterbank make_mel_filterbank(int n_mels, int n_fft, int sample_rate);

// In-place complex radix-2 FFT; size must be a power of two.
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

// Pre-emphasis -> Hamming window -> |FFT|^2 -> Mel -> log(x + floor).
FeatureSeq logmel(const AudioBuffer& a, const FeatureParams& p = {});

// Cepstral mean normalization over the full sequence (no VAD, no variance norm).
FeatureSeq cmn(const FeatureSeq& f);

// Binary cache: 16-byte header (magic, T, dims), then [T,dims] float32 LE.
void write_feature_cache(const std::string& path, const FeatureSeq& f);
FeatureSeq read_feature_cache(const std::string& path);

}  // namespace audio
}  // namespace masv
