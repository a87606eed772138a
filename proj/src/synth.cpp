#include "masv/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace masv {
namespace data {

namespace {

constexpr int kRate = 16000;
constexpr double kPi = 3.14159265358979323846;

struct SpeakerProfile {
  double f0 = 120.0;
  int n_formants = 4;
  double formant_hz[4] = {0, 0, 0, 0};
  double bandwidth_hz[4] = {0, 0, 0, 0};
};

// Scrambled-lattice sampling keeps every pair of speakers separated in each
// formant dimension instead of trusting uniform draws.
std::vector<int> permutation(int n, Rng& rng) {
  std::vector<int> p(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i)
    std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(rng.uniform_int(static_cast<uint64_t>(i + 1)))]);
  return p;
}

SpeakerProfile speaker_profile(int num_speakers, int speaker, uint64_t seed) {
  static constexpr double lo[4] = {280.0, 950.0, 2300.0, 3300.0};
  static constexpr double hi[4] = {860.0, 2450.0, 3400.0, 4300.0};
  Rng lattice_rng(hash_combine(seed, fnv1a("synth-lattice")));
  std::vector<int> perm[4];
  for (auto& p : perm) p = permutation(num_speakers, lattice_rng);
  std::vector<int> pitch_perm = permutation(num_speakers, lattice_rng);

  Rng rng(hash_combine(hash_combine(seed, fnv1a("synth-speaker")), static_cast<uint64_t>(speaker)));
  SpeakerProfile sp;
  const double cell_f0 = (pitch_perm[static_cast<size_t>(speaker)] + 0.2 + 0.6 * rng.uniform()) /
                         num_speakers;
  sp.f0 = 85.0 * std::pow(240.0 / 85.0, cell_f0);
  sp.n_formants = 3 + static_cast<int>(rng.uniform_int(2));
  for (int f = 0; f < 4; ++f) {
    const double cell =
        (perm[f][static_cast<size_t>(speaker)] + 0.2 + 0.6 * rng.uniform()) / num_speakers;
    sp.formant_hz[f] = lo[f] + (hi[f] - lo[f]) * cell;
    sp.bandwidth_hz[f] = rng.uniform(60.0, 130.0);
  }
  return sp;
}

struct Biquad {
  double b0 = 1, a1 = 0, a2 = 0;
  double z1 = 0, z2 = 0;
  void set_resonator(double freq, double bw) {
    const double r = std::exp(-kPi * bw / kRate);
    const double theta = 2.0 * kPi * freq / kRate;
    a1 = -2.0 * r * std::cos(theta);
    a2 = r * r;
    b0 = 1.0 - r;
  }
  double process(double x) {
    const double y = b0 * x - a1 * z1 - a2 * z2;
    z2 = z1;
    z1 = y;
    return y;
  }
};

}  // namespace

std::string SynthUtterance::id() const {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "spk%03d/utt%03d.wav", speaker, index);
  return buf;
}

audio::AudioBuffer synth_utterance(int num_speakers, int speaker, int utt, uint64_t seed) {
  const SpeakerProfile sp = speaker_profile(num_speakers, speaker, seed);
  Rng rng(hash_combine(hash_combine(hash_combine(seed, fnv1a("synth-utt")),
                                    static_cast<uint64_t>(speaker)),
                       static_cast<uint64_t>(utt)));
  const double seconds = rng.uniform(2.0, 4.0);
  const int64_t n = static_cast<int64_t>(seconds * kRate);

  // vowel-like segments perturb the formants; the speaker profile dominates
  const int n_segments = 3 + static_cast<int>(rng.uniform_int(4));
  std::vector<int64_t> seg_end(static_cast<size_t>(n_segments));
  std::vector<double> seg_mult(static_cast<size_t>(n_segments * 4));
  for (int si = 0; si < n_segments; ++si) {
    seg_end[static_cast<size_t>(si)] = n * (si + 1) / n_segments;
    for (int f = 0; f < 4; ++f)
      seg_mult[static_cast<size_t>(si * 4 + f)] = rng.uniform(0.93, 1.07);
  }
  const double utt_pitch_mult = rng.uniform(0.95, 1.05);

  // glottal pulse train with per-pulse jitter plus aspiration noise
  std::vector<double> src(static_cast<size_t>(n), 0.0);
  double pulse_pos = rng.uniform(0.0, kRate / sp.f0);
  double walk = 0.0;
  while (pulse_pos < static_cast<double>(n)) {
    const int64_t at = static_cast<int64_t>(pulse_pos);
    src[static_cast<size_t>(at)] += 1.0 + 0.15 * rng.normal();
    walk = 0.97 * walk + 0.03 * rng.normal();
    const double f0 = sp.f0 * utt_pitch_mult * (1.0 + 0.05 * walk) *
                      (1.0 + 0.01 * rng.normal());
    pulse_pos += kRate / std::max(40.0, f0);
  }
  for (auto& v : src) v += 0.015 * rng.normal();

  std::vector<double> out(static_cast<size_t>(n));
  std::vector<Biquad> filt(static_cast<size_t>(sp.n_formants));
  int seg = 0;
  int64_t seg_start = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (i == seg_start) {
      for (int f = 0; f < sp.n_formants; ++f)
        filt[static_cast<size_t>(f)].set_resonator(
            sp.formant_hz[f] * seg_mult[static_cast<size_t>(seg * 4 + f)], sp.bandwidth_hz[f]);
    }
    double v = src[static_cast<size_t>(i)];
    for (auto& bq : filt) v = bq.process(v);
    out[static_cast<size_t>(i)] = v;
    if (i + 1 == seg_end[static_cast<size_t>(seg)] && seg + 1 < n_segments) {
      ++seg;
      seg_start = i + 1;
    }
  }
  double peak = 1e-9;
  for (double v : out) peak = std::max(peak, std::abs(v));
  const double gain = 0.3 / peak;
  for (auto& v : out) v *= gain;

  audio::AudioBuffer buf;
  buf.sample_rate = kRate;
  buf.samples = std::move(out);
  return buf;
}

SynthDataset synth_speakers(int num_speakers, int utts_per_speaker, uint64_t seed) {
  MASV_CHECK(num_speakers >= 2, ContractError, "synthetic dataset needs >= 2 speakers");
  MASV_CHECK(utts_per_speaker >= 1, ContractError, "need >= 1 utterance per speaker");
  SynthDataset ds;
  ds.num_speakers = num_speakers;
  ds.utts_per_speaker = utts_per_speaker;
  ds.utterances.reserve(static_cast<size_t>(num_speakers * utts_per_speaker));
  for (int s = 0; s < num_speakers; ++s)
    for (int u = 0; u < utts_per_speaker; ++u) {
      SynthUtterance su;
      su.speaker = s;
      su.index = u;
      su.audio = synth_utterance(num_speakers, s, u, seed);
      ds.utterances.push_back(std::move(su));
    }
  return ds;
}

void write_dataset(const SynthDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  for (const auto& u : ds.utterances) {
    const fs::path p = fs::path(dir) / u.id();
    fs::create_directories(p.parent_path());
    audio::write_wav(p.string(), u.audio);
  }
}

eval::TrialSet build_trials(const SynthDataset& ds, int train_utts, int nontarget_per_target,
                            uint64_t seed) {
  MASV_CHECK(train_utts < ds.utts_per_speaker, ContractError,
             "no held-out utterances: train_utts ", train_utts, " of ", ds.utts_per_speaker);
  auto name = [](int s, int u) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "spk%03d/utt%03d.wav", s, u);
    return std::string(buf);
  };
  eval::TrialSet set;
  Rng rng(hash_combine(seed, fnv1a("synth-trials")));
  int64_t targets = 0;
  for (int s = 0; s < ds.num_speakers; ++s)
    for (int u1 = train_utts; u1 < ds.utts_per_speaker; ++u1)
      for (int u2 = u1 + 1; u2 < ds.utts_per_speaker; ++u2) {
        set.trials.push_back({1, name(s, u1), name(s, u2), 0.0});
        ++targets;
      }
  const int held = ds.utts_per_speaker - train_utts;
  for (int64_t i = 0; i < targets * nontarget_per_target; ++i) {
    const int s1 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(ds.num_speakers)));
    int s2 = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(ds.num_speakers - 1)));
    if (s2 >= s1) ++s2;
    const int u1 = train_utts + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(held)));
    const int u2 = train_utts + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(held)));
    set.trials.push_back({0, name(s1, u1), name(s2, u2), 0.0});
  }
  return set;
}

}  // namespace data
}  // namespace masv
