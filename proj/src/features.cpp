#include "masv/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "masv/error.hpp"

namespace masv {
namespace audio {

namespace {

constexpr double kPi = 3.14159265358979323846;

uint32_t rd_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t rd_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

std::string FeatureParams::cache_key() const {
  return "sr" + std::to_string(sample_rate) + "_f" + std::to_string(frame_ms) + "_s" +
         std::to_string(shift_ms) + "_n" + std::to_string(n_fft) + "_m" +
         std::to_string(n_mels) + "_p" + std::to_string(preemphasis) + "_l" +
         std::to_string(log_floor);
}

AudioBuffer read_wav(const std::string& path) {
  std::ifstream fs(path, std::ios::binary);
  MASV_CHECK(fs.good(), IoError, "cannot open wav file: ", path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(fs)),
                                   std::istreambuf_iterator<char>());
  MASV_CHECK(bytes.size() >= 44, ParseError, path, ": file too small for a RIFF header (",
             bytes.size(), " bytes)");
  MASV_CHECK(std::memcmp(bytes.data(), "RIFF", 4) == 0, ParseError, path,
             ": missing RIFF magic at byte 0");
  MASV_CHECK(std::memcmp(bytes.data() + 8, "WAVE", 4) == 0, ParseError, path,
             ": missing WAVE tag at byte 8");

  size_t pos = 12;
  int format = 0, channels = 0, rate = 0, bits = 0;
  bool have_fmt = false;
  const unsigned char* data_ptr = nullptr;
  size_t data_len = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const uint32_t chunk_len = rd_u32(hdr + 4);
    const size_t body = pos + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      MASV_CHECK(body + 16 <= bytes.size(), ParseError, path, ": truncated fmt chunk at byte ",
                 pos);
      format = rd_u16(bytes.data() + body);
      channels = rd_u16(bytes.data() + body + 2);
      rate = static_cast<int>(rd_u32(bytes.data() + body + 4));
      bits = rd_u16(bytes.data() + body + 14);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      MASV_CHECK(body + chunk_len <= bytes.size(), ParseError, path,
                 ": data chunk at byte ", pos, " overruns file");
      data_ptr = bytes.data() + body;
      data_len = chunk_len;
    }
    pos = body + chunk_len + (chunk_len & 1);
  }
  MASV_CHECK(have_fmt, ParseError, path, ": no fmt chunk found");
  MASV_CHECK(data_ptr != nullptr, ParseError, path, ": no data chunk found");
  MASV_CHECK(format == 1 || format == 3, ParseError, path, ": unsupported codec tag ", format,
             " (PCM=1 or IEEE float=3 required)");
  MASV_CHECK(channels == 1 || channels == 2, ParseError, path, ": unsupported channel count ",
             channels);
  MASV_CHECK(rate == 8000 || rate == 16000 || rate == 44100 || rate == 48000, ParseError, path,
             ": unsupported sample rate ", rate);
  MASV_CHECK((format == 1 && bits == 16) || (format == 3 && bits == 32), ParseError, path,
             ": unsupported sample width ", bits, " for codec ", format);

  const size_t bytes_per = static_cast<size_t>(bits / 8) * channels;
  const size_t n = data_len / bytes_per;
  AudioBuffer out;
  out.sample_rate = rate;
  out.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* sp = data_ptr + i * bytes_per + static_cast<size_t>(c) * (bits / 8);
      if (format == 1) {
        const int16_t v = static_cast<int16_t>(sp[0] | (sp[1] << 8));
        acc += static_cast<double>(v) / 32768.0;
      } else {
        float f;
        std::memcpy(&f, sp, 4);
        acc += static_cast<double>(f);
      }
    }
    out.samples[i] = acc / channels;
  }
  if (rate != 16000) out = resample(out, 16000);
  return out;
}

void write_wav(const std::string& path, const AudioBuffer& a) {
  std::ofstream fs(path, std::ios::binary);
  MASV_CHECK(fs.good(), IoError, "cannot write wav file: ", path);
  const uint32_t n = static_cast<uint32_t>(a.samples.size());
  const uint32_t data_len = n * 2;
  const uint32_t riff_len = 36 + data_len;
  auto w_u32 = [&](uint32_t v) { fs.write(reinterpret_cast<const char*>(&v), 4); };
  auto w_u16 = [&](uint16_t v) { fs.write(reinterpret_cast<const char*>(&v), 2); };
  fs.write("RIFF", 4);
  w_u32(riff_len);
  fs.write("WAVE", 4);
  fs.write("fmt ", 4);
  w_u32(16);
  w_u16(1);  // PCM
  w_u16(1);  // mono
  w_u32(static_cast<uint32_t>(a.sample_rate));
  w_u32(static_cast<uint32_t>(a.sample_rate * 2));
  w_u16(2);
  w_u16(16);
  fs.write("data", 4);
  w_u32(data_len);
  for (double v : a.samples) {
    const long q = std::clamp(std::lround(std::clamp(v, -1.0, 1.0) * 32768.0), -32768l, 32767l);
    const int16_t q16 = static_cast<int16_t>(q);
    fs.write(reinterpret_cast<const char*>(&q16), 2);
  }
  MASV_CHECK(fs.good(), IoError, "short write to ", path);
}

AudioBuffer resample(const AudioBuffer& a, int target_rate) {
  if (a.sample_rate == target_rate) return a;
  MASV_CHECK(target_rate > 0, ContractError, "resample target must be positive");
  const double ratio = static_cast<double>(a.sample_rate) / target_rate;
  const int64_t n_out =
      static_cast<int64_t>(static_cast<double>(a.samples.size()) / ratio);
  const int half_width = 16;
  // low-pass at the narrower Nyquist, in cycles per input sample
  const double fc = 0.5 * std::min(1.0, 1.0 / ratio);
  AudioBuffer out;
  out.sample_rate = target_rate;
  out.samples.resize(static_cast<size_t>(n_out));
  const int64_t n_in = static_cast<int64_t>(a.samples.size());
  for (int64_t j = 0; j < n_out; ++j) {
    const double p = j * ratio;
    const int64_t i0 = static_cast<int64_t>(std::ceil(p - half_width));
    const int64_t i1 = static_cast<int64_t>(std::floor(p + half_width));
    double acc = 0.0, wsum = 0.0;
    for (int64_t i = i0; i <= i1; ++i) {
      const double d = p - i;
      const double win = 0.5 * (1.0 + std::cos(kPi * d / half_width));
      const double arg = 2.0 * fc * d;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(kPi * arg) / (kPi * arg);
      const double w = 2.0 * fc * sinc * win;
      wsum += w;
      if (i >= 0 && i < n_in) acc += w * a.samples[static_cast<size_t>(i)];
    }
    out.samples[static_cast<size_t>(j)] = wsum != 0.0 ? acc / wsum : 0.0;
  }
  return out;
}

MelFilterbank make_mel_filterbank(int n_mels, int n_fft, int sample_rate) {
  const int n_bins = n_fft / 2 + 1;
  const double nyquist = sample_rate / 2.0;
  const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(nyquist);
  std::vector<double> edges(static_cast<size_t>(n_mels + 2));
  for (int i = 0; i < n_mels + 2; ++i)
    edges[static_cast<size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
  MelFilterbank fb;
  fb.weights.assign(static_cast<size_t>(n_mels), std::vector<double>(static_cast<size_t>(n_bins), 0.0));
  fb.center_hz.resize(static_cast<size_t>(n_mels));
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[static_cast<size_t>(m)], cc = edges[static_cast<size_t>(m + 1)],
                 hi = edges[static_cast<size_t>(m + 2)];
    fb.center_hz[static_cast<size_t>(m)] = cc;
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      double w = 0.0;
      if (f >= lo && f <= cc && cc > lo)
        w = (f - lo) / (cc - lo);
      else if (f > cc && f <= hi && hi > cc)
        w = (hi - f) / (hi - cc);
      fb.weights[static_cast<size_t>(m)][static_cast<size_t>(k)] = w;
    }
  }
  return fb;
}

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  const size_t n = re.size();
  MASV_CHECK(n == im.size() && n > 0 && (n & (n - 1)) == 0, ContractError,
             "fft size must be a power of two, got ", n);
  // bit reversal
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        const size_t a = i + k, b = i + k + len / 2;
        const double tr = re[b] * cr - im[b] * ci;
        const double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

FeatureSeq logmel(const AudioBuffer& a, const FeatureParams& p) {
  MASV_CHECK(a.sample_rate == p.sample_rate, ContractError, "logmel expects ", p.sample_rate,
             " Hz audio, got ", a.sample_rate, " (resample first)");
  const int frame = p.frame_samples();
  const int shift = p.shift_samples();
  const int64_t len = static_cast<int64_t>(a.samples.size());
  MASV_CHECK(len >= frame, ContractError, "audio too short for one frame: ", len,
             " samples < ", frame);
  MASV_CHECK(p.n_fft >= frame, ConfigError, "n_fft ", p.n_fft, " smaller than frame ", frame);
  const int64_t n_frames = 1 + (len - frame) / shift;

  // global pre-emphasis
  std::vector<double> x(a.samples.size());
  x[0] = a.samples[0] * (1.0 - p.preemphasis);
  for (size_t i = 1; i < x.size(); ++i)
    x[i] = a.samples[i] - p.preemphasis * a.samples[i - 1];

  std::vector<double> window(static_cast<size_t>(frame));
  for (int i = 0; i < frame; ++i)
    window[static_cast<size_t>(i)] = 0.54 - 0.46 * std::cos(2.0 * kPi * i / (frame - 1));

  const MelFilterbank fb = make_mel_filterbank(p.n_mels, p.n_fft, p.sample_rate);
  const int n_bins = p.n_fft / 2 + 1;

  FeatureSeq out;
  out.num_frames = n_frames;
  out.num_mels = p.n_mels;
  out.frame_ms = p.frame_ms;
  out.shift_ms = p.shift_ms;
  out.frames.resize(static_cast<size_t>(n_frames * p.n_mels));

  std::vector<double> re(static_cast<size_t>(p.n_fft)), im(static_cast<size_t>(p.n_fft));
  std::vector<double> power(static_cast<size_t>(n_bins));
  for (int64_t t = 0; t < n_frames; ++t) {
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    const double* src = x.data() + t * shift;
    for (int i = 0; i < frame; ++i) re[static_cast<size_t>(i)] = src[i] * window[static_cast<size_t>(i)];
    fft_radix2(re, im);
    for (int k = 0; k < n_bins; ++k)
      power[static_cast<size_t>(k)] = re[static_cast<size_t>(k)] * re[static_cast<size_t>(k)] +
                                      im[static_cast<size_t>(k)] * im[static_cast<size_t>(k)];
    for (int m = 0; m < p.n_mels; ++m) {
      const auto& w = fb.weights[static_cast<size_t>(m)];
      double acc = 0.0;
      for (int k = 0; k < n_bins; ++k) acc += w[static_cast<size_t>(k)] * power[static_cast<size_t>(k)];
      out.frames[static_cast<size_t>(t * p.n_mels + m)] =
          static_cast<float>(std::log(acc + p.log_floor));
    }
  }
  return out;
}

FeatureSeq cmn(const FeatureSeq& f) {
  MASV_CHECK(f.num_frames >= 1, ContractError, "cmn needs at least one frame");
  FeatureSeq out = f;
  for (int64_t m = 0; m < f.num_mels; ++m) {
    double mean = 0.0;
    for (int64_t t = 0; t < f.num_frames; ++t)
      mean += f.frames[static_cast<size_t>(t * f.num_mels + m)];
    mean /= static_cast<double>(f.num_frames);
    for (int64_t t = 0; t < f.num_frames; ++t)
      out.frames[static_cast<size_t>(t * f.num_mels + m)] =
          static_cast<float>(f.frames[static_cast<size_t>(t * f.num_mels + m)] - mean);
  }
  return out;
}

void write_feature_cache(const std::string& path, const FeatureSeq& f) {
  std::ofstream fs(path, std::ios::binary);
  MASV_CHECK(fs.good(), IoError, "cannot write feature cache: ", path);
  fs.write("MASVFEA1", 8);
  const uint32_t t = static_cast<uint32_t>(f.num_frames);
  const uint32_t d = static_cast<uint32_t>(f.num_mels);
  fs.write(reinterpret_cast<const char*>(&t), 4);
  fs.write(reinterpret_cast<const char*>(&d), 4);
  fs.write(reinterpret_cast<const char*>(f.frames.data()),
           static_cast<std::streamsize>(f.frames.size() * sizeof(float)));
  MASV_CHECK(fs.good(), IoError, "short write to ", path);
}

FeatureSeq read_feature_cache(const std::string& path) {
  std::ifstream fs(path, std::ios::binary);
  MASV_CHECK(fs.good(), IoError, "cannot open feature cache: ", path);
  char magic[8];
  fs.read(magic, 8);
  MASV_CHECK(fs.good() && std::memcmp(magic, "MASVFEA1", 8) == 0, ParseError, path,
             ": bad feature cache magic at byte 0");
  uint32_t t = 0, d = 0;
  fs.read(reinterpret_cast<char*>(&t), 4);
  fs.read(reinterpret_cast<char*>(&d), 4);
  MASV_CHECK(fs.good(), ParseError, path, ": truncated cache header at byte 8");
  FeatureSeq f;
  f.num_frames = t;
  f.num_mels = d;
  f.frames.resize(static_cast<size_t>(t) * d);
  fs.read(reinterpret_cast<char*>(f.frames.data()),
          static_cast<std::streamsize>(f.frames.size() * sizeof(float)));
  MASV_CHECK(fs.good(), ParseError, path, ": truncated cache payload at byte 16");
  return f;
}

}  // namespace audio
}  // namespace masv
