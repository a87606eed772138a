// masv: train/evaluate/stream the MASV speaker-verification toolkit.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "masv/checkpoint.hpp"
#include "masv/complexity.hpp"
#include "masv/features.hpp"
#include "masv/kvconfig.hpp"
#include "masv/metrics.hpp"
#include "masv/synth.hpp"
#include "masv/train.hpp"

namespace fs = std::filesystem;
using namespace masv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitReject = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct KvOverrides {
  std::map<std::string, std::string> kv;  // config file + CLI overrides, resolved
  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
  }
  int64_t get_i(const std::string& key, int64_t fallback) const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stoll(it->second);
  }
  double get_d(const std::string& key, double fallback) const {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stod(it->second);
  }
};

// precedence: CLI -D overrides > config file > defaults
KvOverrides resolve_config(const std::string& config_path,
                           const std::vector<std::string>& defines) {
  KvOverrides out;
  if (!config_path.empty()) out.kv = io::read_kv_file(config_path);
  for (const auto& d : defines) {
    const size_t eq = d.find('=');
    MASV_CHECK(eq != std::string::npos, ConfigError, "override must be key=value, got `", d, "`");
    out.kv[d.substr(0, eq)] = d.substr(eq + 1);
  }
  return out;
}

model::ModelConfig model_from_kv(const KvOverrides& o) {
  model::ModelConfig cfg;
  const std::string preset = o.get("model.preset", "tiny");
  const int64_t ch = o.get_i("model.channels", 0);
  if (preset == "tiny")
    cfg = model::ModelConfig::tiny();
  else if (preset == "tiny-nolcb")
    cfg = model::ModelConfig::tiny(false);
  else if (preset == "base")
    cfg = model::ModelConfig::base_model(ch > 0 ? ch : 512);
  else if (preset == "+lcb")
    cfg = model::ModelConfig::plus_lcb(ch > 0 ? ch : 512);
  else if (preset == "+tri")
    cfg = model::ModelConfig::plus_tri(ch > 0 ? ch : 512);
  else if (preset == "masv")
    cfg = model::ModelConfig::complete(ch > 0 ? ch : 512);
  else
    raise<ConfigError>("unknown model.preset `", preset, "`");
  auto kv = cfg.to_kv();
  for (const auto& [k, v] : o.kv)
    if (k.rfind("model.", 0) == 0 && k != "model.preset") kv[k.substr(6)] = v;
  return model::ModelConfig::from_kv(kv);
}

train::TrainConfig train_from_kv(const KvOverrides& o) {
  train::TrainConfig cfg;
  cfg.schedule.lr_min = o.get_d("schedule.lr_min", 1e-8);
  cfg.schedule.lr_max = o.get_d("schedule.lr_max", 1e-3);
  cfg.schedule.cycle_steps = o.get_i("schedule.cycle_steps", 2000);
  cfg.schedule.weight_decay = o.get_d("schedule.weight_decay", 5e-5);
  cfg.loss.m = o.get_d("loss.m", 0.35);
  cfg.loss.s = o.get_d("loss.s", 60.0);
  cfg.steps = o.get_i("train.steps", 2000);
  cfg.speakers_per_batch = o.get_i("train.speakers_per_batch", 4);
  cfg.utts_per_speaker = o.get_i("train.utts_per_speaker", 4);
  cfg.crop_frames = o.get_i("train.crop_frames", 120);
  cfg.log_every = o.get_i("train.log_every", 10);
  cfg.checkpoint_every = o.get_i("train.checkpoint_every", 1000);
  cfg.seed = static_cast<uint64_t>(o.get_i("seed", 1));
  cfg.schedule.batch_size = cfg.speakers_per_batch * cfg.utts_per_speaker;
  return cfg;
}

void dump_resolved(const std::string& path, const model::ModelConfig& mc,
                   const train::TrainConfig& tc, const std::string& precision) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : mc.to_kv()) kv["model." + k] = v;
  char buf[64];
  auto put_d = [&](const char* k, double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    kv[k] = buf;
  };
  put_d("schedule.lr_min", tc.schedule.lr_min);
  put_d("schedule.lr_max", tc.schedule.lr_max);
  kv["schedule.cycle_steps"] = std::to_string(tc.schedule.cycle_steps);
  put_d("schedule.weight_decay", tc.schedule.weight_decay);
  put_d("loss.m", tc.loss.m);
  put_d("loss.s", tc.loss.s);
  kv["train.steps"] = std::to_string(tc.steps);
  kv["train.speakers_per_batch"] = std::to_string(tc.speakers_per_batch);
  kv["train.utts_per_speaker"] = std::to_string(tc.utts_per_speaker);
  kv["train.crop_frames"] = std::to_string(tc.crop_frames);
  kv["train.checkpoint_every"] = std::to_string(tc.checkpoint_every);
  kv["seed"] = std::to_string(tc.seed);
  kv["precision"] = precision;
  io::write_kv_file(path, kv);
}

template <typename T>
int run_train(const model::ModelConfig& mc, const train::TrainConfig& tc,
              const std::string& precision, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume) {
  train::FeatureDataset ds = train::features_from_dir(data_dir);
  model::MasvModel<T> m(mc, tc.seed);
  std::vector<Tensor<T>> params;
  m.visit_params("", [&](const std::string&, Tensor<T>& p) { params.push_back(p); });
  train::Adam<T> opt(params);
  int64_t start_step = 0;
  if (!resume.empty()) {
    io::Checkpoint ck = io::read_checkpoint(resume);
    io::restore_model(ck, m, &opt);
    start_step = std::stoll(ck.config.at("train.step"));
  }

  fs::create_directories(out_dir);
  dump_resolved((fs::path(out_dir) / "resolved_config.txt").string(), mc, tc, precision);
  std::ofstream loss_csv(fs::path(out_dir) / "loss.csv",
                         start_step == 0 ? std::ios::trunc : std::ios::app);
  if (start_step == 0) loss_csv << "step,lr,loss,grad_norm\n";
  loss_csv.precision(17);

  auto save = [&](int64_t step, const std::string& name) {
    io::Checkpoint ck = io::snapshot_model(m, {{"train.step", std::to_string(step)}}, &opt);
    io::write_checkpoint((fs::path(out_dir) / name).string(), ck);
  };
  train::train_loop<T>(
      m, opt, ds, tc, start_step,
      [&](const train::StepStats& st) {
        loss_csv << st.step << "," << st.lr << "," << st.loss << "," << st.grad_norm << "\n";
        if (tc.log_every > 0 && st.step % tc.log_every == 0)
          std::fprintf(stderr, "step %6lld  lr %.3e  loss %.5f  gnorm %.3f\n",
                       static_cast<long long>(st.step), st.lr, st.loss, st.grad_norm);
      },
      [&](int64_t step) {
        char name[64];
        std::snprintf(name, sizeof(name), "checkpoint_step%06lld.masv",
                      static_cast<long long>(step));
        save(step, name);
      });
  save(tc.steps, "checkpoint.masv");
  loss_csv.flush();
  MASV_CHECK(loss_csv.good(), IoError, "failed writing loss.csv");
  return kExitOk;
}

audio::FeatureSeq load_features(const std::string& wav_path) {
  return audio::cmn(audio::logmel(audio::read_wav(wav_path)));
}

template <typename T>
std::vector<T> cached_embedding(model::MasvModel<T>& m, const std::string& wav_path,
                                const std::string& cache_dir, uint64_t ck_hash) {
  const audio::FeatureParams fp;
  const std::string key = std::to_string(ck_hash) + "|" + wav_path + "|" + fp.cache_key() +
                          "|" + (std::is_same_v<T, double> ? "f64" : "f32");
  const std::string cache_file =
      (fs::path(cache_dir) / (std::to_string(fnv1a(key)) + ".emb")).string();
  const int64_t edim = m.config().embedding_dim;
  if (fs::exists(cache_file)) {
    std::ifstream in(cache_file, std::ios::binary);
    char magic[8];
    in.read(magic, 8);
    std::vector<T> e(static_cast<size_t>(edim));
    in.read(reinterpret_cast<char*>(e.data()),
            static_cast<std::streamsize>(e.size() * sizeof(T)));
    if (in.good() && std::memcmp(magic, "MASVEMB1", 8) == 0) return e;
  }
  std::vector<T> e = train::extract_embedding(m, load_features(wav_path));
  fs::create_directories(cache_dir);
  std::ofstream out(cache_file, std::ios::binary);
  out.write("MASVEMB1", 8);
  out.write(reinterpret_cast<const char*>(e.data()),
            static_cast<std::streamsize>(e.size() * sizeof(T)));
  return e;
}

template <typename T>
int run_eval(const std::string& checkpoint, const std::string& trials_path,
             const std::string& audio_dir, const std::string& out_dir) {
  io::Checkpoint ck = io::read_checkpoint(checkpoint);
  model::ModelConfig mc = io::checkpoint_model_config(ck);
  model::MasvModel<T> m(mc, 0);
  io::restore_model<T>(ck, m);
  const uint64_t ck_hash = io::file_hash(checkpoint);

  eval::TrialSet set = eval::read_trial_list(trials_path);
  MASV_CHECK(!set.trials.empty(), ContractError, "trial list is empty: ", trials_path);

  // collect unique wav paths, verify existence
  std::map<std::string, std::vector<T>> embeddings;
  std::vector<std::string> missing;
  for (const auto& t : set.trials)
    for (const auto& p : {t.enroll, t.test})
      if (!embeddings.count(p)) {
        embeddings[p] = {};
        if (!fs::exists(fs::path(audio_dir) / p)) missing.push_back(p);
      }
  if (!missing.empty()) {
    std::string msg = "trial list references missing audio:";
    for (size_t i = 0; i < missing.size() && i < 10; ++i) msg += "\n  " + missing[i];
    raise<IoError>(msg);
  }
  fs::create_directories(out_dir);
  const std::string cache_dir = (fs::path(out_dir) / "cache").string();
  for (auto& [path, e] : embeddings)
    e = cached_embedding(m, (fs::path(audio_dir) / path).string(), cache_dir, ck_hash);

  for (auto& t : set.trials)
    t.score = eval::cosine_score(std::span<const T>(embeddings[t.enroll]),
                                 std::span<const T>(embeddings[t.test]));
  eval::write_scored_trials((fs::path(out_dir) / "scored_trials.txt").string(), set);

  double thr = 0.0;
  const double eer = eval::compute_eer(set.scores(), set.labels(), &thr);
  const double dcf = eval::compute_min_dcf(set.scores(), set.labels());
  int64_t n_t = 0, n_n = 0;
  for (const auto& t : set.trials) (t.label ? n_t : n_n) += 1;
  nlohmann::ordered_json j;
  j["eer"] = eer;
  j["min_dcf"] = dcf;
  j["n_target"] = n_t;
  j["n_nontarget"] = n_n;
  j["threshold_at_eer"] = thr;
  std::ofstream js(fs::path(out_dir) / "metrics.json");
  js << j.dump(2) << "\n";
  MASV_CHECK(js.good(), IoError, "failed writing metrics.json");
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

template <typename T>
int run_verify(const std::string& checkpoint, const std::string& wav_a,
               const std::string& wav_b, double threshold) {
  io::Checkpoint ck = io::read_checkpoint(checkpoint);
  model::ModelConfig mc = io::checkpoint_model_config(ck);
  model::MasvModel<T> m(mc, 0);
  io::restore_model<T>(ck, m);
  const std::vector<T> ea = train::extract_embedding(m, load_features(wav_a));
  const std::vector<T> eb = train::extract_embedding(m, load_features(wav_b));
  const double score =
      eval::cosine_score(std::span<const T>(ea), std::span<const T>(eb));
  const bool accept = score >= threshold;
  std::printf("score %.6f threshold %.6f -> %s\n", score, threshold,
              accept ? "accept" : "reject");
  return accept ? kExitOk : kExitReject;
}

template <typename T>
int run_stream(const std::string& checkpoint, const std::string& wav_path, int64_t buffer_ms,
               const std::string& enroll_path, const std::string& out_dir) {
  MASV_CHECK(buffer_ms >= 100, ConfigError, "buffer_ms must be >= 100, got ", buffer_ms);
  io::Checkpoint ck = io::read_checkpoint(checkpoint);
  model::ModelConfig mc = io::checkpoint_model_config(ck);
  model::MasvModel<T> m(mc, 0);
  io::restore_model<T>(ck, m);

  std::vector<T> enroll;
  if (!enroll_path.empty()) enroll = train::extract_embedding(m, load_features(enroll_path));

  audio::AudioBuffer a = audio::read_wav(wav_path);
  const audio::FeatureParams fp;
  const int64_t per_buf = a.sample_rate * buffer_ms / 1000;
  // a tail too short for two frames joins the previous buffer
  const int64_t min_tail = fp.frame_samples() + fp.shift_samples();
  std::vector<std::pair<int64_t, int64_t>> spans;
  int64_t pos = 0;
  const int64_t n = static_cast<int64_t>(a.samples.size());
  while (pos < n) {
    int64_t end = std::min(n, pos + per_buf);
    if (n - end > 0 && n - end < min_tail) end = n;
    spans.emplace_back(pos, end);
    pos = end;
  }
  MASV_CHECK(!spans.empty(), ContractError, "no audio in ", wav_path);

  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / "stream_trace.csv");
  csv.precision(17);
  csv << "buffer,end_ms,frames_seen,embedding_norm" << (enroll.empty() ? "" : ",score")
      << "\n";

  model::StreamState<T> state;
  for (size_t bi = 0; bi < spans.size(); ++bi) {
    audio::AudioBuffer seg;
    seg.sample_rate = a.sample_rate;
    seg.samples.assign(a.samples.begin() + spans[bi].first, a.samples.begin() + spans[bi].second);
    audio::FeatureSeq feats = audio::logmel(seg, fp);  // raw; stream applies causal CMN
    Tensor<T> e = m.streaming_update(state, feats.to_tensor<T>());
    double norm = 0.0;
    for (T v : e.data()) norm += static_cast<double>(v) * v;
    csv << bi << "," << spans[bi].second * 1000.0 / a.sample_rate << "," << state.frames_seen
        << "," << std::sqrt(norm);
    if (!enroll.empty()) {
      std::vector<T> ev(e.data().begin(), e.data().end());
      csv << "," << eval::cosine_score(std::span<const T>(ev), std::span<const T>(enroll));
    }
    csv << "\n";
  }
  MASV_CHECK(csv.good(), IoError, "failed writing stream_trace.csv");
  return kExitOk;
}

int run_bench(int64_t channels, int64_t frames, const std::string& out_path,
              bool include_reference, const std::string& breakdown_preset,
              const std::string& breakdown_out) {
  std::vector<model::ModelConfig> configs = {
      model::ModelConfig::base_model(channels), model::ModelConfig::plus_lcb(channels),
      model::ModelConfig::plus_tri(channels), model::ModelConfig::complete(channels)};
  const std::string csv = complexity::emit_comparison_csv(configs, frames, include_reference);
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    std::ofstream fs_out(out_path);
    fs_out << csv;
    MASV_CHECK(fs_out.good(), IoError, "failed writing ", out_path);
  }
  if (!breakdown_preset.empty()) {
    model::ModelConfig cfg = breakdown_preset == "base"
                                 ? model::ModelConfig::base_model(channels)
                                 : model::ModelConfig::complete(channels);
    const std::string j = complexity::breakdown_json(complexity::estimate_flops(cfg, frames));
    if (breakdown_out.empty()) {
      std::cout << j << "\n";
    } else {
      std::ofstream fs_out(breakdown_out);
      fs_out << j << "\n";
      MASV_CHECK(fs_out.good(), IoError, "failed writing ", breakdown_out);
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MASV: Mamba-based speaker verification toolkit"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, checkpoint, trials, audio_dir, wav_a, wav_b;
  std::string wav, enroll, resume, precision = "f32", breakdown, breakdown_out, bench_out;
  std::vector<std::string> defines;
  double threshold = 0.5;
  int64_t buffer_ms = 1000, speakers = 20, utts = 20, channels = 512;
  int64_t frames = complexity::kCalibrationFrames;
  uint64_t seed = 1;
  bool include_reference = false;

  auto* c_synth = app.add_subcommand("synth", "generate a synthetic speaker dataset");
  c_synth->add_option("--out", out_dir, "output directory")->required();
  c_synth->add_option("--speakers", speakers, "number of speakers");
  c_synth->add_option("--utts", utts, "utterances per speaker");
  c_synth->add_option("--seed", seed, "generator seed");

  auto* c_train = app.add_subcommand("train", "train a model");
  c_train->add_option("--config", config_path, "key=value config file");
  c_train->add_option("--data", data_dir, "dataset directory (spk*/..*.wav)")->required();
  c_train->add_option("--out", out_dir, "output directory")->required();
  c_train->add_option("--resume", resume, "checkpoint to resume from");
  c_train->add_option("--precision", precision, "f32 or f64");
  c_train->add_option("-D,--define", defines, "override config key=value");

  auto* c_eval = app.add_subcommand("eval", "score a trial list");
  c_eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  c_eval->add_option("--trials", trials, "trial list file")->required();
  c_eval->add_option("--audio", audio_dir, "audio root directory")->required();
  c_eval->add_option("--out", out_dir, "output directory")->required();
  c_eval->add_option("--precision", precision, "f32 or f64");

  auto* c_verify = app.add_subcommand("verify", "compare two recordings");
  c_verify->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  c_verify->add_option("--a", wav_a, "first wav")->required();
  c_verify->add_option("--b", wav_b, "second wav")->required();
  c_verify->add_option("--threshold", threshold, "accept threshold");
  c_verify->add_option("--precision", precision, "f32 or f64");

  auto* c_stream = app.add_subcommand("stream", "buffered streaming inference");
  c_stream->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  c_stream->add_option("--wav", wav, "input wav")->required();
  c_stream->add_option("--buffer-ms", buffer_ms, "buffer length in ms (>= 100)");
  c_stream->add_option("--enroll", enroll, "enrollment wav to score against");
  c_stream->add_option("--out", out_dir, "output directory")->required();
  c_stream->add_option("--precision", precision, "f32 or f64");

  auto* c_bench = app.add_subcommand("bench", "parameter/FLOPS comparison table");
  c_bench->add_option("--channels", channels, "model width");
  c_bench->add_option("--frames", frames, "frame count for FLOPS");
  c_bench->add_option("--out", bench_out, "CSV output path (default stdout)");
  c_bench->add_flag("--include-reference", include_reference, "append published anchors");
  c_bench->add_option("--breakdown", breakdown, "also emit JSON breakdown: base|masv");
  c_bench->add_option("--breakdown-out", breakdown_out, "breakdown output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    MASV_CHECK(precision == "f32" || precision == "f64", ConfigError,
               "precision must be f32 or f64, got ", precision);
    const bool f64 = precision == "f64";
    if (c_synth->parsed()) {
      data::SynthDataset ds = data::synth_speakers(static_cast<int>(speakers),
                                                   static_cast<int>(utts), seed);
      data::write_dataset(ds, out_dir);
      std::printf("wrote %zu utterances to %s\n", ds.utterances.size(), out_dir.c_str());
      return kExitOk;
    }
    if (c_train->parsed()) {
      KvOverrides o = resolve_config(config_path, defines);
      model::ModelConfig mc = model_from_kv(o);
      train::TrainConfig tc = train_from_kv(o);
      return f64 ? run_train<double>(mc, tc, precision, data_dir, out_dir, resume)
                 : run_train<float>(mc, tc, precision, data_dir, out_dir, resume);
    }
    if (c_eval->parsed())
      return f64 ? run_eval<double>(checkpoint, trials, audio_dir, out_dir)
                 : run_eval<float>(checkpoint, trials, audio_dir, out_dir);
    if (c_verify->parsed())
      return f64 ? run_verify<double>(checkpoint, wav_a, wav_b, threshold)
                 : run_verify<float>(checkpoint, wav_a, wav_b, threshold);
    if (c_stream->parsed())
      return f64 ? run_stream<double>(checkpoint, wav, buffer_ms, enroll, out_dir)
                 : run_stream<float>(checkpoint, wav, buffer_ms, enroll, out_dir);
    if (c_bench->parsed())
      return run_bench(channels, frames, bench_out, include_reference, breakdown,
                       breakdown_out);
    return kExitUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
}
