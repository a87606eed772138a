#include "masv/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace masv {
namespace train {

namespace o = masv::ops;
namespace fs = std::filesystem;

FeatureDataset features_from_synth(const data::SynthDataset& ds) {
  FeatureDataset out;
  out.num_speakers = ds.num_speakers;
  out.feats.reserve(ds.utterances.size());
  for (const auto& u : ds.utterances) {
    out.feats.push_back(audio::cmn(audio::logmel(u.audio)));
    out.labels.push_back(u.speaker);
    out.ids.push_back(u.id());
  }
  return out;
}

FeatureDataset features_from_dir(const std::string& dir) {
  MASV_CHECK(fs::is_directory(dir), IoError, "data directory does not exist: ", dir);
  std::vector<std::string> spk_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) spk_dirs.push_back(e.path().filename().string());
  std::sort(spk_dirs.begin(), spk_dirs.end());
  MASV_CHECK(spk_dirs.size() >= 2, ContractError, "data dir ", dir,
             " must hold >= 2 speaker subdirectories, found ", spk_dirs.size());
  FeatureDataset out;
  out.num_speakers = static_cast<int>(spk_dirs.size());
  for (size_t s = 0; s < spk_dirs.size(); ++s) {
    std::vector<std::string> wavs;
    for (const auto& e : fs::directory_iterator(fs::path(dir) / spk_dirs[s]))
      if (e.is_regular_file() && e.path().extension() == ".wav")
        wavs.push_back(e.path().filename().string());
    std::sort(wavs.begin(), wavs.end());
    for (const auto& w : wavs) {
      const std::string rel = spk_dirs[s] + "/" + w;
      out.feats.push_back(audio::cmn(audio::logmel(audio::read_wav((fs::path(dir) / rel).string()))));
      out.labels.push_back(static_cast<int>(s));
      out.ids.push_back(rel);
    }
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, std::vector<int>> sample_batch(const FeatureDataset& ds,
                                                    const TrainConfig& cfg, int64_t step) {
  MASV_CHECK(ds.num_speakers >= cfg.speakers_per_batch, ContractError, "dataset has ",
             ds.num_speakers, " speakers, batch wants ", cfg.speakers_per_batch);
  Rng rng(hash_combine(hash_combine(cfg.seed, fnv1a("batch")), static_cast<uint64_t>(step)));

  // utterance indices grouped by speaker
  std::vector<std::vector<int64_t>> by_spk(static_cast<size_t>(ds.num_speakers));
  for (size_t i = 0; i < ds.labels.size(); ++i)
    by_spk[static_cast<size_t>(ds.labels[i])].push_back(static_cast<int64_t>(i));

  std::vector<int> spk(static_cast<size_t>(ds.num_speakers));
  for (size_t i = 0; i < spk.size(); ++i) spk[i] = static_cast<int>(i);
  for (int64_t i = 0; i < cfg.speakers_per_batch; ++i) {
    const int64_t j =
        i + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(spk.size() - i)));
    std::swap(spk[static_cast<size_t>(i)], spk[static_cast<size_t>(j)]);
  }

  const int64_t bsz = cfg.speakers_per_batch * cfg.utts_per_speaker;
  const int64_t f_dim = ds.feats.front().num_mels;
  std::vector<T> buf(static_cast<size_t>(bsz * f_dim * cfg.crop_frames));
  std::vector<int> labels(static_cast<size_t>(bsz));
  int64_t row = 0;
  for (int64_t si = 0; si < cfg.speakers_per_batch; ++si) {
    const auto& pool = by_spk[static_cast<size_t>(spk[static_cast<size_t>(si)])];
    MASV_CHECK(!pool.empty(), ContractError, "speaker ", spk[static_cast<size_t>(si)],
               " has no utterances");
    for (int64_t ui = 0; ui < cfg.utts_per_speaker; ++ui) {
      const int64_t utt = pool[rng.uniform_int(pool.size())];
      const auto& f = ds.feats[static_cast<size_t>(utt)];
      const int64_t t_len = f.num_frames;
      const int64_t start =
          t_len > cfg.crop_frames
              ? static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(t_len - cfg.crop_frames)))
              : 0;
      for (int64_t m = 0; m < f_dim; ++m)
        for (int64_t t = 0; t < cfg.crop_frames; ++t) {
          const int64_t src_t = (start + t) % t_len;  // wrap short utterances
          buf[static_cast<size_t>((row * f_dim + m) * cfg.crop_frames + t)] =
              static_cast<T>(f.frames[static_cast<size_t>(src_t * f.num_mels + m)]);
        }
      labels[static_cast<size_t>(row)] = spk[static_cast<size_t>(si)];
      ++row;
    }
  }
  return {Tensor<T>::from_data({bsz, f_dim, cfg.crop_frames}, std::move(buf)), labels};
}

template <typename T>
void train_loop(model::MasvModel<T>& m, Adam<T>& opt, const FeatureDataset& ds,
                const TrainConfig& cfg, int64_t start_step,
                const std::function<void(const StepStats&)>& on_step,
                const std::function<void(int64_t)>& on_checkpoint) {
  cfg.validate();
  MASV_CHECK(ds.num_speakers >= 2, ContractError, "training needs >= 2 speakers");
  for (int64_t step = start_step; step < cfg.steps; ++step) {
    auto [batch, labels] = sample_batch<T>(ds, cfg, step);
    m.zero_grad();
    Tensor<T> embeddings = m.forward(batch, /*training=*/true);
    Tensor<T> loss = circle_loss(embeddings, labels, cfg.loss);
    const double loss_v = static_cast<double>(loss.item());
    const double lr = cyclical_lr(step, cfg.schedule);
    if (!std::isfinite(loss_v)) {
      double gn = 0.0;
      m.visit_params("", [&](const std::string&, Tensor<T>& p) {
        for (T g : p.grad()) gn += static_cast<double>(g) * g;
      });
      raise<NumericError>("training diverged: non-finite loss at step ", step, " (lr=", lr,
                          ", grad_norm=", std::sqrt(gn), ")");
    }
    backward(loss);
    double gn = 0.0;
    m.visit_params("", [&](const std::string&, Tensor<T>& p) {
      for (T g : p.grad()) gn += static_cast<double>(g) * g;
    });
    opt.step(lr, cfg.schedule.weight_decay);
    if (on_step) on_step({step, lr, loss_v, std::sqrt(gn)});
    if (on_checkpoint &&
        ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps))
      on_checkpoint(step + 1);
  }
}

template <typename T>
std::vector<T> extract_embedding(model::MasvModel<T>& m, const audio::FeatureSeq& feats) {
  NoGradGuard ng;
  Tensor<T> x = feats.to_tensor<T>();
  Tensor<T> e = m.forward(x, /*training=*/false);
  return std::vector<T>(e.data().begin(), e.data().end());
}

template std::pair<Tensor<float>, std::vector<int>> sample_batch(const FeatureDataset&,
                                                                 const TrainConfig&, int64_t);
template std::pair<Tensor<double>, std::vector<int>> sample_batch(const FeatureDataset&,
                                                                  const TrainConfig&, int64_t);
template void train_loop(model::MasvModel<float>&, Adam<float>&, const FeatureDataset&,
                         const TrainConfig&, int64_t,
                         const std::function<void(const StepStats&)>&,
                         const std::function<void(int64_t)>&);
template void train_loop(model::MasvModel<double>&, Adam<double>&, const FeatureDataset&,
                         const TrainConfig&, int64_t,
                         const std::function<void(const StepStats&)>&,
                         const std::function<void(int64_t)>&);
template std::vector<float> extract_embedding(model::MasvModel<float>&,
                                              const audio::FeatureSeq&);
template std::vector<double> extract_embedding(model::MasvModel<double>&,
                                               const audio::FeatureSeq&);

}  // namespace train
}  // namespace masv
