#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "segdiff/ablation.hpp"
#include "segdiff/checkpoint.hpp"
#include "segdiff/dataset.hpp"
#include "segdiff/optim.hpp"
#include "segdiff/sampler.hpp"
#include "segdiff/schedule.hpp"
#include "segdiff/unet.hpp"

namespace segdiff {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 16;
  double base_lr = 1e-4;
  int warmup_steps = 500;
  bool ablation_enabled = false;
  bool guidance_enabled = true;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch_size < 1 || base_lr <= 0 || warmup_steps < 0)
      throw ConfigError("train: non-positive epochs/batch/lr");
    if (!guidance_enabled && ablation_enabled)
      throw ConfigError("train: mask ablation requires guidance");
  }

  ModelKind kind() const {
    if (!guidance_enabled) return ModelKind::Unconditional;
    return ablation_enabled ? ModelKind::GuidedAblated : ModelKind::Guided;
  }
};

struct LossRow {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

inline TensorF image_tensor(const std::vector<float>& image, int size) {
  return TensorF::from({1, 1, size, size},
                       std::vector<float>(image.begin(), image.end()));
}

struct DiffusionTrainResult {
  UNetF model;
  std::int64_t steps = 0;
  std::vector<LossRow> loss_log;
  std::vector<double> epoch_mean_loss;
  std::vector<std::int64_t> pattern_histogram;  // empty unless ablation ran
  double mask_channel_absmax = 0.0;

  DiffusionTrainResult(UNetF m) : model(std::move(m)) {}
};

/// Noise-prediction training: per step sample a batch, optionally ablate each
/// mask independently, draw per-item t and eps, form x_t in closed form, and
/// minimize the prediction MSE under AdamW with warmup + cosine decay.
inline DiffusionTrainResult train_diffusion(
    const Dataset& data, const IndexRange& split, const TrainConfig& tc,
    const UNetConfig& uc, const NoiseSchedule& schedule,
    const std::function<void(const LossRow&)>& on_row = {}) {
  tc.validate();
  uc.validate();
  if (split.size() < 1) throw ConfigError("train: empty training split");
  if (uc.image_size != data.manifest.config.image_size)
    throw ConfigError("train: model image size " + std::to_string(uc.image_size) +
                      " vs dataset " + std::to_string(data.manifest.config.image_size));

  Rng init_rng = Rng::stream(tc.seed, 0);
  Rng train_rng = Rng::stream(tc.seed, 1);
  DiffusionTrainResult result{UNetF(uc, init_rng)};
  auto& model = result.model;
  AdamWState<float> opt;
  opt.weight_decay = float(tc.weight_decay);
  opt.init(model.parameters());

  const int n = split.size();
  const int batches_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const std::int64_t total_steps = std::int64_t(tc.epochs) * batches_per_epoch;
  const std::int64_t warmup = std::min<std::int64_t>(tc.warmup_steps, total_steps);
  const int s = uc.image_size;
  const int c_img = uc.out_channels;
  const int num_classes = data.manifest.config.num_classes;
  if (tc.ablation_enabled)
    result.pattern_histogram.assign(std::size_t(1) << (num_classes - 1), 0);

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[std::size_t(i)] = split.begin + i;

  std::int64_t step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[std::size_t(i)], order[std::size_t(train_rng.uniform_int(0, i))]);

    double epoch_loss = 0.0;
    for (int b = 0; b < batches_per_epoch; ++b) {
      const int lo = b * tc.batch_size;
      const int bsz = std::min(tc.batch_size, n - lo);
      TensorF x_t = TensorF::zeros({bsz, c_img, s, s});
      TensorF mask_ch = TensorF::zeros({bsz, 1, s, s});
      TensorF eps = TensorF::zeros({bsz, c_img, s, s});
      std::vector<int> ts(static_cast<std::size_t>(bsz));
      const std::int64_t plane = std::int64_t(s) * s;
      for (int k = 0; k < bsz; ++k) {
        const LabeledSample& sample = data.at(order[std::size_t(lo + k)]);
        Mask mask = sample.mask;
        if (tc.ablation_enabled) {
          auto [ablated, pattern] = ablate_random(mask, train_rng);
          mask = std::move(ablated);
          result.pattern_histogram[pattern.index()] += 1;
        }
        if (tc.guidance_enabled) {
          TensorF enc = encode_mask<float>(mask, num_classes);
          std::copy_n(enc.data().data(), plane, mask_ch.data().data() + k * plane);
        }
        ts[std::size_t(k)] = train_rng.uniform_int(1, schedule.num_timesteps);
        TensorF e = TensorF::zeros({1, c_img, s, s});
        for (auto& v : e.data()) v = float(train_rng.normal());
        TensorF xt_k = forward_sample(image_tensor(sample.image, s), ts[std::size_t(k)],
                                      e, schedule);
        std::copy_n(e.data().data(), plane * c_img,
                    eps.data().data() + k * plane * c_img);
        std::copy_n(xt_k.data().data(), plane * c_img,
                    x_t.data().data() + k * plane * c_img);
      }
      for (float v : mask_ch.data())
        result.mask_channel_absmax = std::max(result.mask_channel_absmax,
                                              double(std::abs(v)));

      TensorF eps_hat = model.denoise(x_t, mask_ch, ts);
      TensorF loss = mse(eps_hat, eps);
      const double loss_v = loss.item();
      const double lr = lr_schedule(std::min(step + 1, total_steps), total_steps, warmup,
                                    tc.base_lr);
      LossRow row{step, epoch, lr, loss_v};
      result.loss_log.push_back(row);
      if (on_row) on_row(row);
      if (!std::isfinite(loss_v))
        throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                           " (lr = " + std::to_string(lr) + ")");
      backward(loss);
      opt.learning_rate = float(lr);
      adamw_step(std::span<TensorF>(model.parameters()), opt);
      epoch_loss += loss_v;
      ++step;
    }
    result.epoch_mean_loss.push_back(epoch_loss / double(batches_per_epoch));
  }
  result.steps = step;
  return result;
}

struct SegTrainConfig {
  int epochs = 40;
  int batch_size = 16;
  double base_lr = 1e-3;
  int warmup_steps = 100;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;
};

struct SegTrainResult {
  UNetF model;
  std::int64_t best_step = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  std::vector<double> val_losses;  // one per epoch

  SegTrainResult(UNetF m) : model(std::move(m)) {}
};

/// A (image, mask) pair referencing externally owned storage.
struct SegPair {
  const std::vector<float>* image;
  const Mask* mask;
};

inline std::vector<SegPair> split_pairs(const Dataset& data, const IndexRange& range) {
  std::vector<SegPair> out;
  out.reserve(static_cast<std::size_t>(range.size()));
  for (int i = range.begin; i < range.end; ++i)
    out.push_back({&data.at(i).image, &data.at(i).mask});
  return out;
}

/// Per-pixel cross-entropy training of the auxiliary segmentation UNet with
/// best-validation-loss checkpoint selection.
inline SegTrainResult train_segmenter(const std::vector<SegPair>& train_pairs,
                                      const std::vector<SegPair>& val_pairs,
                                      const UNetConfig& uc, const SegTrainConfig& tc) {
  uc.validate();
  if (train_pairs.empty()) throw ConfigError("train_segmenter: empty training set");
  if (val_pairs.empty()) throw ConfigError("train_segmenter: empty validation split");
  if (tc.epochs < 1 || tc.batch_size < 1)
    throw ConfigError("train_segmenter: non-positive epochs/batch");

  Rng init_rng = Rng::stream(tc.seed, 0);
  Rng train_rng = Rng::stream(tc.seed, 1);
  SegTrainResult result{UNetF(uc, init_rng)};
  auto& model = result.model;
  AdamWState<float> opt;
  opt.weight_decay = float(tc.weight_decay);
  opt.init(model.parameters());

  const int s = uc.image_size;
  const std::int64_t plane = std::int64_t(s) * s;
  const int n = static_cast<int>(train_pairs.size());
  const int batches_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  const std::int64_t total_steps = std::int64_t(tc.epochs) * batches_per_epoch;
  const std::int64_t warmup = std::min<std::int64_t>(tc.warmup_steps, total_steps);

  auto batch_loss = [&](const std::vector<SegPair>& pairs, int lo, int bsz) {
    TensorF x = TensorF::zeros({bsz, 1, s, s});
    std::vector<int> labels(static_cast<std::size_t>(bsz) * plane);
    for (int k = 0; k < bsz; ++k) {
      const auto& pair = pairs[std::size_t(lo + k)];
      std::copy_n(pair.image->data(), plane, x.data().data() + k * plane);
      for (std::int64_t p = 0; p < plane; ++p)
        labels[std::size_t(k * plane + p)] = pair.mask->labels[std::size_t(p)];
    }
    return cross_entropy_per_pixel(model.forward(x), std::move(labels));
  };

  auto validation_loss = [&]() {
    NoGradGuard no_grad;
    double total = 0.0;
    std::int64_t count = 0;
    const int vn = static_cast<int>(val_pairs.size());
    for (int lo = 0; lo < vn; lo += tc.batch_size) {
      const int bsz = std::min(tc.batch_size, vn - lo);
      total += batch_loss(val_pairs, lo, bsz).item() * bsz;
      count += bsz;
    }
    return total / double(count);
  };

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[std::size_t(i)] = i;
  std::vector<std::vector<float>> best_params;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  std::int64_t step = 0;
  std::vector<SegPair> shuffled(train_pairs);
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i)
      std::swap(order[std::size_t(i)], order[std::size_t(train_rng.uniform_int(0, i))]);
    for (int i = 0; i < n; ++i) shuffled[std::size_t(i)] = train_pairs[std::size_t(order[std::size_t(i)])];

    for (int b = 0; b < batches_per_epoch; ++b) {
      const int lo = b * tc.batch_size;
      const int bsz = std::min(tc.batch_size, n - lo);
      TensorF loss = batch_loss(shuffled, lo, bsz);
      if (!std::isfinite(loss.item()))
        throw NumericError("train_segmenter: non-finite loss at step " +
                           std::to_string(step));
      backward(loss);
      opt.learning_rate =
          float(lr_schedule(std::min(step + 1, total_steps), total_steps, warmup,
                            tc.base_lr));
      adamw_step(std::span<TensorF>(model.parameters()), opt);
      ++step;
    }

    const double val = validation_loss();
    result.val_losses.push_back(val);
    if (val < result.best_val_loss) {
      result.best_val_loss = val;
      result.best_epoch = epoch;
      result.best_step = step;
      best_params.clear();
      for (const auto& p : model.parameters())
        best_params.emplace_back(p.data().begin(), p.data().end());
    }
  }
  for (std::size_t i = 0; i < best_params.size(); ++i)
    std::copy(best_params[i].begin(), best_params[i].end(),
              model.parameters()[i].data().begin());
  return result;
}

/// Argmax segmentation of one image through a trained segmenter.
inline Mask segment_image(const UNetF& model, const std::vector<float>& image) {
  NoGradGuard no_grad;
  const int s = model.config().image_size;
  TensorF logits = model.forward(image_tensor(image, s));
  const int c = model.config().out_channels;
  Mask out = Mask::filled(s, s, c);
  auto lv = logits.data();
  const std::int64_t plane = std::int64_t(s) * s;
  for (std::int64_t p = 0; p < plane; ++p) {
    int best = 0;
    float best_v = lv[p];
    for (int ci = 1; ci < c; ++ci)
      if (lv[ci * plane + p] > best_v) {
        best_v = lv[ci * plane + p];
        best = ci;
      }
    out.labels[std::size_t(p)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Pooled bottleneck features for a list of images (the dataset-trained
/// encoder of the Frechet metric).
inline std::vector<std::vector<double>> encode_features(
    const UNetF& encoder, const std::vector<const std::vector<float>*>& images) {
  NoGradGuard no_grad;
  const int s = encoder.config().image_size;
  std::vector<std::vector<double>> out;
  out.reserve(images.size());
  const int batch = 32;
  const std::int64_t plane = std::int64_t(s) * s;
  for (std::size_t lo = 0; lo < images.size(); lo += batch) {
    const int bsz = static_cast<int>(std::min<std::size_t>(batch, images.size() - lo));
    TensorF x = TensorF::zeros({bsz, 1, s, s});
    for (int k = 0; k < bsz; ++k)
      std::copy_n(images[lo + k]->data(), plane, x.data().data() + k * plane);
    for (auto& f : encoder.bottleneck_features(x)) out.push_back(std::move(f));
  }
  return out;
}

}  // namespace segdiff
