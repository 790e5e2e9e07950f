#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "segdiff/checkpoint.hpp"
#include "segdiff/dataset.hpp"
#include "segdiff/metrics.hpp"
#include "segdiff/sampler.hpp"
#include "segdiff/train.hpp"

namespace segdiff {

/// Ordered named metrics plus provenance, emitted as `metric = value` text
/// and a tab-separated table.
struct EvalReport {
  std::vector<std::pair<std::string, std::string>> entries;

  void add(const std::string& name, double value) {
    std::ostringstream os;
    os.precision(9);
    os << value;
    entries.emplace_back(name, os.str());
  }

  void add_info(const std::string& name, const std::string& value) {
    entries.emplace_back(name, value);
  }

  bool has(const std::string& name) const {
    for (const auto& [k, v] : entries)
      if (k == name) return true;
    return false;
  }

  double get(const std::string& name) const {
    for (const auto& [k, v] : entries)
      if (k == name) return std::stod(v);
    throw std::invalid_argument("report has no metric '" + name + "'");
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : entries) os << k << " = " << v << "\n";
    return os.str();
  }

  std::string to_tsv() const {
    std::ostringstream os;
    os << "metric\tvalue\n";
    for (const auto& [k, v] : entries) os << k << "\t" << v << "\n";
    return os.str();
  }

  void write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& [name, text] :
         {std::pair<std::string, std::string>{"report.txt", to_text()},
          {"report.tsv", to_tsv()}}) {
      std::ofstream out(dir / name);
      if (!out) throw IoError("cannot open " + (dir / name).string() + " for writing");
      out << text;
    }
  }
};

/// Produces one generated image (row-major floats in [-1,1]) for a
/// conditioning mask and sample index.
using Generator = std::function<std::vector<float>(const Mask&, int)>;

struct EvalSampling {
  SamplerKind kind = SamplerKind::DDIM;
  int steps = 0;  // 0 resolves to T/20 for DDIM
  std::uint64_t seed = 0;
};

/// Diffusion-backed generator. Unconditional checkpoints ignore the given
/// mask and sample from an all-zero mask channel, matching their training.
inline Generator model_generator(const LoadedModel& loaded, const EvalSampling& es) {
  if (loaded.schedule.num_timesteps == 0)
    throw ConfigError("generator checkpoint " + loaded.path + " has no noise schedule");
  return [&loaded, es](const Mask& mask, int index) {
    SamplerConfig sc{es.kind, es.steps, es.seed};
    Rng rng = Rng::stream(es.seed, static_cast<std::uint64_t>(index));
    Mask conditioning = mask;
    if (loaded.kind == ModelKind::Unconditional)
      conditioning = Mask::filled(mask.width, mask.height, mask.num_classes, 0);
    TensorF img = sample_image(loaded.model, conditioning, loaded.schedule, sc, rng);
    return std::vector<float>(img.data().begin(), img.data().end());
  };
}

/// Generator used by oracle tests: emits the paired real image.
inline Generator identity_generator(const Dataset& data, const IndexRange& range) {
  return [&data, range](const Mask&, int index) {
    return data.at(range.begin + index).image;
  };
}

namespace detail {

inline void add_dataset_provenance(EvalReport& r, const Dataset& data) {
  std::ostringstream os;
  os << std::hex << data.manifest.hash;
  r.add_info("dataset_manifest_hash", os.str());
}

}  // namespace detail

/// Faithfulness protocol: segment images generated from test masks and
/// compare those predictions with (a) the conditioning masks and (b) the
/// segmenter's predictions on the paired real images.
inline EvalReport eval_faithfulness(const Generator& generate, const UNetF& segmenter,
                                    const Dataset& data, const IndexRange& test_range,
                                    int limit = 0) {
  if (test_range.size() < 1) throw ConfigError("eval_faithfulness: empty test range");
  const int n = limit > 0 ? std::min(limit, test_range.size()) : test_range.size();
  const int c = data.manifest.config.num_classes;

  std::vector<double> dice_vs_mask_by_class(static_cast<std::size_t>(c), 0.0);
  double sum_vs_mask = 0.0, sum_vs_real = 0.0;
  for (int i = 0; i < n; ++i) {
    const LabeledSample& sample = data.at(test_range.begin + i);
    const std::vector<float> gen_img = generate(sample.mask, i);
    const Mask pred_gen = segment_image(segmenter, gen_img);
    const Mask pred_real = segment_image(segmenter, sample.image);
    sum_vs_mask += mean_foreground_dice(pred_gen, sample.mask);
    sum_vs_real += mean_foreground_dice(pred_gen, pred_real);
    for (int cls = 1; cls < c; ++cls)
      dice_vs_mask_by_class[std::size_t(cls)] += dice(pred_gen, sample.mask, cls);
  }

  EvalReport r;
  r.add_info("protocol", "faithfulness");
  r.add("num_samples", n);
  r.add("dice_gen_vs_mask", sum_vs_mask / n);
  r.add("dice_gen_vs_real_pred", sum_vs_real / n);
  for (int cls = 1; cls < c; ++cls)
    r.add("dice_gen_vs_mask_class" + std::to_string(cls),
          dice_vs_mask_by_class[std::size_t(cls)] / n);
  detail::add_dataset_provenance(r, data);
  return r;
}

struct QualityOptions {
  UNetConfig segmenter;
  SegTrainConfig seg_train;
  int limit = 0;  // cap on evaluated test samples, 0 = all
};

/// Quality protocol: train segmenter A on real held-out pairs and segmenter B
/// on images generated from the same masks, then compare their test Dice.
inline EvalReport eval_quality(const Generator& generate, const Dataset& data,
                               const IndexRange& heldout, const IndexRange& validation,
                               const IndexRange& test, const QualityOptions& opt) {
  if (heldout.overlaps(test) || heldout.overlaps(validation) ||
      validation.overlaps(test))
    throw ConfigError("eval_quality: overlapping splits");
  if (heldout.size() < 1 || validation.size() < 1 || test.size() < 1)
    throw ConfigError("eval_quality: empty split");

  const std::vector<SegPair> real_pairs = split_pairs(data, heldout);
  const std::vector<SegPair> val_pairs = split_pairs(data, validation);

  std::vector<std::vector<float>> generated(static_cast<std::size_t>(heldout.size()));
  for (int i = 0; i < heldout.size(); ++i)
    generated[std::size_t(i)] = generate(data.at(heldout.begin + i).mask, i);
  std::vector<SegPair> syn_pairs;
  syn_pairs.reserve(generated.size());
  for (int i = 0; i < heldout.size(); ++i)
    syn_pairs.push_back({&generated[std::size_t(i)], &data.at(heldout.begin + i).mask});

  SegTrainResult seg_real = train_segmenter(real_pairs, val_pairs, opt.segmenter,
                                            opt.seg_train);
  SegTrainResult seg_syn = train_segmenter(syn_pairs, val_pairs, opt.segmenter,
                                           opt.seg_train);

  auto test_dice = [&](const UNetF& seg) {
    const int n = opt.limit > 0 ? std::min(opt.limit, test.size()) : test.size();
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      const LabeledSample& sample = data.at(test.begin + i);
      s += mean_foreground_dice(segment_image(seg, sample.image), sample.mask);
    }
    return s / n;
  };

  const double dice_real = test_dice(seg_real.model);
  const double dice_syn = test_dice(seg_syn.model);
  EvalReport r;
  r.add_info("protocol", "quality");
  r.add("dice_real_trained", dice_real);
  r.add("dice_synthetic_trained", dice_syn);
  r.add("dice_gap", dice_real - dice_syn);
  r.add("segmenter_real_best_val_loss", seg_real.best_val_loss);
  r.add("segmenter_synthetic_best_val_loss", seg_syn.best_val_loss);
  detail::add_dataset_provenance(r, data);
  return r;
}

/// Trains the dataset-specific feature encoder: a narrow segmentation UNet
/// whose pooled bottleneck (32-d) feeds the Frechet metric.
inline SegTrainResult train_encoder(const Dataset& data, const IndexRange& heldout,
                                    const IndexRange& validation, std::uint64_t seed) {
  UNetConfig cfg = segmenter_config(data.manifest.config.num_classes,
                                    data.manifest.config.image_size,
                                    /*base_channels=*/8);
  SegTrainConfig tc;
  tc.epochs = 30;
  tc.seed = seed;
  return train_segmenter(split_pairs(data, heldout), split_pairs(data, validation), cfg,
                         tc);
}

inline std::vector<std::vector<double>> real_split_features(const UNetF& encoder,
                                                            const Dataset& data,
                                                            const IndexRange& range) {
  std::vector<const std::vector<float>*> imgs;
  imgs.reserve(static_cast<std::size_t>(range.size()));
  for (int i = range.begin; i < range.end; ++i) imgs.push_back(&data.at(i).image);
  return encode_features(encoder, imgs);
}

/// Feature-space Frechet distance between generated images (one per test
/// mask) and the real test images.
inline EvalReport eval_fid(const Generator& generate, const UNetF& encoder,
                           const Dataset& data, const IndexRange& test_range,
                           int limit = 0) {
  const int n = limit > 0 ? std::min(limit, test_range.size()) : test_range.size();
  if (n < 2) throw ConfigError("eval_fid: need at least 2 samples");
  std::vector<std::vector<float>> gen_imgs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    gen_imgs[std::size_t(i)] = generate(data.at(test_range.begin + i).mask, i);
  std::vector<const std::vector<float>*> gen_ptrs;
  for (auto& img : gen_imgs) gen_ptrs.push_back(&img);

  const auto gen_features = encode_features(encoder, gen_ptrs);
  const auto real_features = real_split_features(encoder, data, test_range);
  EvalReport r;
  r.add_info("protocol", "fid");
  r.add("num_samples", n);
  r.add("fid", feature_fid(gen_features, real_features));
  r.add_info("note",
             "encoder is trained on this dataset; values are not comparable "
             "across encoders or datasets");
  detail::add_dataset_provenance(r, data);
  return r;
}

/// Empty-mask protocol: sample each model unconditioned (all-zero mask),
/// report each set's Frechet distance to the real test images and the
/// fraction of samples in which the segmenter finds any organ pixels.
inline EvalReport eval_empty_mask(const Generator& gen_ablated,
                                  const Generator& gen_unconditional,
                                  const UNetF& segmenter, const UNetF& encoder,
                                  const Dataset& data, const IndexRange& test_range,
                                  int n) {
  EvalReport r;
  r.add_info("protocol", "empty-mask");
  r.add("num_samples", n);
  if (n == 0) {
    detail::add_dataset_provenance(r, data);
    return r;
  }
  const int s = data.manifest.config.image_size;
  const Mask empty = Mask::filled(s, s, data.manifest.config.num_classes, 0);

  const auto real_features = real_split_features(encoder, data, test_range);
  auto run = [&](const Generator& gen, const std::string& tag) {
    std::vector<std::vector<float>> imgs(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) imgs[std::size_t(i)] = gen(empty, i);
    std::vector<const std::vector<float>*> ptrs;
    for (auto& img : imgs) ptrs.push_back(&img);
    int with_organ = 0;
    for (int i = 0; i < n; ++i) {
      const Mask pred = segment_image(segmenter, imgs[std::size_t(i)]);
      bool found = false;
      for (auto v : pred.labels) found |= v == kOrganClass;
      with_organ += found;
    }
    r.add("fid_" + tag, feature_fid(encode_features(encoder, ptrs), real_features));
    r.add("organ_found_fraction_" + tag, double(with_organ) / double(n));
  };
  run(gen_ablated, "ablated");
  run(gen_unconditional, "unconditional");
  r.add_info("note",
             "encoder is trained on this dataset; values are not comparable "
             "across encoders or datasets");
  detail::add_dataset_provenance(r, data);
  return r;
}

}  // namespace segdiff
