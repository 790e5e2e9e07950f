#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "segdiff/kv.hpp"
#include "segdiff/pgm.hpp"
#include "segdiff/phantom.hpp"
#include "segdiff/thread_pool.hpp"

namespace segdiff {

struct IndexRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool overlaps(const IndexRange& other) const {
    return begin < other.end && other.begin < end;
  }
};

struct SplitRanges {
  IndexRange train, heldout, validation, test;

  static constexpr std::array<const char*, 4> names = {"train", "heldout", "validation",
                                                       "test"};
  IndexRange& by_index(int i) {
    switch (i) {
      case 0: return train;
      case 1: return heldout;
      case 2: return validation;
      default: return test;
    }
  }
  const IndexRange& by_index(int i) const {
    return const_cast<SplitRanges*>(this)->by_index(i);
  }
};

inline constexpr std::array<double, 4> kDefaultSplitRatios = {0.7, 0.15, 0.075, 0.075};

/// Largest-remainder rounding of n * ratio, ties broken by split order.
/// Errors (naming the split) if any split would be empty.
inline std::array<int, 4> split_sizes(int n, const std::array<double, 4>& ratios) {
  double sum = 0.0;
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("split ratio must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split ratios sum to " + std::to_string(sum) + ", expected 1");
  std::array<int, 4> sizes{};
  std::array<double, 4> remainder{};
  int assigned = 0;
  for (int i = 0; i < 4; ++i) {
    const double target = double(n) * ratios[static_cast<std::size_t>(i)];
    sizes[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(target));
    remainder[static_cast<std::size_t>(i)] = target - std::floor(target);
    assigned += sizes[static_cast<std::size_t>(i)];
  }
  for (int left = n - assigned; left > 0; --left) {
    int best = 0;
    for (int i = 1; i < 4; ++i)
      if (remainder[static_cast<std::size_t>(i)] > remainder[static_cast<std::size_t>(best)])
        best = i;
    sizes[static_cast<std::size_t>(best)] += 1;
    remainder[static_cast<std::size_t>(best)] = -1.0;
  }
  for (int i = 0; i < 4; ++i)
    if (sizes[static_cast<std::size_t>(i)] < 1)
      throw ConfigError(std::string("split '") + SplitRanges::names[static_cast<std::size_t>(i)] +
                        "' would be empty for n = " + std::to_string(n));
  return sizes;
}

inline SplitRanges make_splits(int n, const std::array<double, 4>& ratios) {
  const auto sizes = split_sizes(n, ratios);
  SplitRanges s;
  int at = 0;
  for (int i = 0; i < 4; ++i) {
    s.by_index(i).begin = at;
    at += sizes[static_cast<std::size_t>(i)];
    s.by_index(i).end = at;
  }
  return s;
}

inline std::string sample_image_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%06d.pgm", index);
  return buf;
}

inline std::string sample_mask_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "msk_%06d.pgm", index);
  return buf;
}

inline void save_sample(const std::filesystem::path& dir, int index,
                        const LabeledSample& sample) {
  write_pgm(dir / sample_image_name(index), sample.mask.width, sample.mask.height,
            image_to_bytes(sample.image));
  write_pgm(dir / sample_mask_name(index), sample.mask.width, sample.mask.height,
            sample.mask.labels);
}

inline LabeledSample load_sample(const std::filesystem::path& dir, int index,
                                 int num_classes) {
  LabeledSample s;
  int w = 0, h = 0;
  const auto img = read_pgm(dir / sample_image_name(index), w, h);
  s.image = bytes_to_image(img);
  int mw = 0, mh = 0;
  auto labels = read_pgm(dir / sample_mask_name(index), mw, mh);
  if (mw != w || mh != h)
    throw IoError("image/mask size mismatch for sample " + std::to_string(index) +
                  " in " + dir.string());
  s.mask.width = mw;
  s.mask.height = mh;
  s.mask.num_classes = num_classes;
  s.mask.labels = std::move(labels);
  s.mask.validate();
  s.sample_seed = static_cast<std::uint64_t>(index);
  return s;
}

inline KvFile manifest_from_config(const PhantomConfig& cfg, int n,
                                   const SplitRanges& splits) {
  KvFile kv;
  kv.set("format", "segdiff-dataset-v1");
  kv.set("n", n);
  kv.set("seed", cfg.seed);
  kv.set("image_size", cfg.image_size);
  kv.set("num_classes", cfg.num_classes);
  kv.set("noise_sigma", cfg.noise_sigma);
  kv.set("illumination_amplitude", cfg.illumination_amplitude);
  for (std::size_t c = 0; c < cfg.bands.size(); ++c) {
    kv.set("band" + std::to_string(c) + "_mean", cfg.bands[c].mean);
    kv.set("band" + std::to_string(c) + "_spread", cfg.bands[c].spread);
  }
  kv.set("vessel_count_min", cfg.vessel_count_min);
  kv.set("vessel_count_max", cfg.vessel_count_max);
  kv.set("blob_count_min", cfg.blob_count_min);
  kv.set("blob_count_max", cfg.blob_count_max);
  for (int i = 0; i < 4; ++i) {
    kv.set(std::string("split_") + SplitRanges::names[static_cast<std::size_t>(i)] +
               "_begin",
           splits.by_index(i).begin);
    kv.set(std::string("split_") + SplitRanges::names[static_cast<std::size_t>(i)] + "_end",
           splits.by_index(i).end);
  }
  kv.set("source", "procedural phantom generator; synthetic stand-in, not clinical data");
  return kv;
}

struct DatasetManifest {
  PhantomConfig config;
  int n = 0;
  SplitRanges splits;
  std::uint64_t hash = 0;  // FNV-1a of the manifest text
};

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.txt";
  KvFile kv = KvFile::load(path);
  if (kv.get_or("format", "") != "segdiff-dataset-v1")
    throw IoError("unrecognized dataset format in " + path.string());
  DatasetManifest m;
  m.n = static_cast<int>(kv.get_int("n"));
  m.config.seed = kv.get_u64("seed");
  m.config.image_size = static_cast<int>(kv.get_int("image_size"));
  m.config.num_classes = static_cast<int>(kv.get_int("num_classes"));
  m.config.noise_sigma = kv.get_double("noise_sigma");
  m.config.illumination_amplitude = kv.get_double("illumination_amplitude");
  m.config.bands.clear();
  for (int c = 0; c < m.config.num_classes; ++c) {
    ClassBand band;
    band.mean = kv.get_double("band" + std::to_string(c) + "_mean");
    band.spread = kv.get_double("band" + std::to_string(c) + "_spread");
    m.config.bands.push_back(band);
  }
  m.config.vessel_count_min = static_cast<int>(kv.get_int("vessel_count_min"));
  m.config.vessel_count_max = static_cast<int>(kv.get_int("vessel_count_max"));
  m.config.blob_count_min = static_cast<int>(kv.get_int("blob_count_min"));
  m.config.blob_count_max = static_cast<int>(kv.get_int("blob_count_max"));
  for (int i = 0; i < 4; ++i) {
    auto& r = m.splits.by_index(i);
    const std::string base =
        std::string("split_") + SplitRanges::names[static_cast<std::size_t>(i)];
    r.begin = static_cast<int>(kv.get_int(base + "_begin"));
    r.end = static_cast<int>(kv.get_int(base + "_end"));
  }
  m.hash = fnv1a64(kv.to_text());
  return m;
}

/// Generates and persists n samples plus the manifest. Sample i depends only
/// on (config.seed, i), so generation parallelizes without changing output.
inline DatasetManifest gen_dataset(const PhantomConfig& cfg, int n,
                                   const std::array<double, 4>& ratios,
                                   const std::filesystem::path& dir) {
  cfg.validate();
  if (n < 4) throw ConfigError("gen_dataset: need at least 4 samples, got " +
                               std::to_string(n));
  const SplitRanges splits = make_splits(n, ratios);
  std::filesystem::create_directories(dir);
  parallel_for(n, [&](int begin, int end) {
    for (int i = begin; i < end; ++i)
      save_sample(dir, i, gen_sample(cfg, static_cast<std::uint64_t>(i)));
  });
  const KvFile kv = manifest_from_config(cfg, n, splits);
  kv.save(dir / "manifest.txt");
  DatasetManifest m;
  m.config = cfg;
  m.n = n;
  m.splits = splits;
  m.hash = fnv1a64(kv.to_text());
  return m;
}

/// Eagerly loaded dataset.
struct Dataset {
  DatasetManifest manifest;
  std::vector<LabeledSample> samples;

  const LabeledSample& at(int index) const {
    return samples[static_cast<std::size_t>(index)];
  }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.manifest = read_manifest(dir);
  d.samples.resize(static_cast<std::size_t>(d.manifest.n));
  parallel_for(d.manifest.n, [&](int begin, int end) {
    for (int i = begin; i < end; ++i)
      d.samples[static_cast<std::size_t>(i)] =
          load_sample(dir, i, d.manifest.config.num_classes);
  });
  return d;
}

}  // namespace segdiff
