#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "segdiff/mask.hpp"
#include "segdiff/rng.hpp"

namespace segdiff {

// Phantom class layout: 0 background, 1 organ, 2 vessel, 3 dense tissue.
inline constexpr int kOrganClass = 1;
inline constexpr int kVesselClass = 2;
inline constexpr int kDenseClass = 3;

struct ClassBand {
  double mean = 0.0;
  double spread = 0.0;  // per-sample uniform jitter half-width
};

struct PhantomConfig {
  int image_size = 32;
  int num_classes = 4;
  std::vector<ClassBand> bands = {
      {0.08, 0.03}, {0.45, 0.04}, {0.72, 0.04}, {0.93, 0.04}};
  double noise_sigma = 0.03;
  double illumination_amplitude = 0.1;
  int vessel_count_min = 1, vessel_count_max = 3;
  int blob_count_min = 1, blob_count_max = 3;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 8) throw ConfigError("phantom: image_size must be >= 8");
    if (num_classes < 2 || num_classes > 4)
      throw ConfigError("phantom: num_classes must be in [2, 4]");
    if (static_cast<int>(bands.size()) != num_classes)
      throw ConfigError("phantom: " + std::to_string(bands.size()) + " bands for " +
                        std::to_string(num_classes) + " classes");
    if (noise_sigma < 0 || illumination_amplitude < 0)
      throw ConfigError("phantom: negative noise/illumination");
    if (vessel_count_min < 0 || vessel_count_max < vessel_count_min ||
        blob_count_min < 0 || blob_count_max < blob_count_min)
      throw ConfigError("phantom: invalid structure count range");
    // Bands must stay separable under all per-sample jitter plus pixel noise.
    for (std::size_t i = 0; i < bands.size(); ++i)
      for (std::size_t j = i + 1; j < bands.size(); ++j) {
        const double gap = std::abs(bands[i].mean - bands[j].mean) -
                           (bands[i].spread + bands[j].spread);
        if (gap < 2.0 * noise_sigma)
          throw ConfigError("phantom: bands " + std::to_string(i) + " and " +
                            std::to_string(j) + " closer than 2*noise_sigma");
      }
  }
};

/// One training pair: image values in [-1, 1], mask labels in {0, .., C-1}.
struct LabeledSample {
  std::vector<float> image;  // row-major, image_size x image_size
  Mask mask;
  std::uint64_t sample_seed = 0;

  int size() const { return mask.width; }
};

namespace detail {

struct Ellipse {
  double cx, cy, ra, rb, cos_t, sin_t;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = (dx * cos_t + dy * sin_t) / ra;
    const double v = (-dx * sin_t + dy * cos_t) / rb;
    return u * u + v * v <= 1.0;
  }
};

inline void stamp_disk(std::vector<std::uint8_t>& organ, std::vector<std::uint8_t>& out,
                       int s, double cx, double cy, double r) {
  const int x0 = std::max(0, int(std::floor(cx - r)));
  const int x1 = std::min(s - 1, int(std::ceil(cx + r)));
  const int y0 = std::max(0, int(std::floor(cy - r)));
  const int y1 = std::min(s - 1, int(std::ceil(cy + r)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy <= r * r && organ[std::size_t(y) * s + x])
        out[std::size_t(y) * s + x] = 1;
    }
}

}  // namespace detail

/// Deterministic function of (config.seed, index): organ ellipse, random-walk
/// vessels and blobby dense tissue clipped to the organ, per-class intensity
/// bands, a smooth illumination field, and pixel noise.
inline LabeledSample gen_sample(const PhantomConfig& cfg, std::uint64_t index) {
  cfg.validate();
  Rng rng = Rng::stream(cfg.seed, index);
  const int s = cfg.image_size;
  const std::size_t npix = std::size_t(s) * s;

  // Organ ellipse; reject until its pixel fraction lands in [0.15, 0.6].
  detail::Ellipse organ{};
  std::vector<std::uint8_t> organ_px(npix, 0);
  bool ok = false;
  for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
    organ.cx = rng.uniform(0.35, 0.65) * s;
    organ.cy = rng.uniform(0.35, 0.65) * s;
    organ.ra = rng.uniform(0.18, 0.42) * s;
    organ.rb = rng.uniform(0.18, 0.42) * s;
    const double theta = rng.uniform(0.0, std::numbers::pi);
    organ.cos_t = std::cos(theta);
    organ.sin_t = std::sin(theta);
    std::size_t count = 0;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const bool in = organ.contains(x, y);
        organ_px[std::size_t(y) * s + x] = in;
        count += in;
      }
    const double frac = double(count) / double(npix);
    ok = frac >= 0.15 && frac <= 0.6;
  }
  if (!ok) throw NumericError("gen_sample: no acceptable organ after 100 attempts");

  // Vessels: short random walks rasterized as moving disks, organ-clipped.
  std::vector<std::uint8_t> vessel_px(npix, 0);
  if (cfg.num_classes > kVesselClass) {
    const int vessels = rng.uniform_int(cfg.vessel_count_min, cfg.vessel_count_max);
    for (int v = 0; v < vessels; ++v) {
      double x = 0, y = 0;
      bool found = false;
      for (int tries = 0; tries < 50 && !found; ++tries) {
        x = rng.uniform(0.0, s - 1.0);
        y = rng.uniform(0.0, s - 1.0);
        found = organ_px[std::size_t(int(y)) * s + int(x)];
      }
      if (!found) continue;
      double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double radius = rng.uniform(0.8, 1.4);
      const int steps = rng.uniform_int(s / 2, s);
      for (int st = 0; st < steps; ++st) {
        detail::stamp_disk(organ_px, vessel_px, s, x, y, radius);
        dir += rng.normal(0.0, 0.3);
        x += std::cos(dir);
        y += std::sin(dir);
      }
    }
  }

  // Dense tissue: unions of a few overlapping disks, organ-clipped.
  std::vector<std::uint8_t> dense_px(npix, 0);
  if (cfg.num_classes > kDenseClass) {
    const int blobs = rng.uniform_int(cfg.blob_count_min, cfg.blob_count_max);
    for (int bi = 0; bi < blobs; ++bi) {
      double cx = 0, cy = 0;
      bool found = false;
      for (int tries = 0; tries < 50 && !found; ++tries) {
        cx = rng.uniform(0.0, s - 1.0);
        cy = rng.uniform(0.0, s - 1.0);
        found = organ_px[std::size_t(int(cy)) * s + int(cx)];
      }
      if (!found) continue;
      const int lobes = rng.uniform_int(2, 4);
      for (int l = 0; l < lobes; ++l) {
        const double ox = cx + rng.normal(0.0, 2.0);
        const double oy = cy + rng.normal(0.0, 2.0);
        detail::stamp_disk(organ_px, dense_px, s, ox, oy, rng.uniform(1.5, 3.5));
      }
    }
  }

  // Label priority: dense > vessel > organ > background.
  LabeledSample out;
  out.sample_seed = index;
  out.mask = Mask::filled(s, s, cfg.num_classes);
  for (std::size_t i = 0; i < npix; ++i) {
    if (dense_px[i]) out.mask.labels[i] = kDenseClass;
    else if (vessel_px[i]) out.mask.labels[i] = kVesselClass;
    else if (organ_px[i]) out.mask.labels[i] = kOrganClass;
  }

  // Per-sample class intensity levels.
  std::vector<double> level(cfg.bands.size());
  for (std::size_t c = 0; c < cfg.bands.size(); ++c)
    level[c] = cfg.bands[c].mean + rng.uniform(-1.0, 1.0) * cfg.bands[c].spread;

  // Smooth illumination: bilinear interpolation of a random 3x3 grid.
  double grid[3][3];
  for (auto& row : grid)
    for (auto& g : row)
      g = rng.uniform(-cfg.illumination_amplitude, cfg.illumination_amplitude);
  auto illum = [&](int x, int y) {
    const double fx = 2.0 * x / double(s - 1);  // in [0, 2]
    const double fy = 2.0 * y / double(s - 1);
    const int ix = std::min(1, int(fx)), iy = std::min(1, int(fy));
    const double tx = fx - ix, ty = fy - iy;
    return grid[iy][ix] * (1 - tx) * (1 - ty) + grid[iy][ix + 1] * tx * (1 - ty) +
           grid[iy + 1][ix] * (1 - tx) * ty + grid[iy + 1][ix + 1] * tx * ty;
  };

  out.image.resize(npix);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const std::size_t i = std::size_t(y) * s + x;
      double v = level[out.mask.labels[i]] + illum(x, y);
      if (cfg.noise_sigma > 0) v += rng.normal(0.0, cfg.noise_sigma);
      out.image[i] = float(std::clamp(2.0 * v - 1.0, -1.0, 1.0));
    }
  return out;
}

}  // namespace segdiff
