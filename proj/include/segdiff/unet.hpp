#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "segdiff/mask.hpp"
#include "segdiff/ops.hpp"
#include "segdiff/rng.hpp"

namespace segdiff {

struct UNetConfig {
  int base_channels = 32;
  std::vector<int> channel_multipliers = {1, 2, 4};
  int time_embed_dim = 64;  // 0 disables time conditioning (segmentation nets)
  int num_classes = 4;      // C of the paired masks
  int image_size = 32;
  int in_channels = 2;  // image channels + one mask channel for the denoiser
  int out_channels = 1;
  int norm_groups = 4;

  int levels() const { return static_cast<int>(channel_multipliers.size()); }

  void validate() const {
    if (base_channels < 1 || channel_multipliers.empty() || in_channels < 1 ||
        out_channels < 1 || image_size < 1 || num_classes < 1)
      throw ConfigError("unet: non-positive dimension in config");
    if (time_embed_dim < 0 || time_embed_dim % 2 != 0)
      throw ConfigError("unet: time_embed_dim must be even and >= 0, got " +
                        std::to_string(time_embed_dim));
    const int down_factor = 1 << (levels() - 1);
    if (image_size % down_factor != 0)
      throw ConfigError("unet: image_size " + std::to_string(image_size) +
                        " not divisible by " + std::to_string(down_factor));
    if (image_size / down_factor < 1)
      throw ConfigError("unet: image collapses before the bottleneck");
    for (int m : channel_multipliers)
      if (m < 1 || (base_channels * m) % norm_groups != 0)
        throw ConfigError("unet: channels " + std::to_string(base_channels * m) +
                          " not divisible by norm groups " +
                          std::to_string(norm_groups));
  }
};

/// Denoiser configuration: input is the image plus exactly one mask channel.
inline UNetConfig denoiser_config(int image_channels = 1, int num_classes = 4,
                                  int image_size = 32) {
  UNetConfig cfg;
  cfg.in_channels = image_channels + 1;
  cfg.out_channels = image_channels;
  cfg.num_classes = num_classes;
  cfg.image_size = image_size;
  return cfg;
}

/// Segmentation configuration: single image channel in, C logits out, no
/// time conditioning.
inline UNetConfig segmenter_config(int num_classes = 4, int image_size = 32,
                                   int base_channels = 16) {
  UNetConfig cfg;
  cfg.base_channels = base_channels;
  cfg.time_embed_dim = 0;
  cfg.num_classes = num_classes;
  cfg.in_channels = 1;
  cfg.out_channels = num_classes;
  cfg.image_size = image_size;
  return cfg;
}

/// Maps label c to c/(C-1) in a single channel, so masks concatenate directly
/// onto the image. Returns [1,1,h,w].
template <class T>
Tensor<T> encode_mask(const Mask& mask, int num_classes) {
  if (num_classes < 1)
    throw std::invalid_argument("encode_mask: C must be >= 1");
  Tensor<T> out = Tensor<T>::zeros({1, 1, mask.height, mask.width});
  auto o = out.data();
  const T scale = num_classes > 1 ? T(1) / T(num_classes - 1) : T(0);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    if (mask.labels[i] >= num_classes)
      throw std::invalid_argument("encode_mask: label " +
                                  std::to_string(int(mask.labels[i])) +
                                  " out of range for C=" + std::to_string(num_classes));
    o[i] = T(mask.labels[i]) * scale;
  }
  return out;
}

/// Sinusoidal position features for integer timesteps: [sin(t w_j), cos(t w_j)]
/// with geometrically spaced frequencies from 1 down to 1/10000.
template <class T>
Tensor<T> time_features(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(t.size()), dim});
  auto o = out.data();
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (int j = 0; j < half; ++j) {
      const double freq =
          half > 1 ? std::exp(-std::log(10000.0) * double(j) / double(half - 1)) : 1.0;
      const double arg = double(t[n]) * freq;
      o[n * dim + j] = T(std::sin(arg));
      o[n * dim + half + j] = T(std::cos(arg));
    }
  }
  return out;
}

/// Small UNet: per level one residual block (two 3x3 convs, group norm, SiLU,
/// additive skip), strided-conv downsampling, nearest-neighbor upsampling
/// followed by a 3x3 conv, and skip concatenation. Timestep embeddings enter
/// each residual block additively after a per-block linear projection.
template <class T>
class UNet {
 public:
  UNet(UNetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(rng);
  }

  const UNetConfig& config() const { return cfg_; }
  std::vector<Tensor<T>>& parameters() { return params_; }
  const std::vector<Tensor<T>>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  Tensor<T> find_parameter(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return params_[i];
    throw std::invalid_argument("unet: no parameter named " + name);
  }

  /// Full forward pass. `timesteps` must hold one entry per batch item when
  /// the net is time-conditioned, and may be empty otherwise.
  Tensor<T> forward(const Tensor<T>& x, const std::vector<int>& timesteps = {}) const {
    return run(x, timesteps, nullptr);
  }

  /// Denoiser entry point: predicts the noise for x_t given the mask channel.
  Tensor<T> denoise(const Tensor<T>& x_t, const Tensor<T>& mask_channel,
                    const std::vector<int>& timesteps) const {
    if (x_t.rank() != 4 || mask_channel.rank() != 4 || mask_channel.dim(1) != 1)
      throw std::invalid_argument("denoise: expected [N,c,h,w] and [N,1,h,w], got " +
                                  shape_str(x_t.shape()) + " and " +
                                  shape_str(mask_channel.shape()));
    return forward(concat_channels(x_t, mask_channel), timesteps);
  }

  /// Bottleneck feature vector per batch item (global average pooling of the
  /// mid block output). Used as the dataset-trained encoder for the Frechet
  /// metric.
  std::vector<std::vector<double>> bottleneck_features(const Tensor<T>& x) const {
    Tensor<T> mid;
    run(x, {}, &mid);
    const int n = mid.dim(0), c = mid.dim(1);
    const std::int64_t hw = mid.numel() / (std::int64_t(n) * c);
    auto mv = mid.data();
    std::vector<std::vector<double>> feats(static_cast<std::size_t>(n),
                                           std::vector<double>(c));
    for (int ni = 0; ni < n; ++ni)
      for (int ci = 0; ci < c; ++ci) {
        double s = 0.0;
        const std::int64_t base = (std::int64_t(ni) * c + ci) * hw;
        for (std::int64_t p = 0; p < hw; ++p) s += mv[base + p];
        feats[ni][ci] = s / double(hw);
      }
    return feats;
  }

  int bottleneck_dim() const {
    return cfg_.base_channels * cfg_.channel_multipliers.back();
  }

 private:
  struct Conv {
    Tensor<T> w, b;
    int stride = 1, pad = 1;
  };
  struct Norm {
    Tensor<T> gamma, beta;
  };
  struct Block {
    Norm gn1;
    Conv c1;
    Tensor<T> time_w, time_b;
    bool has_time = false;
    Norm gn2;
    Conv c2;
    Conv skip;
    bool has_skip = false;
  };

  Tensor<T> reg(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    names_.push_back(name);
    params_.push_back(t);
    return t;
  }

  Tensor<T> kaiming(Rng& rng, std::vector<int> shape, int fan_in) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    const double std = std::sqrt(2.0 / double(fan_in));
    for (auto& v : t.data()) v = T(rng.normal(0.0, std));
    return t;
  }

  Conv make_conv(Rng& rng, const std::string& name, int cin, int cout, int k,
                 int stride, bool zero_init = false) {
    Conv c;
    c.stride = stride;
    c.pad = (k - 1) / 2;
    c.w = reg(name + ".w", zero_init ? Tensor<T>::zeros({cout, cin, k, k})
                                     : kaiming(rng, {cout, cin, k, k}, cin * k * k));
    c.b = reg(name + ".b", Tensor<T>::zeros({cout}));
    return c;
  }

  Norm make_norm(Rng&, const std::string& name, int channels) {
    Norm g;
    g.gamma = reg(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    g.beta = reg(name + ".beta", Tensor<T>::zeros({channels}));
    return g;
  }

  Block make_block(Rng& rng, const std::string& name, int cin, int cout) {
    Block b;
    b.gn1 = make_norm(rng, name + ".gn1", cin);
    b.c1 = make_conv(rng, name + ".conv1", cin, cout, 3, 1);
    b.has_time = cfg_.time_embed_dim > 0;
    if (b.has_time) {
      b.time_w = reg(name + ".time.w",
                     kaiming(rng, {cout, cfg_.time_embed_dim}, cfg_.time_embed_dim));
      b.time_b = reg(name + ".time.b", Tensor<T>::zeros({cout}));
    }
    b.gn2 = make_norm(rng, name + ".gn2", cout);
    b.c2 = make_conv(rng, name + ".conv2", cout, cout, 3, 1);
    b.has_skip = cin != cout;
    if (b.has_skip) b.skip = make_conv(rng, name + ".skip", cin, cout, 1, 1);
    return b;
  }

  void build(Rng& rng) {
    const int levels = cfg_.levels();
    channels_.resize(static_cast<std::size_t>(levels));
    for (int i = 0; i < levels; ++i)
      channels_[static_cast<std::size_t>(i)] =
          cfg_.base_channels * cfg_.channel_multipliers[static_cast<std::size_t>(i)];

    if (cfg_.time_embed_dim > 0) {
      time_trunk_w_ = reg("time.trunk.w", kaiming(rng, {cfg_.time_embed_dim, cfg_.time_embed_dim},
                                                  cfg_.time_embed_dim));
      time_trunk_b_ = reg("time.trunk.b", Tensor<T>::zeros({cfg_.time_embed_dim}));
    }
    stem_ = make_conv(rng, "stem", cfg_.in_channels, channels_[0], 3, 1);
    for (int i = 0; i < levels; ++i) {
      if (i > 0)
        down_.push_back(make_conv(rng, "down" + std::to_string(i),
                                  channels_[static_cast<std::size_t>(i - 1)],
                                  channels_[static_cast<std::size_t>(i)], 3, 2));
      enc_.push_back(make_block(rng, "enc" + std::to_string(i),
                                channels_[static_cast<std::size_t>(i)],
                                channels_[static_cast<std::size_t>(i)]));
    }
    mid_ = make_block(rng, "mid", channels_.back(), channels_.back());
    for (int i = levels - 1; i >= 0; --i) {
      dec_.insert(dec_.begin(),
                  make_block(rng, "dec" + std::to_string(i),
                             2 * channels_[static_cast<std::size_t>(i)],
                             channels_[static_cast<std::size_t>(i)]));
      if (i > 0)
        up_.insert(up_.begin(), make_conv(rng, "up" + std::to_string(i),
                                          channels_[static_cast<std::size_t>(i)],
                                          channels_[static_cast<std::size_t>(i - 1)], 3, 1));
    }
    head_gn_ = make_norm(rng, "head.gn", channels_[0]);
    head_ = make_conv(rng, "head.conv", channels_[0], cfg_.out_channels, 3, 1,
                      /*zero_init=*/true);
  }

  Tensor<T> apply_conv(const Conv& c, const Tensor<T>& x) const {
    return conv2d(x, c.w, c.b, c.stride, c.pad);
  }

  Tensor<T> apply_block(const Block& b, const Tensor<T>& x,
                        const Tensor<T>& temb) const {
    Tensor<T> h = apply_conv(b.c1, silu(group_norm(x, cfg_.norm_groups, b.gn1.gamma,
                                                   b.gn1.beta)));
    if (b.has_time && temb.defined())
      h = add(h, linear(temb, b.time_w, b.time_b));
    h = apply_conv(b.c2, silu(group_norm(h, cfg_.norm_groups, b.gn2.gamma, b.gn2.beta)));
    Tensor<T> s = b.has_skip ? apply_conv(b.skip, x) : x;
    return add(h, s);
  }

  Tensor<T> run(const Tensor<T>& x, const std::vector<int>& timesteps,
                Tensor<T>* mid_out) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.image_size ||
        x.dim(3) != cfg_.image_size)
      throw std::invalid_argument("unet: input " + shape_str(x.shape()) +
                                  " does not match configured [N," +
                                  std::to_string(cfg_.in_channels) + "," +
                                  std::to_string(cfg_.image_size) + "," +
                                  std::to_string(cfg_.image_size) + "]");
    Tensor<T> temb;
    if (cfg_.time_embed_dim > 0) {
      if (static_cast<int>(timesteps.size()) != x.dim(0))
        throw std::invalid_argument("unet: " + std::to_string(timesteps.size()) +
                                    " timesteps for batch of " +
                                    std::to_string(x.dim(0)));
      temb = silu(linear(time_features<T>(timesteps, cfg_.time_embed_dim),
                         time_trunk_w_, time_trunk_b_));
    }

    const int levels = cfg_.levels();
    std::vector<Tensor<T>> skips(static_cast<std::size_t>(levels));
    Tensor<T> h = apply_conv(stem_, x);
    for (int i = 0; i < levels; ++i) {
      if (i > 0) h = apply_conv(down_[static_cast<std::size_t>(i - 1)], h);
      h = apply_block(enc_[static_cast<std::size_t>(i)], h, temb);
      skips[static_cast<std::size_t>(i)] = h;
    }
    h = apply_block(mid_, h, temb);
    if (mid_out) {
      *mid_out = h;
      return h;
    }
    for (int i = levels - 1; i >= 0; --i) {
      h = apply_block(dec_[static_cast<std::size_t>(i)],
                      concat_channels(h, skips[static_cast<std::size_t>(i)]), temb);
      if (i > 0)
        h = apply_conv(up_[static_cast<std::size_t>(i - 1)], upsample_nearest_2x(h));
    }
    return apply_conv(head_, silu(group_norm(h, cfg_.norm_groups, head_gn_.gamma,
                                             head_gn_.beta)));
  }

  UNetConfig cfg_;
  std::vector<int> channels_;
  std::vector<Tensor<T>> params_;
  std::vector<std::string> names_;

  Tensor<T> time_trunk_w_, time_trunk_b_;
  Conv stem_;
  std::vector<Conv> down_;
  std::vector<Block> enc_;
  Block mid_;
  std::vector<Block> dec_;
  std::vector<Conv> up_;
  Norm head_gn_;
  Conv head_;
};

using UNetF = UNet<float>;

}  // namespace segdiff
