#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "segdiff/mask.hpp"
#include "segdiff/schedule.hpp"
#include "segdiff/tensor.hpp"
#include "segdiff/unet.hpp"

namespace segdiff {

enum class SamplerKind { DDPM, DDIM };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::DDIM;
  int num_inference_steps = 0;  // 0 means T/20 for DDIM, T for DDPM
  std::uint64_t seed = 0;

  int resolve_steps(int num_timesteps) const {
    if (num_inference_steps > 0) return num_inference_steps;
    if (kind == SamplerKind::DDPM) return num_timesteps;
    return std::max(1, num_timesteps / 20);
  }
};

/// Evenly spaced descending timestep subsequence including both T and 1.
inline std::vector<int> ddim_timesteps(int num_timesteps, int steps) {
  if (steps < 1 || steps > num_timesteps)
    throw ConfigError("ddim_timesteps: " + std::to_string(steps) +
                      " steps for T=" + std::to_string(num_timesteps));
  std::vector<int> ts(static_cast<std::size_t>(steps));
  if (steps == 1) {
    ts[0] = num_timesteps;
    return ts;
  }
  for (int i = 0; i < steps; ++i)
    ts[static_cast<std::size_t>(steps - 1 - i)] =
        1 + static_cast<int>(std::llround(double(i) * double(num_timesteps - 1) /
                                          double(steps - 1)));
  return ts;
}

/// Runs the full reverse loop from x_T ~ N(0, I). The (encoded) mask channel
/// is concatenated to the current state at every denoising step; Model is any
/// callable (x_with_mask [1,c+1,h,w], {t}) -> eps_hat [1,c,h,w].
template <class Model>
TensorF sample_one(Model&& model, const Mask& mask, const NoiseSchedule& schedule,
                   const SamplerConfig& sampler, Rng& rng, int image_channels = 1) {
  NoGradGuard no_grad;
  const int steps = sampler.resolve_steps(schedule.num_timesteps);
  if (steps > schedule.num_timesteps)
    throw ConfigError("sample: " + std::to_string(steps) + " inference steps for T=" +
                      std::to_string(schedule.num_timesteps));
  if (sampler.kind == SamplerKind::DDPM && steps != schedule.num_timesteps)
    throw ConfigError("sample: DDPM runs the full chain; got " + std::to_string(steps) +
                      " steps for T=" + std::to_string(schedule.num_timesteps));

  TensorF mask_channel = encode_mask<float>(mask, mask.num_classes);
  const int h = mask.height, w = mask.width;
  TensorF x = TensorF::randn(rng, {1, image_channels, h, w});

  if (sampler.kind == SamplerKind::DDIM) {
    const std::vector<int> ts = ddim_timesteps(schedule.num_timesteps, steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const int t = ts[i];
      const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
      TensorF eps_hat = model(concat_channels(x, mask_channel), std::vector<int>{t});
      x = ddim_step(x, t, t_prev, eps_hat, schedule);
    }
  } else {
    for (int t = schedule.num_timesteps; t >= 1; --t) {
      TensorF eps_hat = model(concat_channels(x, mask_channel), std::vector<int>{t});
      TensorF z = t > 1 ? TensorF::randn(rng, x.shape()) : TensorF::zeros(x.shape());
      x = ddpm_step(x, t, eps_hat, z, schedule);
    }
  }
  return x;
}

/// Convenience wrapper around a trained denoiser.
inline TensorF sample_image(const UNetF& model, const Mask& mask,
                            const NoiseSchedule& schedule, const SamplerConfig& sampler,
                            Rng& rng) {
  if (mask.height != model.config().image_size || mask.width != model.config().image_size)
    throw std::invalid_argument("sample: mask " + std::to_string(mask.width) + "x" +
                                std::to_string(mask.height) + " vs model image size " +
                                std::to_string(model.config().image_size));
  const int c = model.config().out_channels;
  return sample_one(
      [&](const TensorF& xin, const std::vector<int>& t) { return model.forward(xin, t); },
      mask, schedule, sampler, rng, c);
}

}  // namespace segdiff
