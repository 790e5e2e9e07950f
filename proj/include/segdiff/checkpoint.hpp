#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "segdiff/schedule.hpp"
#include "segdiff/unet.hpp"

namespace segdiff {

// Checkpoint container format:
//   magic "SGDF", format version (u32 LE), tensor count (u32 LE), then per
//   tensor: name length (u32 LE), name bytes, rank (u32 LE), dims (u32 LE
//   each), raw float32 LE data. An 8-byte trailing checksum holds the sum of
//   all preceding bytes mod 2^64.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<int> dims;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const unsigned char* p;
  std::size_t left;
  std::string file;

  void need(std::size_t n) const {
    if (left < n) throw IoError("truncated checkpoint " + file);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
  void floats(float* dst, std::size_t count) {
    need(count * 4);
    std::memcpy(dst, p, count * 4);
    p += count * 4;
    left -= count * 4;
  }
};

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path,
                             const std::vector<NamedTensor>& tensors) {
  std::string buf;
  buf += "SGDF";
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_u32(buf, static_cast<std::uint32_t>(t.name.size()));
    buf += t.name;
    detail::put_u32(buf, static_cast<std::uint32_t>(t.dims.size()));
    std::int64_t numel = 1;
    for (int d : t.dims) {
      detail::put_u32(buf, static_cast<std::uint32_t>(d));
      numel *= d;
    }
    if (numel != static_cast<std::int64_t>(t.data.size()))
      throw std::invalid_argument("checkpoint tensor '" + t.name + "' dims vs data");
    const std::size_t at = buf.size();
    buf.resize(at + t.data.size() * 4);
    std::memcpy(buf.data() + at, t.data.data(), t.data.size() * 4);
  }
  std::uint64_t checksum = 0;
  for (unsigned char c : buf) checksum += c;
  detail::put_u64(buf, checksum);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 20) throw IoError("truncated checkpoint " + path.string());

  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= std::uint64_t(static_cast<unsigned char>(buf[buf.size() - 8 + i])) << (8 * i);
  std::uint64_t checksum = 0;
  for (std::size_t i = 0; i + 8 < buf.size(); ++i)
    checksum += static_cast<unsigned char>(buf[i]);
  if (checksum != stored)
    throw IoError("checksum mismatch in " + path.string());

  detail::ByteReader r{reinterpret_cast<const unsigned char*>(buf.data()),
                       buf.size() - 8, path.string()};
  if (r.str(4) != "SGDF") throw IoError("bad magic in " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                  path.string());
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.dims.push_back(static_cast<int>(r.u32()));
      numel *= t.dims.back();
    }
    if (numel < 0 || numel > (1ll << 31))
      throw IoError("implausible tensor size in " + path.string());
    t.data.resize(static_cast<std::size_t>(numel));
    r.floats(t.data.data(), t.data.size());
    tensors.push_back(std::move(t));
  }
  if (r.left != 0) throw IoError("trailing bytes in " + path.string());
  return tensors;
}

enum class ModelKind : int {
  Guided = 0,
  GuidedAblated = 1,
  Unconditional = 2,
  Segmenter = 3,
  Encoder = 4,
};

inline std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Guided: return "guided";
    case ModelKind::GuidedAblated: return "guided-ablated";
    case ModelKind::Unconditional: return "unconditional";
    case ModelKind::Segmenter: return "segmenter";
    case ModelKind::Encoder: return "encoder";
  }
  return "unknown";
}

inline void save_model(const std::filesystem::path& path, const UNetF& model,
                       ModelKind kind, std::int64_t train_steps,
                       const NoiseSchedule* schedule) {
  std::vector<NamedTensor> tensors;
  tensors.push_back({"meta/info",
                     {3},
                     {float(int(kind)), float(train_steps), schedule ? 1.0f : 0.0f}});
  const UNetConfig& c = model.config();
  NamedTensor cfg;
  cfg.name = "config/net";
  cfg.data = {float(c.base_channels), float(c.channel_multipliers.size())};
  for (int m : c.channel_multipliers) cfg.data.push_back(float(m));
  cfg.data.push_back(float(c.time_embed_dim));
  cfg.data.push_back(float(c.num_classes));
  cfg.data.push_back(float(c.image_size));
  cfg.data.push_back(float(c.in_channels));
  cfg.data.push_back(float(c.out_channels));
  cfg.data.push_back(float(c.norm_groups));
  cfg.dims = {static_cast<int>(cfg.data.size())};
  tensors.push_back(std::move(cfg));
  if (schedule) {
    NamedTensor b;
    b.name = "schedule/betas";
    b.dims = {schedule->num_timesteps};
    b.data.assign(schedule->betas.begin(), schedule->betas.end());
    tensors.push_back(std::move(b));
  }
  const auto& names = model.parameter_names();
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    NamedTensor t;
    t.name = "param/" + names[i];
    t.dims = params[i].shape();
    t.data.assign(params[i].data().begin(), params[i].data().end());
    tensors.push_back(std::move(t));
  }
  write_checkpoint(path, tensors);
}

struct LoadedModel {
  UNetF model;
  ModelKind kind = ModelKind::Guided;
  std::int64_t train_steps = 0;
  NoiseSchedule schedule;  // num_timesteps == 0 when absent
  std::string path;

  LoadedModel(UNetF m, ModelKind k, std::int64_t steps, NoiseSchedule s, std::string p)
      : model(std::move(m)), kind(k), train_steps(steps), schedule(std::move(s)),
        path(std::move(p)) {}
};

inline LoadedModel load_model(const std::filesystem::path& path) {
  const auto tensors = read_checkpoint(path);
  auto find = [&](const std::string& name) -> const NamedTensor* {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  };
  const NamedTensor* info = find("meta/info");
  const NamedTensor* cfg_t = find("config/net");
  if (!info || info->data.size() != 3 || !cfg_t || cfg_t->data.size() < 8)
    throw IoError("missing metadata in " + path.string());

  UNetConfig cfg;
  std::size_t at = 0;
  cfg.base_channels = int(cfg_t->data[at++]);
  const int n_mults = int(cfg_t->data[at++]);
  if (n_mults < 1 || cfg_t->data.size() != static_cast<std::size_t>(8 + n_mults))
    throw IoError("malformed net config in " + path.string());
  cfg.channel_multipliers.clear();
  for (int i = 0; i < n_mults; ++i) cfg.channel_multipliers.push_back(int(cfg_t->data[at++]));
  cfg.time_embed_dim = int(cfg_t->data[at++]);
  cfg.num_classes = int(cfg_t->data[at++]);
  cfg.image_size = int(cfg_t->data[at++]);
  cfg.in_channels = int(cfg_t->data[at++]);
  cfg.out_channels = int(cfg_t->data[at++]);
  cfg.norm_groups = int(cfg_t->data[at++]);

  Rng init_rng(0);
  LoadedModel out{UNetF(cfg, init_rng), ModelKind(int(info->data[0])),
                  std::int64_t(info->data[1]), NoiseSchedule{}, path.string()};
  if (info->data[2] != 0.0f) {
    const NamedTensor* betas = find("schedule/betas");
    if (!betas) throw IoError("missing schedule in " + path.string());
    out.schedule = NoiseSchedule::from_betas(
        std::vector<double>(betas->data.begin(), betas->data.end()));
  }

  const auto& names = out.model.parameter_names();
  auto& params = out.model.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const NamedTensor* t = find("param/" + names[i]);
    if (!t) throw IoError("missing parameter '" + names[i] + "' in " + path.string());
    if (t->dims != params[i].shape())
      throw IoError("parameter '" + names[i] + "' has shape " +
                    shape_str(t->dims) + ", expected " + shape_str(params[i].shape()) +
                    " in " + path.string());
    std::copy(t->data.begin(), t->data.end(), params[i].data().begin());
  }
  return out;
}

}  // namespace segdiff
