#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "segdiff/common.hpp"

namespace segdiff {

/// Binary PGM (P5, maxval 255) writer.
inline void write_pgm(const std::filesystem::path& path, int width, int height,
                      const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(width) * height)
    throw std::invalid_argument("write_pgm: " + std::to_string(pixels.size()) +
                                " pixels for " + std::to_string(width) + "x" +
                                std::to_string(height));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("short write to " + path.string());
}

/// Strict reader: validates the header and refuses truncated payloads, so a
/// corrupt file never yields a partial image.
inline std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& width,
                                          int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto next_token = [&]() -> std::string {
    std::string tok;
    while (in) {
      const int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      if (std::isspace(c)) {
        in.get();
        continue;
      }
      break;
    }
    in >> tok;
    return tok;
  };
  if (next_token() != "P5") throw IoError("bad magic in " + path.string());
  int maxval = 0;
  try {
    width = std::stoi(next_token());
    height = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw IoError("corrupt header in " + path.string());
  }
  if (width <= 0 || height <= 0 || maxval != 255)
    throw IoError("unsupported PGM header in " + path.string());
  in.get();  // single whitespace after maxval
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height);
  in.read(reinterpret_cast<char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(pixels.size()))
    throw IoError("truncated pixel data in " + path.string());
  return pixels;
}

/// Affine [-1,1] -> [0,255] quantization used for all image rasters.
inline std::uint8_t quantize_unit(float v) {
  const double b = std::llround((double(v) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(b, 0.0, 255.0));
}

inline float dequantize_unit(std::uint8_t b) { return float(b) / 127.5f - 1.0f; }

inline std::vector<std::uint8_t> image_to_bytes(const std::vector<float>& image) {
  std::vector<std::uint8_t> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = quantize_unit(image[i]);
  return out;
}

inline std::vector<float> bytes_to_image(const std::vector<std::uint8_t>& bytes) {
  std::vector<float> out(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = dequantize_unit(bytes[i]);
  return out;
}

}  // namespace segdiff
