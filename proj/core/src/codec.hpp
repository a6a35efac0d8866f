#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace fieldnet::detail {

// Decoded raster with interleaved samples (pixel-major).
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::uint32_t maxval = 255;  // 255 or 65535 for PNG; any PNM maxval
  std::vector<std::uint16_t> samples;
};

RawImage read_png(const std::filesystem::path& path);
void write_png(const RawImage& img, const std::filesystem::path& path);

RawImage read_pnm(const std::filesystem::path& path);
void write_pnm(const RawImage& img, const std::filesystem::path& path);

}  // namespace fieldnet::detail
