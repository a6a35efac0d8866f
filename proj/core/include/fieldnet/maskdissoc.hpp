#pragma once

#include "fieldnet/imaging.hpp"

#include <filesystem>
#include <vector>

namespace fieldnet {

// Euclidean distance (pixels) from each foreground pixel to the nearest
// background pixel; 0 on background.
struct DistanceField {
  int height = 0;
  int width = 0;
  std::vector<double> d;

  double at(int y, int x) const { return d[static_cast<std::size_t>(y) * width + x]; }
};

// Body (interior-weighted) and detail (boundary-weighted) split of a binary
// mask. body + detail == mask exactly at every pixel.
struct MaskPair {
  int height = 0;
  int width = 0;
  std::vector<float> body;
  std::vector<float> detail;
};

// Exact EDT with the separable lower-envelope algorithm of Felzenszwalb and
// Huttenlocher. Throws DataError("no background reference") when the mask
// has no background pixel and at least one foreground pixel.
DistanceField distance_transform(const RegionMask& mask);

// body = mask * I, detail = mask - body, with I the distance field divided
// by its foreground maximum.
MaskPair dissociate(const RegionMask& mask);

// Per-pixel weights for the boundary loss. Currently the detail mask itself.
std::vector<float> weighted_detail_mask(const MaskPair& pair);

// 16-bit grayscale output. The detail plane is written as mask - body in
// integer code values so the two files sum to the mask exactly.
void save_mask_pair(const MaskPair& pair, const RegionMask& mask,
                    const std::filesystem::path& body_path,
                    const std::filesystem::path& detail_path);

}  // namespace fieldnet
