#include "fieldnet/maskdissoc.hpp"

#include "fieldnet/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fieldnet {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared distance transform of a sampled function f (lower envelope of
// parabolas). f holds 0 at sources and +inf elsewhere; infinities are skipped
// so only finite parabolas enter the envelope.
void dt_1d(const std::vector<double>& f, std::vector<double>& out, std::vector<int>& v,
           std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
          (2.0 * (q - p));
      if (s <= z[k]) {
        --k;
        if (k < 0) break;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double diff = static_cast<double>(q - v[j]);
    out[q] = diff * diff + f[v[j]];
  }
}

}  // namespace

DistanceField distance_transform(const RegionMask& mask) {
  const int h = mask.height();
  const int w = mask.width();
  DistanceField field{h, w, std::vector<double>(static_cast<std::size_t>(h) * w, 0.0)};
  const std::size_t foreground = mask.count();
  if (foreground == 0) return field;
  if (foreground == mask.size()) {
    throw DataError("no background reference: mask is entirely foreground");
  }

  std::vector<double> sq(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = mask.values()[i] ? kInf : 0.0;

  const int n = std::max(h, w);
  std::vector<double> f(n), out(n), z(n + 1);
  std::vector<int> v(n);

  // Columns first, then rows. Both passes are exact on integer grids.
  f.resize(h);
  out.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = sq[static_cast<std::size_t>(y) * w + x];
    dt_1d(f, out, v, z);
    for (int y = 0; y < h; ++y) sq[static_cast<std::size_t>(y) * w + x] = out[y];
  }
  f.resize(w);
  out.resize(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = sq[static_cast<std::size_t>(y) * w + x];
    dt_1d(f, out, v, z);
    for (int x = 0; x < w; ++x) sq[static_cast<std::size_t>(y) * w + x] = out[x];
  }
  for (std::size_t i = 0; i < sq.size(); ++i) field.d[i] = std::sqrt(sq[i]);
  return field;
}

MaskPair dissociate(const RegionMask& mask) {
  const DistanceField field = distance_transform(mask);
  MaskPair pair;
  pair.height = mask.height();
  pair.width = mask.width();
  const std::size_t n = mask.size();
  pair.body.assign(n, 0.0f);
  pair.detail.assign(n, 0.0f);

  double max_d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask.values()[i]) max_d = std::max(max_d, field.d[i]);
  }
  if (max_d == 0.0) return pair;

  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.values()[i]) continue;
    const float body = static_cast<float>(field.d[i] / max_d);
    pair.body[i] = body;
    pair.detail[i] = 1.0f - body;
  }
  return pair;
}

std::vector<float> weighted_detail_mask(const MaskPair& pair) { return pair.detail; }

void save_mask_pair(const MaskPair& pair, const RegionMask& mask,
                    const std::filesystem::path& body_path,
                    const std::filesystem::path& detail_path) {
  const std::size_t n = pair.body.size();
  std::vector<float> body(n), detail(n);
  for (std::size_t i = 0; i < n; ++i) {
    const long full = mask.values()[i] ? 65535 : 0;
    const long b = std::clamp(std::lround(pair.body[i] * 65535.0), 0L, full);
    body[i] = static_cast<float>(b / 65535.0);
    detail[i] = static_cast<float>((full - b) / 65535.0);
  }
  save_image(ImagePlane(pair.height, pair.width, 1, std::move(body)), body_path, BitDepth::k16);
  save_image(ImagePlane(pair.height, pair.width, 1, std::move(detail)), detail_path,
             BitDepth::k16);
}

}  // namespace fieldnet
