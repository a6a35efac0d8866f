#pragma once

#include "fieldnet/imaging.hpp"
#include "fieldnet/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace fieldnet {

// ---- pixel metrics --------------------------------------------------------

// 10 log10(1 / MSE) with peak 1 over all channels of the masked pixels.
// Returns +infinity when MSE is 0. Throws DataError("empty region") for an
// empty mask and ConfigError on size mismatch.
double psnr(const ImagePlane& pred, const ImagePlane& ref);
double psnr(const ImagePlane& pred, const ImagePlane& ref, const RegionMask& mask);

// Mean local SSIM on the luma channel: 11x11 Gaussian window (sigma 1.5),
// valid windows only, K1 = 0.01, K2 = 0.03, dynamic range 1. The masked form
// averages the windows whose centre pixel lies in the mask.
double ssim(const ImagePlane& pred, const ImagePlane& ref);
double ssim(const ImagePlane& pred, const ImagePlane& ref, const RegionMask& mask);

enum class LabErrorMode {
  kMeanAbsolute,  // mean |dL|, |da|, |db| over pixels and channels (literature "RMSE")
  kRootMeanSquare,
};

double rmse_lab(const ImagePlane& pred, const ImagePlane& ref,
                LabErrorMode mode = LabErrorMode::kMeanAbsolute);
double rmse_lab(const ImagePlane& pred, const ImagePlane& ref, const RegionMask& mask,
                LabErrorMode mode = LabErrorMode::kMeanAbsolute);

struct NrssOptions {
  int blur_size = 7;
  double blur_sigma = 1.5;
  int block = 8;
  int blocks = 64;
};

// No-reference sharpness: 1 - mean SSIM between the Sobel gradient maps of
// the image and of its Gaussian-blurred copy, over the `blocks` blocks with
// the highest gradient variance. Needs at least 64x64 pixels.
double nrss(const ImagePlane& img, const NrssOptions& options = {});

// ---- complexity -------------------------------------------------------------

// 2 k^2 Cin Cout Ho Wo, plus Ho Wo Cout when a bias is added.
std::uint64_t conv_flops(int kernel, int in_channels, int out_channels, int out_h, int out_w,
                         bool bias);

struct LayerCost {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct ComplexityAccount {
  std::vector<LayerCost> layers;  // inference graph, one latent sample
  std::uint64_t params = 0;       // every trainable parameter (incl. posterior branch)
  std::uint64_t inference_params = 0;
  std::uint64_t flops = 0;        // encoder + prior heads + one PEM/decoder pass
  std::uint64_t flops_per_extra_sample = 0;
};

// Analytic walk of the layer graph for an H x W input. Elementwise ops
// (activations, upsampling, PEM arithmetic, pooling) cost 1 flop per
// element per operation.
ComplexityAccount count_flops(const ModelConfig& config, int height, int width);
std::uint64_t count_params(const FieldNet<float>& model);
std::uint64_t count_params(const ModelConfig& config);

struct ComplexityReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  int height = 0;
  int width = 0;
  int samples = 1;
  int runs = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double fps = 0.0;
};

// Five warmup calls, then `runs` timed infer_map calls with `samples`
// latent draws on a fixed random image. Single threaded.
ComplexityReport benchmark(const FieldNet<float>& model, int height, int width, int runs,
                           int samples = 1);

// ---- dataset evaluation -----------------------------------------------------

enum class Region { kShadow, kNonShadow, kAll };
const char* region_name(Region r);  // "S", "NS", "ALL"

struct RegionMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double rmse_mae = 0.0;   // mean-absolute LAB error
  double rmse_rms = 0.0;   // root-mean-square LAB error
  std::size_t pixels = 0;  // 0 marks an empty region; metrics are NaN then
};

struct MetricsRecord {
  std::string image_id;
  RegionMetrics shadow;
  RegionMetrics non_shadow;
  RegionMetrics all;
  double nrss = 0.0;  // NaN when the image is smaller than 64x64

  const RegionMetrics& region(Region r) const;
  RegionMetrics& region(Region r) {
    return const_cast<RegionMetrics&>(std::as_const(*this).region(r));
  }
};

MetricsRecord evaluate_pair(const std::string& id, const ImagePlane& pred, const ImagePlane& ref,
                            const RegionMask& mask);

struct EvalOptions {
  std::filesystem::path index;     // index.jsonl with shadow, shadow_free, mask
  std::filesystem::path pred_dir;  // predictions named <id>.png
  const FieldNet<float>* model = nullptr;  // used when pred_dir is empty
  bool identity = false;  // score the shadow input itself
  int samples = 10;
  std::uint64_t seed = 0;
  int resize = 0;  // square side for bilinear resizing before scoring; 0 keeps size
  LabErrorMode rmse_mode = LabErrorMode::kMeanAbsolute;
  std::filesystem::path errmap_dir;  // optional error maps <id>_errmap.png
};

struct EvalFailure {
  std::string image_id;
  std::string message;
};

struct EvalResult {
  std::vector<MetricsRecord> records;
  std::vector<EvalFailure> failures;
};

// Per-entry failures are collected; the run continues.
EvalResult evaluate_dataset(const EvalOptions& options);

// Column means over records (NaN entries skipped).
MetricsRecord aggregate(const std::vector<MetricsRecord>& records);

// CSV: image_id,region,psnr,ssim,rmse,rmse_mode,pixels,nrss.
void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRecord>& records, LabErrorMode mode);
std::string format_metrics_csv(const std::vector<MetricsRecord>& records, LabErrorMode mode);
// Aggregate JSON with both LAB conventions, failures and an options echo.
std::string format_metrics_json(const EvalResult& result, const EvalOptions& options);
// S / NS / ALL table for terminal output.
std::string format_metrics_table(const MetricsRecord& mean, LabErrorMode mode);

}  // namespace fieldnet
