#include "fieldnet/error.hpp"
#include "fieldnet/evaluation.hpp"
#include "fieldnet/parallel.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace fieldnet {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

RegionMetrics region_metrics(const ImagePlane& pred, const ImagePlane& ref,
                             const RegionMask& mask) {
  RegionMetrics r;
  r.pixels = mask.count();
  if (r.pixels == 0) {
    r.psnr = r.ssim = r.rmse_mae = r.rmse_rms = kNaN;
    return r;
  }
  r.psnr = psnr(pred, ref, mask);
  try {
    r.ssim = ssim(pred, ref, mask);
  } catch (const Error&) {
    r.ssim = kNaN;  // no valid window centred in the region, or image below 11x11
  }
  r.rmse_mae = rmse_lab(pred, ref, mask, LabErrorMode::kMeanAbsolute);
  r.rmse_rms = rmse_lab(pred, ref, mask, LabErrorMode::kRootMeanSquare);
  return r;
}

struct IndexEntry {
  std::string id;
  std::filesystem::path shadow;
  std::filesystem::path shadow_free;
  std::filesystem::path mask;
  std::string error;  // set when the line itself is malformed
};

std::vector<IndexEntry> read_index(const std::filesystem::path& index) {
  std::ifstream in(index);
  if (!in) throw DataError(fmt::format("cannot open index '{}'", index.string()));
  const auto dir = index.parent_path();
  std::vector<IndexEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    IndexEntry e;
    e.id = fmt::format("{:05d}", line_no - 1);
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("id")) e.id = j.at("id").get<std::string>();
      auto path_of = [&](const char* key) {
        std::filesystem::path p(j.at(key).get<std::string>());
        return p.is_relative() ? dir / p : p;
      };
      e.shadow = path_of("shadow");
      e.shadow_free = path_of("shadow_free");
      e.mask = path_of("mask");
    } catch (const nlohmann::json::exception& ex) {
      e.error = fmt::format("line {}: {}", line_no, ex.what());
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

nlohmann::ordered_json number_or_sentinel(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

const char* mode_name(LabErrorMode mode) {
  return mode == LabErrorMode::kMeanAbsolute ? "mae_lab" : "rmse_lab";
}

double mode_value(const RegionMetrics& r, LabErrorMode mode) {
  return mode == LabErrorMode::kMeanAbsolute ? r.rmse_mae : r.rmse_rms;
}

constexpr Region kRegions[] = {Region::kShadow, Region::kNonShadow, Region::kAll};

}  // namespace

const char* region_name(Region r) {
  switch (r) {
    case Region::kShadow:
      return "S";
    case Region::kNonShadow:
      return "NS";
    case Region::kAll:
      return "ALL";
  }
  return "?";
}

const RegionMetrics& MetricsRecord::region(Region r) const {
  switch (r) {
    case Region::kShadow:
      return shadow;
    case Region::kNonShadow:
      return non_shadow;
    case Region::kAll:
      break;
  }
  return all;
}

MetricsRecord evaluate_pair(const std::string& id, const ImagePlane& pred, const ImagePlane& ref,
                            const RegionMask& mask) {
  MetricsRecord rec;
  rec.image_id = id;
  rec.shadow = region_metrics(pred, ref, mask);
  rec.non_shadow = region_metrics(pred, ref, mask.inverted());
  rec.all = region_metrics(pred, ref, RegionMask::full(mask.height(), mask.width()));
  rec.nrss = (pred.height() >= 64 && pred.width() >= 64) ? nrss(pred) : kNaN;
  return rec;
}

EvalResult evaluate_dataset(const EvalOptions& options) {
  const int sources = (options.identity ? 1 : 0) + (!options.pred_dir.empty() ? 1 : 0) +
                      (options.model ? 1 : 0);
  if (sources != 1) {
    throw ConfigError("evaluate_dataset: choose exactly one of predictions, model or identity");
  }
  if (options.resize < 0) throw ConfigError("evaluate_dataset: resize must be >= 0");
  const auto entries = read_index(options.index);
  if (!options.errmap_dir.empty()) std::filesystem::create_directories(options.errmap_dir);

  std::vector<std::optional<MetricsRecord>> records(entries.size());
  std::vector<std::string> errors(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const IndexEntry& e = entries[i];
    if (!e.error.empty()) {
      errors[i] = e.error;
      return;
    }
    try {
      ImagePlane ref = load_image(e.shadow_free);
      RegionMask mask = load_mask(e.mask);
      ImagePlane pred;
      if (options.identity) {
        pred = load_image(e.shadow);
      } else if (options.model) {
        pred = options.model->infer_map(load_image(e.shadow), options.samples, options.seed).best;
      } else {
        pred = load_image(options.pred_dir / (e.id + ".png"));
      }
      if (options.resize > 0) {
        pred = resize_bilinear(pred, options.resize, options.resize);
        ref = resize_bilinear(ref, options.resize, options.resize);
        mask = resize_nearest(mask, options.resize, options.resize);
      }
      if (!pred.same_dims(ref)) throw DataError("prediction and reference differ in size");
      records[i] = evaluate_pair(e.id, pred, ref, mask);
      if (!options.errmap_dir.empty()) {
        save_image(render_error_map(pred, ref), options.errmap_dir / (e.id + "_errmap.png"));
      }
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  });

  EvalResult result;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (records[i]) {
      result.records.push_back(std::move(*records[i]));
    } else {
      result.failures.push_back({entries[i].id, errors[i]});
    }
  }
  return result;
}

MetricsRecord aggregate(const std::vector<MetricsRecord>& records) {
  MetricsRecord mean;
  mean.image_id = "mean";
  auto column = [&](auto get) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
      const double v = get(r);
      if (std::isnan(v)) continue;
      sum += v;
      ++n;
    }
    return n == 0 ? kNaN : sum / static_cast<double>(n);
  };
  for (Region region : kRegions) {
    RegionMetrics& dst = mean.region(region);
    dst.psnr = column([&](const MetricsRecord& r) { return r.region(region).psnr; });
    dst.ssim = column([&](const MetricsRecord& r) { return r.region(region).ssim; });
    dst.rmse_mae = column([&](const MetricsRecord& r) { return r.region(region).rmse_mae; });
    dst.rmse_rms = column([&](const MetricsRecord& r) { return r.region(region).rmse_rms; });
    dst.pixels = 0;
    for (const auto& r : records) dst.pixels += r.region(region).pixels;
  }
  mean.nrss = column([](const MetricsRecord& r) { return r.nrss; });
  return mean;
}

std::string format_metrics_csv(const std::vector<MetricsRecord>& records, LabErrorMode mode) {
  std::string out = "image_id,region,psnr,ssim,rmse,rmse_mode,pixels,nrss\n";
  for (const auto& rec : records) {
    for (Region region : kRegions) {
      const RegionMetrics& r = rec.region(region);
      out += fmt::format("{},{},{:.6f},{:.6f},{:.6f},{},{},{:.6f}\n", rec.image_id,
                         region_name(region), r.psnr, r.ssim, mode_value(r, mode),
                         mode_name(mode), r.pixels, rec.nrss);
    }
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<MetricsRecord>& records, LabErrorMode mode) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out << format_metrics_csv(records, mode);
}

std::string format_metrics_json(const EvalResult& result, const EvalOptions& options) {
  const MetricsRecord mean = aggregate(result.records);
  nlohmann::ordered_json j;
  nlohmann::ordered_json cfg;
  cfg["index"] = options.index.generic_string();
  cfg["source"] = options.identity ? "identity" : options.model ? "model" : "predictions";
  if (!options.pred_dir.empty()) cfg["pred_dir"] = options.pred_dir.generic_string();
  if (options.model) {
    cfg["samples"] = options.samples;
    cfg["seed"] = options.seed;
  }
  cfg["resize"] = options.resize > 0 ? nlohmann::ordered_json(options.resize) : nullptr;
  cfg["resize_filter"] = options.resize > 0 ? "bilinear" : "none";
  cfg["rmse_mode"] = mode_name(options.rmse_mode);
  j["config"] = cfg;
  j["images"] = result.records.size();
  nlohmann::ordered_json regions;
  for (Region region : kRegions) {
    const RegionMetrics& r = mean.region(region);
    regions[region_name(region)] = {{"psnr", number_or_sentinel(r.psnr)},
                                    {"ssim", number_or_sentinel(r.ssim)},
                                    {"rmse", number_or_sentinel(mode_value(r, options.rmse_mode))},
                                    {"mae_lab", number_or_sentinel(r.rmse_mae)},
                                    {"rmse_lab", number_or_sentinel(r.rmse_rms)},
                                    {"pixels", r.pixels}};
  }
  j["mean"] = regions;
  j["nrss"] = number_or_sentinel(mean.nrss);
  nlohmann::ordered_json failures = nlohmann::ordered_json::array();
  for (const auto& f : result.failures) {
    failures.push_back({{"image_id", f.image_id}, {"error", f.message}});
  }
  j["failures"] = failures;
  return j.dump(2) + "\n";
}

std::string format_metrics_table(const MetricsRecord& mean, LabErrorMode mode) {
  std::string out = fmt::format("{:<6}{:>10}{:>10}{:>12}\n", "Region", "PSNR", "SSIM",
                                mode == LabErrorMode::kMeanAbsolute ? "RMSE(MAE)" : "RMSE");
  for (Region region : kRegions) {
    const RegionMetrics& r = mean.region(region);
    out += fmt::format("{:<6}{:>10.3f}{:>10.4f}{:>12.3f}\n", region_name(region), r.psnr, r.ssim,
                       mode_value(r, mode));
  }
  out += fmt::format("NRSS  {:.4f}\n", mean.nrss);
  return out;
}

}  // namespace fieldnet
