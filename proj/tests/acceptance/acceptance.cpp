// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
// criterion fails.

#include "cli/commands.hpp"
#include "fieldnet/error.hpp"
#include "fieldnet/evaluation.hpp"
#include "fieldnet/maskdissoc.hpp"
#include "fieldnet/synthesis.hpp"
#include "fieldnet/trainer.hpp"
#include "grad_cases.hpp"
#include "test_support.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>

namespace fieldnet {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt_double(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1 ----------------------------------------------------------------------

Verdict gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = testing::grad_cases();
  double worst = 0.0;
  std::string worst_name;
  int checks = 0;
  for (const auto& c : cases) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const GradCheckResult r = c.run(seed);
      ++checks;
      if (!(r.max_relative_error <= worst)) {
        worst = r.max_relative_error;
        worst_name = c.name + " seed " + std::to_string(seed);
      }
    }
  }
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const GradCheckResult r = testing::end_to_end_grad_check(seed);
    ++checks;
    if (!(r.max_relative_error <= worst)) {
      worst = r.max_relative_error;
      worst_name = "model end-to-end seed " + std::to_string(seed);
    }
  }
  const double elapsed = seconds_since(t0);
  return {worst < 1e-4 && elapsed < 120.0,
          std::to_string(cases.size()) + " ops/losses + end-to-end model, " +
              std::to_string(checks) + " checks, max rel err " + fmt_double(worst, 3) + " (" +
              worst_name + "), " + fmt_double(elapsed, 3) + " s"};
}

// ---- 2 ----------------------------------------------------------------------

Verdict distance_transform_exact() {
  Rng rng(2024);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const int h = 1 + static_cast<int>(rng.uniform_int(16));
    const int w = 1 + static_cast<int>(rng.uniform_int(16));
    RegionMask m = testing::random_mask(rng, h, w, rng.uniform(0.3, 0.97));
    m.set(static_cast<int>(rng.uniform_int(h)), static_cast<int>(rng.uniform_int(w)), false);
    const DistanceField d = distance_transform(m);
    const auto oracle = testing::brute_force_edt(m);
    for (std::size_t i = 0; i < oracle.size(); ++i) {
      worst = std::max(worst, std::fabs(d.d[i] - oracle[i]));
    }
  }
  return {worst <= 1e-9, "100 masks up to 16x16, max |DT - brute force| = " + fmt_double(worst, 3)};
}

// ---- 3 ----------------------------------------------------------------------

Verdict dissociation_identity() {
  Rng rng(77);
  std::size_t mismatches = 0, pixels = 0;
  for (int t = 0; t < 100; ++t) {
    const int h = 2 + static_cast<int>(rng.uniform_int(31));
    const int w = 2 + static_cast<int>(rng.uniform_int(31));
    RegionMask m = testing::random_mask(rng, h, w, rng.uniform(0.1, 0.95));
    if (m.count() == m.size()) m.set(0, 0, false);
    const MaskPair p = dissociate(m);
    for (std::size_t i = 0; i < m.size(); ++i) {
      ++pixels;
      if (p.body[i] + p.detail[i] != static_cast<float>(m.values()[i])) ++mismatches;
    }
  }
  return {mismatches == 0, "100 masks, " + std::to_string(pixels) + " pixels, " +
                               std::to_string(mismatches) + " with body + detail != mask"};
}

// ---- 4 ----------------------------------------------------------------------

Verdict compositing_identities() {
  Rng rng(404);
  bool zero_ok = true, one_ok = true;
  double round_trip = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int h = 4 + static_cast<int>(rng.uniform_int(20));
    const int w = 4 + static_cast<int>(rng.uniform_int(20));
    const AffineShadeParams p = sample_shade_params(rng.next_u64());
    // Samples above the largest offset keep shade() out of clamping.
    std::vector<float> v(static_cast<std::size_t>(3) * h * w);
    for (auto& x : v) x = static_cast<float>(rng.uniform(0.1, 1.0));
    const ImagePlane sf(h, w, 3, v);
    const ImagePlane sh = shade(sf, p);
    zero_ok &= composite(sf, sh, ShadowMatte(h, w, 0.0f)) == sf;
    one_ok &= composite(sf, sh, ShadowMatte(h, w, 1.0f)) == sh;
    const auto back = unshade(sh, p);
    for (std::size_t i = 0; i < back.size(); ++i) {
      round_trip = std::max(round_trip, std::fabs(back[i] - sf.samples()[i]));
    }
  }
  return {zero_ok && one_ok && round_trip <= 1e-6,
          std::string("m=0 exact: ") + (zero_ok ? "yes" : "no") + ", m=1 exact: " +
              (one_ok ? "yes" : "no") + ", max shade/recover error " + fmt_double(round_trip, 3)};
}

// ---- 5 ----------------------------------------------------------------------

Verdict pem_moments() {
  Rng rng(5);
  double worst = 0.0;
  int channels = 0;
  for (int t = 0; t < 20; ++t) {
    const ad::Shape s{2, 8, 4 + static_cast<int>(rng.uniform_int(8)),
                      4 + static_cast<int>(rng.uniform_int(8))};
    const auto feat = testing::random_tensor<float>(s, rng, rng.uniform(0.01, 5.0));
    const auto in_sigma = ad::instance_stats(feat).second;
    LatentSample<float> draw;
    draw.a = testing::random_tensor<float>({2, 8, 1, 1}, rng, 2.0);
    draw.b_raw = testing::random_tensor<float>({2, 8, 1, 1}, rng, 1.5);
    draw.b = ad::add_scalar(ad::softplus(draw.b_raw), 1e-5f);
    const auto [mu, sigma] = ad::instance_stats(pem(feat, draw));
    for (std::size_t i = 0; i < mu.numel(); ++i) {
      if (!(in_sigma.data()[i] > 1e-3f)) continue;
      ++channels;
      worst = std::max<double>(worst, std::fabs(mu.data()[i] - draw.a.data()[i]));
      worst = std::max<double>(worst, std::fabs(sigma.data()[i] - draw.b.data()[i]));
    }
  }
  return {worst <= 1e-4 && channels > 0,
          std::to_string(channels) + " channels, max |moment - (a,b)| = " + fmt_double(worst, 3)};
}

// ---- 6 ----------------------------------------------------------------------

Verdict kl_correctness() {
  Rng rng(66);
  double worst = 0.0;
  bool self_zero = true;
  constexpr int kDims = 3;
  constexpr int kDraws = 1000000;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> mp(kDims), lp(kDims), mq(kDims), lq(kDims);
    for (int d = 0; d < kDims; ++d) {
      mp[d] = rng.uniform(-1, 1);
      lp[d] = rng.uniform(-1, 1);
      mq[d] = rng.uniform(-1, 1);
      lq[d] = rng.uniform(-1, 1);
    }
    const ad::Shape s{1, kDims, 1, 1};
    const DiagGaussian<double> p{ad::Tensor<double>::from(s, mp), ad::Tensor<double>::from(s, lp)};
    const DiagGaussian<double> q{ad::Tensor<double>::from(s, mq), ad::Tensor<double>::from(s, lq)};
    const double closed = kl_diag_gaussian(p, q).item();
    self_zero &= kl_diag_gaussian(p, p).item() == 0.0 && kl_diag_gaussian(q, q).item() == 0.0;
    double acc = 0.0;
    for (int i = 0; i < kDraws; ++i) {
      for (int d = 0; d < kDims; ++d) {
        const double z = mp[d] + std::exp(0.5 * lp[d]) * rng.normal();
        acc += testing::gaussian_log_pdf(z, mp[d], lp[d]) - testing::gaussian_log_pdf(z, mq[d], lq[d]);
      }
    }
    worst = std::max(worst, std::fabs(closed - acc / kDraws));
  }
  return {worst <= 0.01 && self_zero, "20 pairs x 1e6 draws, max |closed - MC| = " +
                                          fmt_double(worst, 3) + ", KL(p,p) == 0: " +
                                          (self_zero ? "yes" : "no")};
}

// ---- 7 and 8: shared smoke run -----------------------------------------------

struct SmokeRun {
  std::vector<StepRecord> records;
  LossWeights weights;
  double seconds = 0.0;
  double ema_50 = 0.0;
  double ema_final = 0.0;
  double model_rmse_s = 0.0;
  double identity_rmse_s = 0.0;
  std::optional<FieldNet<float>> model;
};

std::vector<TrainSample> smoke_dataset(const fs::path& dir) {
  std::string manifest;
  for (int i = 0; i < 4; ++i) {
    const std::string name = "sf" + std::to_string(i) + ".png";
    save_image(testing::textured_image(64, 64, 100 + i), dir / name);
    manifest += "{\"shadow_free\": \"" + name + "\", \"procedural\": {\"seed\": " +
                std::to_string(i + 1) + ", \"blur_sigma\": 2.0}}\n";
  }
  testing::write_text(dir / "manifest.jsonl", manifest);
  std::vector<SynthesisFailure> failures;
  std::vector<std::size_t> lines;
  const auto entries = parse_manifest(dir / "manifest.jsonl", failures, &lines);
  SynthesisOptions o;
  o.seed = 8;
  const SynthesisSummary s = generate_dataset(entries, dir / "data", o, lines);
  if (!failures.empty() || !s.failures.empty()) throw DataError("smoke dataset synthesis failed");
  return load_training_set(dir / "data" / "index.jsonl");
}

const SmokeRun& smoke_run() {
  static std::optional<SmokeRun> run;
  if (run) return *run;
  TempDir dir("acceptance_smoke");
  const auto data = smoke_dataset(dir.path());

  TrainConfig cfg = TrainConfig::desk();
  cfg.epochs = 500;  // 4 pairs, batch 4: one step per epoch
  cfg.out_dir = dir / "run";
  SmokeRun r;
  r.weights = cfg.weights;
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(cfg, data);
  r.records = trainer.run();
  r.seconds = seconds_since(t0);

  // Exponential moving average with a 50-step span.
  const double k = 2.0 / (50.0 + 1.0);
  double ema = r.records.front().loss.total;
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    ema = i == 0 ? ema : k * r.records[i].loss.total + (1 - k) * ema;
    if (r.records[i].step == 50) r.ema_50 = ema;
  }
  r.ema_final = ema;

  r.model.emplace(trainer.model());
  for (const auto& s : data) {
    const ImagePlane pred = r.model->infer_map(s.shadow, r.model->config().samples, 0).best;
    r.model_rmse_s += rmse_lab(pred, s.shadow_free, s.mask) / data.size();
    r.identity_rmse_s += rmse_lab(s.shadow, s.shadow_free, s.mask) / data.size();
  }
  run = std::move(r);
  return *run;
}

Verdict loss_composition() {
  const SmokeRun& r = smoke_run();
  const LossWeights& w = r.weights;
  const bool default_weights = w.alpha == 1.0 && w.beta == 0.1 && w.gamma == 0.5;
  double worst = 0.0;
  for (const auto& rec : r.records) {
    const double rel = std::fabs(rec.loss.total - recompose_total(rec.loss, w)) /
                       std::max(1.0, std::fabs(rec.loss.total));
    worst = std::max(worst, rel);
  }
  return {default_weights && worst <= 1e-6 && r.records.size() == 500,
          "weights (" + fmt_double(w.alpha) + ", " + fmt_double(w.beta) + ", " +
              fmt_double(w.gamma) + "), " + std::to_string(r.records.size()) +
              " steps, max |total - recomposed| = " + fmt_double(worst, 3)};
}

Verdict overfit_smoke() {
  const SmokeRun& r = smoke_run();
  const double ratio = r.ema_final / r.ema_50;
  const bool pass = r.records.size() == 500 && ratio < 0.25 && r.seconds < 600.0 &&
                    r.model_rmse_s < r.identity_rmse_s;
  return {pass, "500 steps in " + fmt_double(r.seconds, 3) + " s, EMA " + fmt_double(r.ema_50, 4) +
                    " -> " + fmt_double(r.ema_final, 4) + " (ratio " + fmt_double(ratio, 3) +
                    "), shadow RMSE-LAB model " + fmt_double(r.model_rmse_s, 4) + " vs input " +
                    fmt_double(r.identity_rmse_s, 4)};
}

// ---- 9 ----------------------------------------------------------------------

Verdict map_selection() {
  const FieldNet<float>& model = *smoke_run().model;
  bool pass = true;
  int distinct = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ImagePlane img = testing::textured_image(64, 64, 500 + seed);
    const InferenceResult a = model.infer_map(img, 10, seed);
    const InferenceResult b = model.infer_map(img, 10, seed);
    const auto best = std::max_element(a.log_densities.begin(), a.log_densities.end());
    pass &= a.samples.size() == 10 && a.best_index == best - a.log_densities.begin();
    pass &= a.best == a.samples[a.best_index];
    pass &= a.log_densities == b.log_densities && a.best == b.best && a.samples == b.samples;
    for (int k = 1; k < 10; ++k) distinct += a.log_densities[k] != a.log_densities[0];
  }
  return {pass && distinct > 0, "5 images x K=10: argmax selection and bitwise reruns " +
                                    std::string(pass ? "hold" : "broken") + ", " +
                                    std::to_string(distinct) + "/45 densities distinct from draw 0"};
}

// ---- 10 ---------------------------------------------------------------------

Verdict metric_oracles() {
  const double p = psnr(ImagePlane(16, 16, 3, 0.0f), ImagePlane(16, 16, 3, 0.1f));
  Rng rng(10);
  const ImagePlane img = testing::random_image(rng, 32, 32);
  const double same = ssim(img, img);
  const double consts = ssim(ImagePlane(16, 16, 3, 0.5f), ImagePlane(16, 16, 3, 0.25f));
  const double lab = rmse_lab(ImagePlane(8, 8, 3, 1.0f), ImagePlane(8, 8, 3, 0.0f));
  const bool pass = std::fabs(p - 20.0) <= 1e-6 && std::fabs(same - 1.0) <= 1e-12 &&
                    std::fabs(consts - 0.8001) <= 1e-3 && std::fabs(lab - 33.33) <= 0.1;
  return {pass, "PSNR " + fmt_double(p, 10) + " dB, SSIM(x,x) " + fmt_double(same, 10) +
                    ", SSIM(0.5,0.25) " + fmt_double(consts, 6) + ", RMSE-LAB white/black " +
                    fmt_double(lab, 6)};
}

// ---- 11 ---------------------------------------------------------------------

Verdict complexity_accounting() {
  // 3x3 conv, 16 -> 32 channels, 64x64 output, with bias:
  // 2 * 9 * 16 * 32 * 4096 + 32 * 4096 = 37748736 + 131072.
  const std::uint64_t flops = conv_flops(3, 16, 32, 64, 64, true);
  const std::uint64_t params = count_params(ModelConfig::paper_scale());
  const std::uint64_t built = FieldNet<float>(ModelConfig::paper_scale()).parameter_count();
  const double rel = std::fabs(static_cast<double>(params) - 2.7e6) / 2.7e6;
  return {flops == 37879808u && params == built && rel <= 0.10,
          "conv flops " + std::to_string(flops) + " (hand 37879808), full-scale params " +
              std::to_string(params) + " (" + fmt_double(100 * rel, 3) + "% from 2.7M)"};
}

// ---- 12 ---------------------------------------------------------------------

std::map<std::string, std::vector<std::uint8_t>> snapshot(const fs::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = testing::read_bytes(e.path());
  }
  return files;
}

Verdict reproducibility() {
  TempDir dir("acceptance_repro");
  std::string manifest;
  for (int i = 0; i < 3; ++i) {
    const std::string name = "sf" + std::to_string(i) + ".png";
    save_image(testing::textured_image(64, 64, 300 + i), dir / name);
    manifest += "{\"shadow_free\": \"" + name + "\"}\n";
  }
  testing::write_text(dir / "manifest.jsonl", manifest);
  testing::write_text(dir / "train.json",
                      R"({"preset": "desk", "dataset": "work/data/index.jsonl", "batch_size": 2,
                          "epochs": 3, "checkpoint_every": 2})");
  const fs::path work = dir / "work";
  auto cli = [&](std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) throw Error("cli " + args.back() + " failed: " + err.str());
  };
  auto once = [&] {
    fs::remove_all(work);
    cli({"--seed", "9", "--out", (work / "data").string(), "synth", (dir / "manifest.jsonl").string()});
    cli({"--seed", "9", "--config", (dir / "train.json").string(), "--out", (work / "train").string(), "train"});
    cli({"--seed", "9", "--out", (work / "infer").string(), "infer", "--weights",
         (work / "train" / "weights.fnwt").string(), "--all-samples", (work / "data").string() + "/00000_shadow.png"});
    return snapshot(work);
  };
  const auto first = once();
  const auto second = once();
  std::size_t differing = 0;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) ++differing;
  }
  differing += second.size() > first.size() ? second.size() - first.size() : 0;
  const bool has_all = first.count("data/00000_shadow.png") && first.count("train/train_log.csv") &&
                       first.count("train/weights.fnwt") && first.count("infer/00000_shadow.png");
  return {differing == 0 && has_all, "synth + train + infer twice: " + std::to_string(first.size()) +
                                         " files, " + std::to_string(differing) + " differ"};
}

}  // namespace
}  // namespace fieldnet

int main() {
  using namespace fieldnet;
  const std::pair<const char*, std::function<Verdict()>> criteria[] = {
      {"gradient correctness", gradient_correctness},
      {"distance-transform exactness", distance_transform_exact},
      {"mask-dissociation identity", dissociation_identity},
      {"compositing identities", compositing_identities},
      {"PEM moment contract", pem_moments},
      {"KL correctness", kl_correctness},
      {"loss composition", loss_composition},
      {"overfit smoke run", overfit_smoke},
      {"MAP selection contract", map_selection},
      {"metric oracles", metric_oracles},
      {"complexity accounting", complexity_accounting},
      {"reproducibility", reproducibility},
  };
  int failed = 0;
  int index = 1;
  for (const auto& [name, check] : criteria) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("%s [%d] %s: %s\n", v.pass ? "PASS" : "FAIL", index++, name, v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", 12 - failed, 12);
  return failed == 0 ? 0 : 1;
}
