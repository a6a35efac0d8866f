#include "cli/commands.hpp"

#include "fieldnet/error.hpp"
#include "fieldnet/evaluation.hpp"
#include "fieldnet/maskdissoc.hpp"
#include "fieldnet/model.hpp"
#include "fieldnet/parallel.hpp"
#include "fieldnet/synthesis.hpp"
#include "fieldnet/trainer.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

namespace fieldnet::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Global {
  fs::path config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  fs::path out;
  int jobs = 0;
  bool verbose = false;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config '{}' is not valid JSON: {}", path.string(), e.what()));
  }
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

// Config-file values for one subcommand. Every key must be claimed by a
// setter; leftovers are reported by name.
class ConfigKeys {
 public:
  explicit ConfigKeys(const fs::path& path, const char* command) : command_(command) {
    if (path.empty()) return;
    j_ = read_json_file(path);
    if (!j_.is_object()) throw ConfigError("config file must hold a JSON object");
  }

  template <typename T>
  void take(const char* key, T& dst) {
    if (!j_.contains(key)) return;
    try {
      dst = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("config key '{}': {}", key, e.what()));
    }
    j_.erase(key);
  }
  void take_path(const char* key, fs::path& dst) {
    std::string s;
    if (!j_.contains(key)) return;
    take(key, s);
    dst = s;
  }
  void finish() const {
    if (!j_.empty()) {
      throw ConfigError(fmt::format("unknown config key '{}' for {}", j_.begin().key(), command_));
    }
  }

 private:
  json j_ = json::object();
  const char* command_;
};

void echo_config(const fs::path& out_dir, const std::string& command, json options,
                 const Global& g) {
  fs::create_directories(out_dir);
  json j;
  j["command"] = command;
  j["options"] = std::move(options);
  j["jobs"] = g.jobs;
  write_text(out_dir / "resolved_config.json", j.dump(2) + "\n");
}

fs::path require_out(const Global& g, const char* command) {
  if (g.out.empty()) throw ConfigError(fmt::format("{}: --out is required", command));
  return g.out;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  fs::path manifest;
  bool dry_run = false;
  double threshold = 0.5;
  ShadeSampling sampling;
};

int cmd_synth(SynthArgs a, const Global& g, std::ostream& out, std::ostream& err) {
  ConfigKeys cfg(g.config, "synth");
  cfg.take_path("manifest", a.manifest);
  cfg.take("threshold", a.threshold);
  cfg.take("gamma_min", a.sampling.gamma_min);
  cfg.take("gamma_max", a.sampling.gamma_max);
  cfg.take("alpha_min", a.sampling.alpha_min);
  cfg.take("alpha_max", a.sampling.alpha_max);
  std::uint64_t seed = g.seed;
  if (!g.seed_set) cfg.take("seed", seed);
  cfg.finish();
  if (a.manifest.empty()) throw ConfigError("synth: a manifest is required");

  SynthesisOptions options;
  options.sampling = a.sampling;
  options.seed = seed;
  options.binarize_threshold = a.threshold;
  options.dry_run = a.dry_run;

  std::vector<SynthesisFailure> failures;
  std::vector<std::size_t> lines;
  const auto entries = parse_manifest(a.manifest, failures, &lines);
  const fs::path out_dir = a.dry_run ? g.out : require_out(g, "synth");
  SynthesisSummary summary = generate_dataset(entries, out_dir, options, lines);
  summary.failures.insert(summary.failures.begin(), failures.begin(), failures.end());
  std::sort(summary.failures.begin(), summary.failures.end(),
            [](const auto& x, const auto& y) { return x.line < y.line; });

  if (!a.dry_run) {
    json o;
    o["manifest"] = a.manifest.generic_string();
    o["out"] = out_dir.generic_string();
    o["seed"] = seed;
    o["threshold"] = a.threshold;
    o["gamma_min"] = a.sampling.gamma_min;
    o["gamma_max"] = a.sampling.gamma_max;
    o["alpha_min"] = a.sampling.alpha_min;
    o["alpha_max"] = a.sampling.alpha_max;
    echo_config(out_dir, "synth", o, g);
  }
  out << fmt::format("{} entries, {} written, {} failed{}\n", entries.size() + failures.size(),
                     summary.written, summary.failures.size(), a.dry_run ? " (dry run)" : "");
  if (!summary.failures.empty()) {
    err << "line  error\n";
    for (const auto& f : summary.failures) err << fmt::format("{:<5} {}\n", f.line, f.message);
    return kExitData;
  }
  return kExitOk;
}

// ---- dissociate ---------------------------------------------------------------

int cmd_dissociate(const fs::path& mask_path, const Global& g, std::ostream& out) {
  ConfigKeys cfg(g.config, "dissociate");
  cfg.finish();
  const fs::path out_dir = require_out(g, "dissociate");
  const RegionMask mask = load_mask(mask_path);
  const MaskPair pair = dissociate(mask);
  fs::create_directories(out_dir);
  const std::string stem = mask_path.stem().string();
  const fs::path body = out_dir / (stem + "_body.png");
  const fs::path detail = out_dir / (stem + "_detail.png");
  save_mask_pair(pair, mask, body, detail);
  json o;
  o["mask"] = mask_path.generic_string();
  o["out"] = out_dir.generic_string();
  echo_config(out_dir, "dissociate", o, g);
  out << fmt::format("wrote {} and {}\n", body.string(), detail.string());
  return kExitOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  fs::path resume;
  int epochs = -1;
};

int cmd_train(const TrainArgs& a, const Global& g, std::ostream& out) {
  if (g.config.empty()) throw ConfigError("train: --config is required");
  TrainConfig config =
      TrainConfig::from_json(read_text_file(g.config), g.config.parent_path());
  if (g.seed_set) {
    config.seed = g.seed;
    config.model.seed = g.seed;
  }
  if (!g.out.empty()) config.out_dir = g.out;
  if (a.epochs >= 0) config.epochs = a.epochs;
  config.validate();

  Trainer trainer(config);
  if (!a.resume.empty()) trainer.resume(a.resume);

  json o = json::parse(config.to_json());
  o["resume"] = a.resume.empty() ? json(nullptr) : json(a.resume.generic_string());
  echo_config(config.out_dir, "train", o, g);

  spdlog::info("training {} steps ({} per epoch), starting at step {}", trainer.total_steps(),
               trainer.steps_per_epoch(), trainer.completed_steps());
  const auto records = trainer.run();
  if (!records.empty()) {
    const StepRecord& last = records.back();
    out << fmt::format("step {} lr {:.3g} total {:.6f} (l_e {:.6f} l_m {:.6f} l_s {:.6f} l_b "
                       "{:.6f})\n",
                       last.step, last.lr, last.loss.total, last.loss.l_e, last.loss.l_m,
                       last.loss.l_s, last.loss.l_b);
  }
  out << fmt::format("wrote {}\n", (config.out_dir / "final.ckpt").string());
  return kExitOk;
}

// ---- infer ------------------------------------------------------------------

struct InferArgs {
  fs::path weights;
  fs::path input;
  int samples = 0;
  bool all_samples = false;
};

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".ppm" || ext == ".pgm" || ext == ".pnm";
}

int cmd_infer(InferArgs a, const Global& g, std::ostream& out) {
  ConfigKeys cfg(g.config, "infer");
  cfg.take_path("weights", a.weights);
  cfg.take_path("input", a.input);
  cfg.take("samples", a.samples);
  cfg.take("all_samples", a.all_samples);
  std::uint64_t seed = g.seed;
  if (!g.seed_set) cfg.take("seed", seed);
  cfg.finish();
  if (a.weights.empty()) throw ConfigError("infer: --weights is required");
  if (a.input.empty()) throw ConfigError("infer: an input image or directory is required");
  const fs::path out_dir = require_out(g, "infer");

  const FieldNet<float> model = load_weights(a.weights);
  const int k = a.samples > 0 ? a.samples : model.config().samples;

  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    for (const auto& e : fs::directory_iterator(a.input)) {
      if (e.is_regular_file() && is_image_file(e.path())) inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(a.input);
  }
  fs::create_directories(out_dir);

  std::vector<std::string> errors(inputs.size());
  parallel_for(inputs.size(), [&](std::size_t i) {
    try {
      const ImagePlane image = load_image(inputs[i]);
      const InferenceResult r = model.infer_map(image, k, seed);
      const std::string stem = inputs[i].stem().string();
      save_image(r.best, out_dir / (stem + ".png"));
      if (a.all_samples) {
        for (int s = 0; s < k; ++s) {
          save_image(r.samples[s], out_dir / fmt::format("{}_sample_{:02d}.png", stem, s));
        }
        json meta;
        meta["input"] = inputs[i].filename().generic_string();
        meta["samples"] = k;
        meta["seed"] = seed;
        meta["best_index"] = r.best_index;
        meta["log_densities"] = r.log_densities;
        write_text(out_dir / (stem + "_samples.json"), meta.dump(2) + "\n");
      }
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  json o;
  o["weights"] = a.weights.generic_string();
  o["input"] = a.input.generic_string();
  o["samples"] = k;
  o["seed"] = seed;
  o["all_samples"] = a.all_samples;
  echo_config(out_dir, "infer", o, g);

  std::size_t failed = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (errors[i].empty()) continue;
    ++failed;
    spdlog::error("{}: {}", inputs[i].string(), errors[i]);
  }
  out << fmt::format("{} images, {} failed\n", inputs.size(), failed);
  if (inputs.size() == 1 && failed == 1) throw DataError(errors[0]);
  return failed == 0 ? kExitOk : kExitData;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  fs::path index;
  fs::path pred_dir;
  fs::path weights;
  bool identity = false;
  int samples = 10;
  int resize = 0;
  bool strict_rmse = false;
  bool errmaps = false;
};

int cmd_eval(EvalArgs a, const Global& g, std::ostream& out) {
  ConfigKeys cfg(g.config, "eval");
  cfg.take_path("index", a.index);
  cfg.take_path("pred_dir", a.pred_dir);
  cfg.take_path("weights", a.weights);
  cfg.take("identity", a.identity);
  cfg.take("samples", a.samples);
  cfg.take("resize", a.resize);
  cfg.take("strict_rmse", a.strict_rmse);
  cfg.take("errmaps", a.errmaps);
  std::uint64_t seed = g.seed;
  if (!g.seed_set) cfg.take("seed", seed);
  cfg.finish();
  if (a.index.empty()) throw ConfigError("eval: --index is required");
  const fs::path out_dir = require_out(g, "eval");

  std::optional<FieldNet<float>> model;
  EvalOptions options;
  options.index = a.index;
  options.pred_dir = a.pred_dir;
  options.identity = a.identity;
  if (!a.weights.empty()) {
    model.emplace(load_weights(a.weights));
    options.model = &*model;
  }
  options.samples = a.samples;
  options.seed = seed;
  options.resize = a.resize;
  options.rmse_mode = a.strict_rmse ? LabErrorMode::kRootMeanSquare : LabErrorMode::kMeanAbsolute;
  if (a.errmaps) options.errmap_dir = out_dir / "errmaps";

  fs::create_directories(out_dir);
  const EvalResult result = evaluate_dataset(options);
  write_metrics_csv(out_dir / "metrics.csv", result.records, options.rmse_mode);
  write_text(out_dir / "metrics.json", format_metrics_json(result, options));

  json o;
  o["index"] = a.index.generic_string();
  o["pred_dir"] = a.pred_dir.empty() ? json(nullptr) : json(a.pred_dir.generic_string());
  o["weights"] = a.weights.empty() ? json(nullptr) : json(a.weights.generic_string());
  o["identity"] = a.identity;
  o["samples"] = a.samples;
  o["seed"] = seed;
  o["resize"] = a.resize;
  o["strict_rmse"] = a.strict_rmse;
  o["errmaps"] = a.errmaps;
  echo_config(out_dir, "eval", o, g);

  out << format_metrics_table(aggregate(result.records), options.rmse_mode);
  for (const auto& f : result.failures) spdlog::error("{}: {}", f.image_id, f.message);
  return result.failures.empty() ? kExitOk : kExitData;
}

// ---- bench ------------------------------------------------------------------

struct BenchArgs {
  fs::path weights;
  std::string preset = "desk";
  int height = 256;
  int width = 256;
  int runs = 50;
  int samples = 1;
};

int cmd_bench(BenchArgs a, const Global& g, std::ostream& out) {
  ConfigKeys cfg(g.config, "bench");
  cfg.take_path("weights", a.weights);
  cfg.take("preset", a.preset);
  cfg.take("height", a.height);
  cfg.take("width", a.width);
  cfg.take("runs", a.runs);
  cfg.take("samples", a.samples);
  std::uint64_t seed = g.seed;
  if (!g.seed_set) cfg.take("seed", seed);
  cfg.finish();
  const fs::path out_dir = require_out(g, "bench");

  ModelConfig mc;
  if (a.preset == "desk") {
    mc = ModelConfig::desk();
  } else if (a.preset == "paper") {
    mc = ModelConfig::paper_scale();
  } else {
    throw ConfigError(fmt::format("bench: unknown preset '{}'", a.preset));
  }
  mc.seed = seed;
  const FieldNet<float> model = a.weights.empty() ? FieldNet<float>(mc) : load_weights(a.weights);
  // Timings are taken on one thread.
  set_max_jobs(1);
  const ComplexityReport r = benchmark(model, a.height, a.width, a.runs, a.samples);
  const ComplexityAccount account = count_flops(model.config(), a.height, a.width);

  json report;
  report["params"] = r.params;
  report["inference_params"] = account.inference_params;
  report["flops"] = r.flops;
  report["gflops"] = static_cast<double>(r.flops) / 1e9;
  report["height"] = r.height;
  report["width"] = r.width;
  report["samples"] = r.samples;
  report["runs"] = r.runs;
  report["mean_ms"] = r.mean_ms;
  report["std_ms"] = r.std_ms;
  report["fps"] = r.fps;
  fs::create_directories(out_dir);
  write_text(out_dir / "bench.json", report.dump(2) + "\n");

  json o;
  o["weights"] = a.weights.empty() ? json(nullptr) : json(a.weights.generic_string());
  o["preset"] = a.weights.empty() ? json(a.preset) : json(nullptr);
  o["height"] = a.height;
  o["width"] = a.width;
  o["runs"] = a.runs;
  o["samples"] = a.samples;
  o["seed"] = seed;
  echo_config(out_dir, "bench", o, g);

  out << fmt::format("params {:.3f}M  flops {:.3f}G  time {:.2f} +- {:.2f} ms  fps {:.2f}\n",
                     r.params / 1e6, r.flops / 1e9, r.mean_ms, r.std_ms, r.fps);
  return kExitOk;
}

// ---- errmap -----------------------------------------------------------------

int cmd_errmap(const fs::path& pred, const fs::path& ref, const Global& g, std::ostream& out) {
  ConfigKeys cfg(g.config, "errmap");
  cfg.finish();
  const fs::path out_dir = require_out(g, "errmap");
  const ImagePlane p = load_image(pred);
  const ImagePlane r = load_image(ref);
  if (!p.same_dims(r)) throw DataError("errmap: images differ in size");
  fs::create_directories(out_dir);
  const fs::path path = out_dir / "errmap.png";
  save_image(render_error_map(p, r), path);
  json o;
  o["pred"] = pred.generic_string();
  o["ref"] = ref.generic_string();
  echo_config(out_dir, "errmap", o, g);
  out << fmt::format("wrote {}\n", path.string());
  return kExitOk;
}

void configure_logging(std::ostream& err, bool verbose) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto logger = std::make_shared<spdlog::logger>("fieldnet", sink);
  logger->set_pattern("[%l] %v");
  logger->set_level(verbose ? spdlog::level::info : spdlog::level::warn);
  spdlog::set_default_logger(logger);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shadow synthesis, training, inference and evaluation for FieldNet"};
  app.require_subcommand(1);
  app.fallthrough();

  Global g;
  app.add_option("--config", g.config, "JSON configuration file");
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--jobs", g.jobs, "Maximum worker threads (0 = all cores)")
      ->check(CLI::NonNegativeNumber);
  app.add_flag("--verbose,-v", g.verbose, "Log progress");

  std::function<int()> action;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate shadow/shadow-free pairs from a manifest");
  s->add_option("manifest", synth.manifest, "JSON-lines manifest");
  s->add_flag("--dry-run", synth.dry_run, "Validate the manifest without writing");
  s->add_option("--threshold", synth.threshold, "Matte binarization threshold");
  s->callback([&] { action = [&] { return cmd_synth(synth, g, out, err); }; });

  fs::path mask_path;
  auto* d = app.add_subcommand("dissociate", "Split a mask into body and detail parts");
  d->add_option("mask", mask_path, "Binary mask image")->required();
  d->callback([&] { action = [&] { return cmd_dissociate(mask_path, g, out); }; });

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model from a JSON config");
  t->add_option("--resume", train.resume, "Checkpoint to continue from");
  t->add_option("--epochs", train.epochs, "Override the configured epoch count");
  t->callback([&] { action = [&] { return cmd_train(train, g, out); }; });

  InferArgs infer;
  auto* i = app.add_subcommand("infer", "Remove shadows from an image or a directory");
  i->add_option("input", infer.input, "Image file or directory");
  i->add_option("--weights", infer.weights, "Weight archive or checkpoint");
  i->add_option("--samples,-k", infer.samples, "Latent samples K (default: model config)");
  i->add_flag("--all-samples", infer.all_samples, "Also write every sample and their densities");
  i->callback([&] { action = [&] { return cmd_infer(infer, g, out); }; });

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Region-wise metrics over a dataset index");
  e->add_option("--index", eval.index, "index.jsonl with shadow, shadow_free and mask");
  e->add_option("--pred-dir", eval.pred_dir, "Directory of <id>.png predictions");
  e->add_option("--weights", eval.weights, "Run this model instead of reading predictions");
  e->add_flag("--identity", eval.identity, "Score the shadow input itself");
  e->add_option("--samples,-k", eval.samples, "Latent samples when running a model");
  e->add_option("--resize", eval.resize, "Bilinear resize to NxN before scoring");
  e->add_flag("--strict-rmse", eval.strict_rmse, "Report root-mean-square LAB error");
  e->add_flag("--errmaps", eval.errmaps, "Write per-image error maps");
  e->callback([&] { action = [&] { return cmd_eval(eval, g, out); }; });

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Parameter, FLOP and timing report");
  b->add_option("--weights", bench.weights, "Weight archive (default: untrained preset)");
  b->add_option("--preset", bench.preset, "desk or paper");
  b->add_option("--height", bench.height, "Input height");
  b->add_option("--width", bench.width, "Input width");
  b->add_option("--runs", bench.runs, "Timed runs (>= 10)");
  b->add_option("--samples,-k", bench.samples, "Latent samples per run");
  b->callback([&] { action = [&] { return cmd_bench(bench, g, out); }; });

  fs::path pred_path, ref_path;
  auto* m = app.add_subcommand("errmap", "Colour-mapped absolute error between two images");
  m->add_option("pred", pred_path, "Predicted image")->required();
  m->add_option("ref", ref_path, "Reference image")->required();
  m->callback([&] { action = [&] { return cmd_errmap(pred_path, ref_path, g, out); }; });

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  }

  g.seed_set = seed_opt->count() > 0;
  configure_logging(err, g.verbose);
  set_max_jobs(g.jobs);
  try {
    return action();
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const DataError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitData;
  } catch (const NumericError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace fieldnet::cli
