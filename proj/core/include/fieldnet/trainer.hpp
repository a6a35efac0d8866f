#pragma once

#include "fieldnet/imaging.hpp"
#include "fieldnet/losses.hpp"
#include "fieldnet/model.hpp"
#include "fieldnet/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fieldnet {

struct TrainConfig {
  std::filesystem::path dataset;  // index.jsonl written by generate_dataset
  std::filesystem::path out_dir = "train_out";
  int crop_size = 256;
  int batch_size = 8;
  int epochs = 500;
  double lr_initial = 1e-4;
  double lr_final = 1e-6;
  int decay_start_epoch = -1;  // negative: see LrSchedule
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // steps between checkpoints; 0 writes only the final one
  bool hflip = false;
  KlOrder kl_order = KlOrder::kPriorFirst;
  LossWeights weights;
  ModelConfig model;

  // 64 px crops, batch 4, desk model; epochs/lr as above.
  static TrainConfig desk();
  // 256 px crops, batch 8, the 2.7M-parameter model.
  static TrainConfig paper();

  void validate() const;

  // Every field is written, defaults included.
  std::string to_json() const;
  // Keys override the preset named by an optional "preset" key ("desk" or
  // "paper", default "paper"). Unknown keys raise ConfigError naming the key.
  // Relative dataset/out_dir paths are resolved against base_dir when given.
  static TrainConfig from_json(const std::string& text,
                               const std::filesystem::path& base_dir = {});
};

// Returns the name of the first field that differs between two configs in a
// way that affects training (everything except out_dir and
// checkpoint_every), or nothing when they are compatible.
std::optional<std::string> resume_incompatibility(const TrainConfig& a, const TrainConfig& b);

struct TrainSample {
  std::string id;
  ImagePlane shadow;
  ImagePlane shadow_free;
  RegionMask mask;
};

// Loads every entry of an index.jsonl (paths relative to the index file).
// Missing or unreadable files raise DataError naming the index line.
std::vector<TrainSample> load_training_set(const std::filesystem::path& index);

struct StepRecord {
  std::int64_t step = 0;  // 1-based count of completed updates
  double lr = 0.0;
  LossBreakdown loss;
};

// CSV row with the loss-log column order (no trailing newline).
std::string format_log_row(const StepRecord& r);
inline constexpr const char* kLogHeader = "step,lr,l_mse,l_perc,l_e,l_m,l_s,l_b,total";

class Trainer {
 public:
  // Loads the dataset and builds a fresh model from config.model.
  explicit Trainer(TrainConfig config);
  // For tests: use an in-memory training set instead of config.dataset.
  Trainer(TrainConfig config, std::vector<TrainSample> data);

  const TrainConfig& config() const { return config_; }
  const FieldNet<float>& model() const { return model_; }
  std::int64_t steps_per_epoch() const;
  std::int64_t total_steps() const;
  std::int64_t completed_steps() const { return step_; }

  // Restores weights, optimizer state and the step counter. The checkpoint's
  // config must be compatible (resume_incompatibility). On any error the
  // trainer is left untouched.
  void resume(const std::filesystem::path& checkpoint);

  // One optimizer update. Throws NumericError on a non-finite loss.
  StepRecord step();

  // Runs the remaining steps (or at most max_steps), appending to
  // out_dir/train_log.csv and writing checkpoints at the configured cadence
  // plus out_dir/final.ckpt and out_dir/weights.fnwt at the end.
  std::vector<StepRecord> run(std::int64_t max_steps = -1);

  std::vector<std::uint8_t> checkpoint_bytes() const;
  void save_checkpoint(const std::filesystem::path& path) const;

 private:
  struct Batch {
    ad::Tensor<float> x;
    ad::Tensor<float> y;
    ad::Tensor<float> detail;
  };
  Batch make_batch(std::int64_t step, Rng& rng) const;

  TrainConfig config_;
  std::vector<TrainSample> data_;
  FieldNet<float> model_;
  Adam<float> adam_;
  LrSchedule schedule_;
  ProxyExtractor<float> extractor_;
  std::int64_t step_ = 0;
};

struct CheckpointInfo {
  std::int64_t step = 0;
  std::int64_t adam_steps = 0;
  TrainConfig config;
};

// Reads and verifies (CRC) a checkpoint header without touching a trainer.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace fieldnet
