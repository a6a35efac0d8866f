#include "fieldnet/trainer.hpp"

#include "fieldnet/error.hpp"
#include "fieldnet/maskdissoc.hpp"

#include "byteio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <zlib.h>

namespace fieldnet {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

const char* kl_order_name(KlOrder order) {
  return order == KlOrder::kPriorFirst ? "prior_first" : "posterior_first";
}

nlohmann::ordered_json config_json(const TrainConfig& c, bool with_out_dir) {
  nlohmann::ordered_json j;
  j["dataset"] = c.dataset.generic_string();
  if (with_out_dir) j["out_dir"] = c.out_dir.generic_string();
  j["crop_size"] = c.crop_size;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["lr_initial"] = c.lr_initial;
  j["lr_final"] = c.lr_final;
  j["decay_start_epoch"] = c.decay_start_epoch;
  j["seed"] = c.seed;
  if (with_out_dir) j["checkpoint_every"] = c.checkpoint_every;
  j["hflip"] = c.hflip;
  j["kl_order"] = kl_order_name(c.kl_order);
  j["weights"] = {{"alpha", c.weights.alpha},
                  {"beta", c.weights.beta},
                  {"gamma", c.weights.gamma},
                  {"lambda_p", c.weights.lambda_p}};
  j["model"] = nlohmann::ordered_json::parse(c.model.to_json());
  return j;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open checkpoint '{}'", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct ParsedCheckpoint {
  FieldNet<float> model;
  CheckpointInfo info;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

ParsedCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw DataError("checkpoint is truncated");
  const std::span<const std::uint8_t> body(bytes.data(), bytes.size() - 4);
  detail::ByteReader tail(bytes, bytes.size() - 4, "checkpoint");
  if (tail.u32() != crc32_of(body)) throw DataError("checkpoint is corrupted (CRC mismatch)");

  std::size_t offset = 0;
  FieldNet<float> model = deserialize_weights(body, offset);
  detail::ByteReader in(body, offset, "checkpoint");
  if (in.bytes(4) != std::string_view("FNCK")) throw DataError("checkpoint: missing FNCK section");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw DataError(fmt::format("checkpoint: unsupported version {}", version));
  }
  CheckpointInfo info;
  info.step = static_cast<std::int64_t>(in.u64());
  info.adam_steps = static_cast<std::int64_t>(in.u64());
  const std::string config_text(in.bytes(in.u32()));
  try {
    info.config = TrainConfig::from_json(config_text);
  } catch (const ConfigError& e) {
    throw DataError(fmt::format("checkpoint: stored config is invalid: {}", e.what()));
  }
  const std::uint32_t count = in.u32();
  const auto& params = model.named_parameters();
  if (count != params.size()) throw DataError("checkpoint: optimizer state does not match model");
  std::vector<std::vector<float>> m(count);
  std::vector<std::vector<float>> v(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t numel = in.u32();
    if (numel != params[i].second.numel()) {
      throw DataError(fmt::format("checkpoint: optimizer state for '{}' has wrong size",
                                  params[i].first));
    }
    m[i].resize(numel);
    v[i].resize(numel);
    for (auto& x : m[i]) x = in.f32();
    for (auto& x : v[i]) x = in.f32();
  }
  if (in.remaining() != 0) throw DataError("checkpoint: trailing bytes");
  return {std::move(model), std::move(info), std::move(m), std::move(v)};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(mix_seed(seed, 1), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_int(i)]);
  }
  return order;
}

}  // namespace

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.crop_size = 64;
  c.batch_size = 4;
  c.model = ModelConfig::desk();
  return c;
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.model = ModelConfig::paper_scale();
  return c;
}

void TrainConfig::validate() const {
  if (crop_size < 1) throw ConfigError("crop_size must be >= 1");
  if (crop_size % model.stride_multiple() != 0) {
    throw ConfigError(fmt::format("crop_size {} must be a multiple of {}", crop_size,
                                  model.stride_multiple()));
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(lr_initial > 0.0) || !(lr_final >= 0.0)) throw ConfigError("learning rates must be > 0");
  if (lr_final > lr_initial) throw ConfigError("lr_final must not exceed lr_initial");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  weights.validate();
  model.validate();
}

std::string TrainConfig::to_json() const { return config_json(*this, true).dump(2); }

TrainConfig TrainConfig::from_json(const std::string& text,
                                   const std::filesystem::path& base_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("train config is not valid JSON: {}", e.what()));
  }
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");

  TrainConfig c = TrainConfig::paper();
  if (j.contains("preset")) {
    const auto preset = j["preset"].get<std::string>();
    if (preset == "desk") {
      c = TrainConfig::desk();
    } else if (preset != "paper") {
      throw ConfigError(fmt::format("unknown preset '{}'", preset));
    }
  }
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
    return path;
  };
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "preset") {
        continue;
      } else if (key == "dataset") {
        c.dataset = resolve(value.get<std::string>());
      } else if (key == "out_dir") {
        c.out_dir = resolve(value.get<std::string>());
      } else if (key == "crop_size") {
        c.crop_size = value.get<int>();
      } else if (key == "batch_size") {
        c.batch_size = value.get<int>();
      } else if (key == "epochs") {
        c.epochs = value.get<int>();
      } else if (key == "lr_initial") {
        c.lr_initial = value.get<double>();
      } else if (key == "lr_final") {
        c.lr_final = value.get<double>();
      } else if (key == "decay_start_epoch") {
        c.decay_start_epoch = value.get<int>();
      } else if (key == "seed") {
        c.seed = value.get<std::uint64_t>();
      } else if (key == "checkpoint_every") {
        c.checkpoint_every = value.get<int>();
      } else if (key == "hflip") {
        c.hflip = value.get<bool>();
      } else if (key == "kl_order") {
        const auto order = value.get<std::string>();
        if (order == "prior_first") {
          c.kl_order = KlOrder::kPriorFirst;
        } else if (order == "posterior_first") {
          c.kl_order = KlOrder::kPosteriorFirst;
        } else {
          throw ConfigError(fmt::format("unknown kl_order '{}'", order));
        }
      } else if (key == "weights") {
        for (const auto& [wkey, w] : value.items()) {
          if (wkey == "alpha") {
            c.weights.alpha = w.get<double>();
          } else if (wkey == "beta") {
            c.weights.beta = w.get<double>();
          } else if (wkey == "gamma") {
            c.weights.gamma = w.get<double>();
          } else if (wkey == "lambda_p") {
            c.weights.lambda_p = w.get<double>();
          } else {
            throw ConfigError(fmt::format("unknown train config key 'weights.{}'", wkey));
          }
        }
      } else if (key == "model") {
        try {
          c.model = ModelConfig::from_json(value.dump());
        } catch (const ConfigError& e) {
          throw ConfigError(fmt::format("model: {}", e.what()));
        }
      } else {
        throw ConfigError(fmt::format("unknown train config key '{}'", key));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("bad train config value: {}", e.what()));
  }
  c.validate();
  return c;
}

std::optional<std::string> resume_incompatibility(const TrainConfig& a, const TrainConfig& b) {
  const auto ja = config_json(a, false);
  const auto jb = config_json(b, false);
  for (auto it = ja.begin(); it != ja.end(); ++it) {
    if (it.value() != jb.at(it.key())) return it.key();
  }
  return std::nullopt;
}

std::vector<TrainSample> load_training_set(const std::filesystem::path& index) {
  std::ifstream in(index);
  if (!in) throw DataError(fmt::format("cannot open dataset index '{}'", index.string()));
  const std::filesystem::path dir = index.parent_path();
  std::vector<TrainSample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = fmt::format("{}:{}", index.string(), line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw DataError(fmt::format("{}: not valid JSON", where));
    }
    for (const char* key : {"shadow", "shadow_free", "mask"}) {
      if (!j.contains(key) || !j[key].is_string()) {
        throw DataError(fmt::format("{}: missing '{}'", where, key));
      }
    }
    auto path_of = [&](const char* key) {
      std::filesystem::path p(j[key].get<std::string>());
      return p.is_relative() ? dir / p : p;
    };
    TrainSample s;
    s.id = j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>()
                                                   : fmt::format("{:05d}", line_no - 1);
    try {
      s.shadow = load_image(path_of("shadow"));
      s.shadow_free = load_image(path_of("shadow_free"));
      s.mask = load_mask(path_of("mask"));
    } catch (const Error& e) {
      throw DataError(fmt::format("{}: {}", where, e.what()));
    }
    if (s.shadow.channels() != 3 || !s.shadow.same_dims(s.shadow_free) ||
        s.mask.height() != s.shadow.height() || s.mask.width() != s.shadow.width()) {
      throw DataError(fmt::format("{}: shadow, shadow-free and mask must be matching RGB/mask "
                                  "images",
                                  where));
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string format_log_row(const StepRecord& r) {
  const LossBreakdown& l = r.loss;
  return fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}", r.step, r.lr,
                     l.l_mse, l.l_perc, l.l_e, l.l_m, l.l_s, l.l_b, l.total);
}

Trainer::Trainer(TrainConfig config)
    : Trainer(config, load_training_set(config.dataset)) {}

Trainer::Trainer(TrainConfig config, std::vector<TrainSample> data)
    : config_(std::move(config)),
      data_(std::move(data)),
      model_((config_.validate(), config_.model)),
      adam_(model_.parameters()),
      schedule_{config_.lr_initial, config_.lr_final, config_.epochs, config_.decay_start_epoch} {
  if (data_.empty()) throw DataError("training set is empty");
  for (const auto& s : data_) {
    if (std::min(s.shadow.height(), s.shadow.width()) < config_.crop_size) {
      throw ConfigError(fmt::format("crop_size {} exceeds image '{}' ({}x{})", config_.crop_size,
                                    s.id, s.shadow.width(), s.shadow.height()));
    }
  }
}

std::int64_t Trainer::steps_per_epoch() const {
  const auto n = static_cast<std::int64_t>(data_.size());
  return (n + config_.batch_size - 1) / config_.batch_size;
}

std::int64_t Trainer::total_steps() const { return steps_per_epoch() * config_.epochs; }

Trainer::Batch Trainer::make_batch(std::int64_t step, Rng& rng) const {
  const std::int64_t spe = steps_per_epoch();
  const std::int64_t epoch = step / spe;
  const auto order = epoch_order(data_.size(), config_.seed, epoch);
  const std::size_t begin = static_cast<std::size_t>(step % spe) * config_.batch_size;
  const std::size_t end = std::min(order.size(), begin + config_.batch_size);

  const int size = config_.crop_size;
  std::vector<ImagePlane> xs;
  std::vector<ImagePlane> ys;
  std::vector<float> detail;
  for (std::size_t i = begin; i < end; ++i) {
    const TrainSample& s = data_[order[i]];
    const CropWindow win =
        random_crop_window(s.shadow.height(), s.shadow.width(), size, rng.next_u64());
    ImagePlane x = crop(s.shadow, win);
    ImagePlane y = crop(s.shadow_free, win);
    RegionMask m = crop(s.mask, win);
    if (config_.hflip && rng.uniform() < 0.5) {
      x = flip_horizontal(x);
      y = flip_horizontal(y);
      m = flip_horizontal(m);
    }
    // A crop lying entirely inside the shadow has no boundary to weight.
    if (m.count() == m.size()) {
      detail.insert(detail.end(), m.size(), 0.0f);
    } else {
      const auto w = weighted_detail_mask(dissociate(m));
      detail.insert(detail.end(), w.begin(), w.end());
    }
    xs.push_back(std::move(x));
    ys.push_back(std::move(y));
  }
  Batch b;
  b.x = to_tensor<float>(xs);
  b.y = to_tensor<float>(ys);
  b.detail = ad::Tensor<float>::from({static_cast<int>(xs.size()), 1, size, size},
                                     std::move(detail));
  return b;
}

StepRecord Trainer::step() {
  if (step_ >= total_steps()) throw ConfigError("training already finished");
  const std::int64_t epoch = step_ / steps_per_epoch();
  Rng rng(mix_seed(mix_seed(config_.seed, 2), static_cast<std::uint64_t>(step_)));
  const Batch batch = make_batch(step_, rng);

  adam_.zero_grad();
  const TrainForward<float> fwd = model_.forward_train(batch.x, batch.y, rng);
  const LossTerms<float> terms = total_loss(fwd.output, batch.y, fwd.prior, fwd.posterior,
                                            batch.detail, config_.weights, extractor_,
                                            config_.kl_order);
  StepRecord record;
  record.step = step_ + 1;
  record.lr = schedule_.lr_at(static_cast<int>(epoch));
  record.loss = terms.breakdown();
  const LossBreakdown& l = record.loss;
  for (double v : {l.l_mse, l.l_perc, l.l_e, l.l_m, l.l_s, l.l_b, l.total}) {
    if (!std::isfinite(v)) {
      throw NumericError(fmt::format("non-finite loss at step {} (epoch {}): l_mse={} l_perc={} "
                                     "l_m={} l_s={} l_b={} total={}",
                                     record.step, epoch, l.l_mse, l.l_perc, l.l_m, l.l_s, l.l_b,
                                     l.total));
    }
  }
  ad::backward(terms.total);
  adam_.step(record.lr);
  ++step_;
  return record;
}

std::vector<StepRecord> Trainer::run(std::int64_t max_steps) {
  std::filesystem::create_directories(config_.out_dir);
  const auto log_path = config_.out_dir / "train_log.csv";
  const bool fresh = step_ == 0 || !std::filesystem::exists(log_path);
  std::ofstream log(log_path, fresh ? std::ios::trunc : std::ios::app);
  if (!log) throw DataError(fmt::format("cannot write '{}'", log_path.string()));
  if (fresh) log << kLogHeader << '\n';

  std::vector<StepRecord> records;
  std::int64_t remaining = total_steps() - step_;
  if (max_steps >= 0) remaining = std::min(remaining, max_steps);
  for (std::int64_t i = 0; i < remaining; ++i) {
    records.push_back(step());
    log << format_log_row(records.back()) << '\n';
    log.flush();
    if (config_.checkpoint_every > 0 && step_ % config_.checkpoint_every == 0) {
      const auto dir = config_.out_dir / "checkpoints";
      std::filesystem::create_directories(dir);
      save_checkpoint(dir / fmt::format("step_{:06d}.ckpt", step_));
    }
  }
  save_checkpoint(config_.out_dir / "final.ckpt");
  save_weights(model_, config_.out_dir / "weights.fnwt");
  return records;
}

std::vector<std::uint8_t> Trainer::checkpoint_bytes() const {
  detail::ByteWriter out;
  out.bytes(serialize_weights(model_));
  out.bytes("FNCK");
  out.u32(kCheckpointVersion);
  out.u64(static_cast<std::uint64_t>(step_));
  out.u64(static_cast<std::uint64_t>(adam_.steps()));
  const std::string cfg = config_json(config_, false).dump();
  out.u32(static_cast<std::uint32_t>(cfg.size()));
  out.bytes(cfg);
  const auto& m = adam_.first_moments();
  const auto& v = adam_.second_moments();
  out.u32(static_cast<std::uint32_t>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.u32(static_cast<std::uint32_t>(m[i].size()));
    for (float x : m[i]) out.f32(x);
    for (float x : v[i]) out.f32(x);
  }
  out.u32(crc32_of(out.buffer()));
  return out.take();
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  detail::write_file_atomic(path, checkpoint_bytes());
}

void Trainer::resume(const std::filesystem::path& checkpoint) {
  ParsedCheckpoint parsed = parse_checkpoint(read_bytes(checkpoint));
  if (const auto field = resume_incompatibility(parsed.info.config, config_)) {
    throw ConfigError(fmt::format("checkpoint '{}' was written with a different '{}'",
                                  checkpoint.string(), *field));
  }
  if (parsed.info.step > total_steps()) {
    throw DataError("checkpoint step exceeds the configured run length");
  }
  auto& dst = model_.named_parameters();
  const auto& src = parsed.model.named_parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto values = src[i].second.data();
    std::copy(values.begin(), values.end(), dst[i].second.mutable_data().begin());
  }
  adam_.restore(parsed.info.adam_steps, std::move(parsed.m), std::move(parsed.v));
  step_ = parsed.info.step;
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return parse_checkpoint(read_bytes(path)).info;
}

}  // namespace fieldnet
