#include "cli/commands.hpp"
#include "fieldnet/imaging.hpp"
#include "fieldnet/model.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sstream>

namespace fieldnet {
namespace {

using testing::TempDir;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    std::string manifest;
    for (int i = 0; i < 3; ++i) {
      const std::string name = "sf" + std::to_string(i) + ".png";
      save_image(testing::textured_image(32, 32, i), dir_ / name);
      manifest += "{\"shadow_free\": \"" + name + "\", \"procedural\": {\"seed\": " +
                  std::to_string(i + 1) + ", \"blur_sigma\": 1.5}}\n";
    }
    testing::write_text(dir_ / "manifest.jsonl", manifest);
    ModelConfig cfg;
    cfg.ladder = {4, 8};
    cfg.latent_channels = 8;
    FieldNet<float> model(cfg);
    // Spread the latent heads so samples differ.
    Rng rng(3);
    for (auto& [name, p] : model.named_parameters()) {
      if (name.rfind("prior.", 0) == 0) {
        for (auto& v : p.mutable_data()) v = static_cast<float>(0.2 * rng.normal());
      }
    }
    save_weights(model, dir_ / "tiny.fnwt");
  }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }

  void synth() {
    ASSERT_EQ(run_cli({"--out", p("data"), "--seed", "5", "synth", p("manifest.jsonl")}).code, 0);
  }

  TempDir dir_{"cli"};
};

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({"infer", "--help"}).code, 0);
  EXPECT_EQ(run_cli({}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"paint"}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"--jobs", "-2", "synth"}).code, cli::kExitUsage);
}

TEST_F(Cli, UnknownConfigKeyIsNamed) {
  testing::write_text(dir_ / "c.json", R"({"samples": 2, "colour": 1})");
  const Outcome o = run_cli({"--config", p("c.json"), "--out", p("o"), "infer"});
  EXPECT_EQ(o.code, cli::kExitUsage);
  EXPECT_NE(o.err.find("'colour'"), std::string::npos) << o.err;
  testing::write_text(dir_ / "t.json", R"({"preset": "desk", "warmup": 3})");
  const Outcome t = run_cli({"--config", p("t.json"), "train"});
  EXPECT_EQ(t.code, cli::kExitUsage);
  EXPECT_NE(t.err.find("'warmup'"), std::string::npos) << t.err;
}

TEST_F(Cli, SynthWritesDatasetAndReportsBadLines) {
  synth();
  EXPECT_TRUE(std::filesystem::exists(dir_ / "data" / "index.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(dir_ / "data" / "00002_shadow.png"));
  const auto resolved = nlohmann::json::parse(testing::read_text(dir_ / "data" / "resolved_config.json"));
  EXPECT_EQ(resolved["command"], "synth");
  EXPECT_EQ(resolved["options"]["seed"], 5);

  testing::write_text(dir_ / "bad.jsonl", "{\"shadow_free\": \"sf0.png\"}\n{\"oops\": 1}\n");
  const Outcome o = run_cli({"--out", p("bad"), "synth", p("bad.jsonl")});
  EXPECT_EQ(o.code, cli::kExitData);
  EXPECT_NE(o.err.find("2     "), std::string::npos) << o.err;
  const Outcome dry = run_cli({"synth", "--dry-run", p("manifest.jsonl")});
  EXPECT_EQ(dry.code, 0);
  EXPECT_NE(dry.out.find("dry run"), std::string::npos);
}

TEST_F(Cli, DissociateWritesPairAndRejectsFullMask) {
  RegionMask m(20, 20);
  for (int y = 5; y < 15; ++y)
    for (int x = 4; x < 16; ++x) m.set(y, x, true);
  save_mask(m, dir_ / "blob.png");
  ASSERT_EQ(run_cli({"--out", p("d"), "dissociate", p("blob.png")}).code, 0);
  const ImagePlane body = load_image(dir_ / "d" / "blob_body.png");
  const ImagePlane detail = load_image(dir_ / "d" / "blob_detail.png");
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) {
      const long sum = std::lround(body.at(0, y, x) * 65535.0) + std::lround(detail.at(0, y, x) * 65535.0);
      EXPECT_EQ(sum, m.at(y, x) ? 65535 : 0);
    }
  save_mask(RegionMask::full(8, 8), dir_ / "full.png");
  const Outcome o = run_cli({"--out", p("d"), "dissociate", p("full.png")});
  EXPECT_EQ(o.code, cli::kExitData);
  EXPECT_NE(o.err.find("background"), std::string::npos);
}

TEST_F(Cli, InferSingleAllSamplesAndReproducible) {
  save_image(testing::textured_image(20, 28, 9), dir_ / "in.png");
  ASSERT_EQ(run_cli({"--out", p("one"), "infer", "--weights", p("tiny.fnwt"), "-k", "1", p("in.png")}).code, 0);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir_ / "one")) files += e.path().extension() == ".png";
  EXPECT_EQ(files, 1u);
  EXPECT_EQ(load_image(dir_ / "one" / "in.png").width(), 28);

  for (const char* out : {"all_a", "all_b"}) {
    ASSERT_EQ(run_cli({"--out", p(out), "--seed", "4", "infer", "--weights", p("tiny.fnwt"),
                       "--all-samples", "-k", "10", p("in.png")})
                  .code,
              0);
  }
  const auto meta = nlohmann::json::parse(testing::read_text(dir_ / "all_a" / "in_samples.json"));
  const std::vector<double> dens = meta["log_densities"];
  ASSERT_EQ(dens.size(), 10u);
  EXPECT_EQ(meta["best_index"], std::max_element(dens.begin(), dens.end()) - dens.begin());
  for (int k = 0; k < 10; ++k) {
    const std::string name = "in_sample_" + std::string(k < 10 ? "0" : "") + std::to_string(k) + ".png";
    EXPECT_TRUE(std::filesystem::exists(dir_ / "all_a" / name)) << name;
  }
  for (const auto& e : std::filesystem::directory_iterator(dir_ / "all_a")) {
    EXPECT_EQ(testing::read_bytes(e.path()), testing::read_bytes(dir_ / "all_b" / e.path().filename()))
        << e.path();
  }
}

TEST_F(Cli, InferErrors) {
  EXPECT_EQ(run_cli({"--out", p("x"), "infer", "--weights", p("tiny.fnwt"), p("nope.png")}).code,
            cli::kExitData);
  testing::write_text(dir_ / "junk.fnwt", "garbage");
  save_image(testing::textured_image(8, 8, 1), dir_ / "in.png");
  EXPECT_EQ(run_cli({"--out", p("x"), "infer", "--weights", p("junk.fnwt"), p("in.png")}).code,
            cli::kExitData);
  EXPECT_EQ(run_cli({"--out", p("x"), "infer", p("in.png")}).code, cli::kExitUsage);
}

TEST_F(Cli, EvalReferencesAgainstThemselves) {
  synth();
  std::filesystem::create_directories(dir_ / "pred");
  for (const char* id : {"00000", "00001", "00002"}) {
    std::filesystem::copy_file(dir_ / "data" / (std::string(id) + "_shadow_free.png"),
                               dir_ / "pred" / (std::string(id) + ".png"));
  }
  const Outcome o = run_cli({"--out", p("ev"), "eval", "--index", p("data/index.jsonl"),
                             "--pred-dir", p("pred")});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("ALL"), std::string::npos);
  const auto j = nlohmann::json::parse(testing::read_text(dir_ / "ev" / "metrics.json"));
  EXPECT_NE(j.dump().find("\"inf\""), std::string::npos);
  const std::string csv = testing::read_text(dir_ / "ev" / "metrics.csv");
  EXPECT_NE(csv.find("00000,ALL,inf,1.000000,0.000000"), std::string::npos) << csv;

  const Outcome model = run_cli({"--out", p("ev2"), "eval", "--index", p("data/index.jsonl"),
                                 "--weights", p("tiny.fnwt"), "-k", "2", "--strict-rmse"});
  EXPECT_EQ(model.code, 0) << model.err;
  EXPECT_NE(testing::read_text(dir_ / "ev2" / "metrics.csv").find(",rmse_lab,"), std::string::npos);
}

TEST_F(Cli, BenchReportsFpsFromMeanTime) {
  const Outcome o = run_cli({"--out", p("b"), "bench", "--weights", p("tiny.fnwt"), "--height",
                             "16", "--width", "16", "--runs", "10"});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = nlohmann::json::parse(testing::read_text(dir_ / "b" / "bench.json"));
  EXPECT_DOUBLE_EQ(j["fps"].get<double>(), 1000.0 / j["mean_ms"].get<double>());
  EXPECT_EQ(run_cli({"--out", p("b"), "bench", "--runs", "3"}).code, cli::kExitUsage);
  EXPECT_EQ(run_cli({"--out", p("b"), "bench", "--preset", "giant"}).code, cli::kExitUsage);
}

TEST_F(Cli, ErrmapOfIdenticalImagesIsFlat) {
  save_image(testing::textured_image(12, 12, 2), dir_ / "a.png");
  ASSERT_EQ(run_cli({"--out", p("e"), "errmap", p("a.png"), p("a.png")}).code, 0);
  const ImagePlane map = load_image(dir_ / "e" / "errmap.png");
  const auto& lut = error_colormap();
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(std::lround(map.at(c, y, x) * 255.0), lut[0][c]);
  save_image(testing::textured_image(10, 12, 2), dir_ / "b.png");
  EXPECT_EQ(run_cli({"--out", p("e"), "errmap", p("a.png"), p("b.png")}).code, cli::kExitData);
}

TEST_F(Cli, TrainWritesArtifactsAndMapsDivergence) {
  synth();
  const std::string base = R"("dataset": "data/index.jsonl", "crop_size": 16, "batch_size": 2,
      "epochs": 2, "model": {"ladder": [4, 8], "latent_channels": 8})";
  testing::write_text(dir_ / "train.json", "{" + base + "}");
  const Outcome o = run_cli({"--config", p("train.json"), "--out", p("run"), "train"});
  ASSERT_EQ(o.code, 0) << o.err;
  for (const char* f : {"train_log.csv", "final.ckpt", "weights.fnwt", "resolved_config.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir_ / "run" / f)) << f;
  }
  const Outcome resumed = run_cli({"--config", p("train.json"), "--out", p("run"), "train",
                                   "--resume", p("run/final.ckpt")});
  EXPECT_EQ(resumed.code, 0) << resumed.err;  // nothing left to do
  const std::string log = testing::read_text(dir_ / "run" / "train_log.csv");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 5);  // header + 2 epochs x 2 steps
  testing::write_text(dir_ / "diverge.json",
                      "{" + base + R"(, "lr_initial": 1e30, "lr_final": 1e30})");
  const Outcome d = run_cli({"--config", p("diverge.json"), "--out", p("div"), "train"});
  EXPECT_EQ(d.code, cli::kExitNumeric) << d.err;
}

}  // namespace
}  // namespace fieldnet
