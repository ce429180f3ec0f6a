#include <filesystem>

#include <gtest/gtest.h>

#include "panicl/pipeline.hpp"
#include "test_helpers.hpp"

using namespace panicl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const json& row(const json& report, const std::string& arm, const std::string& metric) {
  for (const auto& r : report.at("rows")) {
    if (r.at("arm") == arm && r.at("metric") == metric) return r;
  }
  throw std::runtime_error("row not found: " + arm + "/" + metric);
}

json small_world(json extra = json::object()) {
  json cfg{{"world", {{"items", 40}}}, {"seed", 3}};
  cfg.merge_patch(extra);
  return cfg;
}

}  // namespace

TEST(ResolveConfig, FillsDerivedFields) {
  const auto cfg = resolve_config(json{{"m", 8}});
  EXPECT_EQ(cfg.at("smoothing").at("k"), 5);
  EXPECT_EQ(cfg.at("smoothing").at("alpha"), 1.0);
  EXPECT_EQ(resolve_config(json{{"task", "detection"}}).at("smoothing").at("alpha"), 0.7);
  EXPECT_EQ(resolve_config(json{{"smoothing", {{"k", 2}}}}).at("smoothing").at("k"), 2);
  EXPECT_THROW(resolve_config(json{{"m", 0}}), ConfigError);
  EXPECT_THROW(resolve_config(json{{"task", "painting"}}), ConfigError);
  EXPECT_THROW(resolve_config(json::array()), ConfigError);
  EXPECT_THROW(smoothing_from_json(resolve_config(json{{"smoothing", {{"key", "pixel"}}}})), ConfigError);
  EXPECT_THROW(smoothing_from_json(resolve_config(json{{"smoothing", {{"alpha", 2.0}}}})), ConfigError);
}

TEST(RunPipeline, ReportHasBothArms) {
  const auto report = run_pipeline(small_world());
  EXPECT_EQ(report.at("kind"), "pipeline_report");
  for (const char* arm : {"baseline", "panicl"}) {
    for (const char* metric : {"pixel_accuracy", "miou", "mse"}) {
      const auto& r = row(report, arm, metric);
      EXPECT_EQ(r.at("per_item").size(), 8u);
    }
  }
  EXPECT_EQ(report.at("retrievals").size(), 8u);
  EXPECT_EQ(report.at("retrievals")[0].at("retrieved").size(), 4u);
}

TEST(RunPipeline, AlphaZeroMatchesBaseline) {
  for (const char* mode : {"q", "self", "seq", "rand"}) {
    const auto report = run_pipeline(small_world({{"smoothing", {{"alpha", 0.0}}}, {"pool", {{"mode", mode}}}}));
    for (const char* metric : {"pixel_accuracy", "miou", "mse"}) {
      EXPECT_EQ(row(report, "baseline", metric).at("per_item"), row(report, "panicl", metric).at("per_item"))
          << mode << " " << metric;
    }
  }
}

TEST(RunPipeline, ByteIdenticalAcrossRuns) {
  const json cfg = small_world({{"pool", {{"mode", "rand"}, {"seed", 5}}}});
  EXPECT_EQ(run_pipeline(cfg).dump(), run_pipeline(cfg).dump());
}

TEST(RunPipeline, ConfigErrorsCarryStage) {
  EXPECT_THROW(run_pipeline(json{{"backend", "gpu"}}), ConfigError);
  EXPECT_THROW(run_pipeline(json{{"metrics", {"psnr"}}}), ConfigError);
  EXPECT_THROW(run_pipeline(json{{"pool", {{"mode", "zigzag"}}}}), ConfigError);
  EXPECT_THROW(run_pipeline(json{{"backend", "file"}}), ConfigError);
  try {
    run_pipeline(json{{"world", {{"family", "blur"}}}});
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("[world]"), std::string::npos) << e.what();
  }
  try {
    run_pipeline(json{{"m", 1}, {"pool", {{"mode", "seq"}}}, {"world", {{"items", 20}}}});
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("[pool]"), std::string::npos) << e.what();
  }
}

TEST(FileBackend, MatchesSyntheticBackend) {
  const json synth_cfg = resolve_config(small_world());
  const auto world = world_from_json(synth_cfg);
  const auto dir = fs::temp_directory_path() / "panicl_file_backend";
  const json file_cfg = panicl::testing::export_world(world, bias_from_json(synth_cfg), dir, 4);

  const auto synth = run_pipeline(synth_cfg);
  const auto file = run_pipeline(file_cfg);
  ASSERT_EQ(file.at("retrievals"), synth.at("retrievals"));
  for (const char* arm : {"baseline", "panicl"}) {
    for (const char* metric : {"pixel_accuracy", "miou", "mse"}) {
      EXPECT_EQ(row(file, arm, metric).at("per_item"), row(synth, arm, metric).at("per_item")) << arm << metric;
    }
  }

  const Tensor tokens = read_tensor(dir / "tokens.pncl");
  EXPECT_EQ(tokens.dims, (std::vector<std::uint64_t>{8, 16}));
  EXPECT_TRUE(fs::exists(dir / "tokens.baseline.pncl"));
  EXPECT_EQ(tokens.meta().at("ids").size(), 8u);
}

TEST(FileBackend, TokensWithoutGroundTruth) {
  const json synth_cfg = resolve_config(small_world());
  const auto world = world_from_json(synth_cfg);
  const auto dir = fs::temp_directory_path() / "panicl_file_backend_nogt";
  json cfg = panicl::testing::export_world(world, bias_from_json(synth_cfg), dir, 3);
  cfg["file"]["gt"] = nullptr;
  const auto report = run_pipeline(cfg);
  EXPECT_TRUE(report.at("rows").empty());
  EXPECT_EQ(read_tensor(dir / "tokens.pncl").dims[0], 8u);
}

TEST(FileBackend, MissingScoresAndCorruptFiles) {
  const json synth_cfg = resolve_config(small_world());
  const auto world = world_from_json(synth_cfg);
  const auto dir = fs::temp_directory_path() / "panicl_file_backend_bad";
  json cfg = panicl::testing::export_world(world, bias_from_json(synth_cfg), dir, 4);

  json self_mode = cfg;
  self_mode["pool"] = {{"mode", "self"}};
  EXPECT_THROW(run_pipeline(self_mode), MissingItemError);

  std::string bytes = read_file_bytes(dir / "index.pncl");
  bytes[bytes.size() / 2] ^= 0x10;
  write_file_atomic(dir / "index.pncl", bytes);
  try {
    run_pipeline(cfg);
    FAIL() << "expected a checksum error";
  } catch (const ChecksumError& e) {
    EXPECT_NE(std::string(e.what()).find("[index]"), std::string::npos);
  }
}

TEST(FeatureFiles, RoundTripAndValidation) {
  const auto dir = fs::temp_directory_path() / "panicl_feature_files";
  fs::create_directories(dir);
  const std::vector<FeatureMap> maps{FeatureMap("a", 1, 1, 2, {3, 4}), FeatureMap("b", 1, 1, 2, {0, 2})};
  write_feature_file(maps, dir / "f.pncl");
  const auto back = read_feature_file(dir / "f.pncl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].id, "a");
  EXPECT_NEAR(back[0].values[1], 0.8, 1e-7);
  EXPECT_THROW(write_feature_file({maps[0], FeatureMap("c", 2, 1, 1, {1, 1})}, dir / "g.pncl"), DimensionError);
  write_tensor(Tensor::from_f32({2, 2}, {1, 0, 0, 1}), dir / "noids.pncl");
  EXPECT_THROW(read_feature_file(dir / "noids.pncl"), FormatError);
  write_tensor(Tensor::from_f32({2}, {1, 0}), dir / "rank1.pncl");
  EXPECT_THROW(read_feature_file(dir / "rank1.pncl"), FormatError);
}

TEST(Bench, ReportsStages) {
  const auto b = run_bench(small_world({{"world", {{"items", 20}}}}));
  EXPECT_EQ(b.at("kind"), "bench_report");
  EXPECT_TRUE(b.at("stages").contains("smooth"));
  EXPECT_GT(b.at("peak_rss_kib").get<long>(), 0);
}
