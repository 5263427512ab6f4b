#include <fstream>
#include <sstream>

#include "croplandws/cli.hpp"
#include "croplandws/errors.hpp"
#include "croplandws/robustness_synth.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace croplandws;
using namespace croplandws::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "croplandws");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const fs::path& p, const json& j) {
  std::ofstream(p) << j.dump(2);
}

const std::vector<std::string> kSmall{"--set", "world.size=64", "--set", "train.schedule.epochs=1",
                                      "--set", "manifest.tile=32", "--set", "manifest.stride=32"};

}  // namespace

TEST_CASE("overrides address named documents") {
  std::map<std::string, json> docs{{"train", json::object()}, {"manifest", {{"tile", 64}}}};
  cli::apply_override(docs, "train.schedule.epochs=3");
  cli::apply_override(docs, "manifest.tile=32");
  cli::apply_override(docs, "manifest.name=hunan");
  cli::apply_override(docs, "manifest.use_products=[\"a\",\"b\"]");
  CHECK(docs["train"]["schedule"]["epochs"] == 3);
  CHECK(docs["manifest"]["tile"] == 32);
  CHECK(docs["manifest"]["name"] == "hunan");
  CHECK(docs["manifest"]["use_products"].size() == 2);
  CHECK_THROWS_AS(cli::apply_override(docs, "world.size=3"), ConfigError);
  CHECK_THROWS_AS(cli::apply_override(docs, "train"), ConfigError);
  CHECK_THROWS_AS(cli::apply_override(docs, "manifest..tile=1"), ConfigError);
  CHECK_THROWS_AS(cli::apply_override(docs, "manifest.tile.x=1"), ConfigError);
}

TEST_CASE("help and usage errors") {
  CHECK(run_cli({"--help"}) == 0);
  CHECK(run_cli({"train", "--help"}) == 0);
  CHECK(run_cli({}) == 2);
  CHECK(run_cli({"frobnicate"}) == 2);
  CHECK(run_cli({"fuse", "--manifest", "/nonexistent.json", "--out", "/tmp/x"}) == 2);
}

TEST_CASE("empty and broken configs are rejected with exit code 2") {
  TempDir dir("cli_cfg");
  dump(dir / "empty.json", json::object());
  CHECK(run_cli({"fuse", "--manifest", (dir / "empty.json").string(), "--out", (dir / "o").string()}) == 2);
  std::ofstream(dir / "garbage.json") << "{ not json";
  CHECK(run_cli({"fuse", "--manifest", (dir / "garbage.json").string(), "--out", (dir / "o").string()}) == 2);
  CHECK(run_cli({"synth", "--out", (dir / "w").string(), "--set", "world.size=8"}) == 2);
  CHECK(run_cli({"synth", "--out", (dir / "w").string(), "--set", "nope.size=8"}) == 2);
  CHECK_THROWS_AS(cli::parse_train_config(json::array()), ConfigError);
  CHECK_THROWS_AS(cli::parse_train_config({{"schedule", {{"batch_size", 0}}}}), ConfigError);
  CHECK_THROWS_AS(cli::parse_train_config({{"corruption", {{"temporal_rate", 1.0}}}}), ConfigError);
}

TEST_CASE("missing data is exit code 3") {
  TempDir dir("cli_data");
  dump(dir / "m.json", {{"products",
                         {{{"id", "a"}, {"path", "missing.tif"}, {"mapping", {{"cropland", {1}}}}}}}});
  CHECK(run_cli({"fuse", "--manifest", (dir / "m.json").string(), "--out", (dir / "o").string()}) == 3);
}

TEST_CASE("synth, fuse, prepare on a saved world") {
  TempDir dir("cli_steps");
  REQUIRE(run_cli({"synth", "--out", (dir / "w").string(), "--set", "world.size=64", "--set",
                   "world.noise=[{\"boundary\":0.1,\"field_flip\":0.1}]"}) == 0);
  const std::string manifest = (dir / "w" / "manifest.json").string();
  REQUIRE(run_cli({"fuse", "--manifest", manifest, "--out", (dir / "f").string()}) == 0);
  const json stats = json::parse(slurp(dir / "f" / "fusion_stats.json"));
  CHECK(stats["total_pixels"] == 64 * 64);
  CHECK(stats["label_ratio"].get<double>() < 1.0);
  CHECK(stats["macro_f1"].is_number());

  // two products only: the mask can only grow
  REQUIRE(run_cli({"fuse", "--manifest", manifest, "--out", (dir / "f2").string(), "--set",
                   "manifest.use_products=[\"esa_like\",\"esri_like\"]"}) == 0);
  CHECK(json::parse(slurp(dir / "f2" / "fusion_stats.json"))["label_ratio"] >= stats["label_ratio"]);
  CHECK(run_cli({"fuse", "--manifest", manifest, "--out", (dir / "f3").string(), "--set",
                 "manifest.use_products=[\"nope\"]"}) == 2);

  // the patch store honours CROPLANDWS_CACHE
  ::setenv("CROPLANDWS_CACHE", (dir / "cache").string().c_str(), 1);
  REQUIRE(run_cli({"prepare", "--manifest", manifest, "--out", (dir / "p").string(), "--set", "manifest.tile=32",
                   "--set", "manifest.stride=16"}) == 0);
  ::unsetenv("CROPLANDWS_CACHE");
  REQUIRE(fs::exists(dir / "cache"));
  fs::path store;
  for (const auto& e : fs::directory_iterator(dir / "cache")) store = e.path();
  const cli::PatchStore s = cli::load_store(store);
  CHECK(s.patches.size() == 9);
  CHECK(s.patches.front().cube.T() == 12);
  CHECK(s.norm.mean.size() == 4);
}

TEST_CASE("pipeline runs end to end and is reproducible") {
  TempDir dir("cli_pipe");
  std::vector<std::string> a{"pipeline", "--out", (dir / "a").string(), "--jobs", "2"};
  std::vector<std::string> b{"pipeline", "--out", (dir / "b").string(), "--jobs", "1"};
  a.insert(a.end(), kSmall.begin(), kSmall.end());
  b.insert(b.end(), kSmall.begin(), kSmall.end());
  REQUIRE(run_cli(a) == 0);
  REQUIRE(run_cli(b) == 0);
  for (const char* f : {"world/cube.bin", "world/products/esa_like.tif", "fuse/fused_labels.tif", "train/model.ckpt",
                        "train/train_log.ndjson", "map/probabilities.tif", "map/binary.tif", "eval/eval_report.json"}) {
    INFO(f);
    REQUIRE(fs::exists(dir / "a" / f));
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }
  const json rep = json::parse(slurp(dir / "a" / "eval" / "eval_report.json"));
  CHECK(rep.contains("stratified"));
  CHECK(rep["global"]["confusion"]["counts"].size() == 2);
}

TEST_CASE("train, continue, map, eval and robustness as separate commands") {
  TempDir dir("cli_cmds");
  REQUIRE(run_cli({"synth", "--out", (dir / "w").string(), "--set", "world.size=64"}) == 0);
  const std::string manifest = (dir / "w" / "manifest.json").string();
  dump(dir / "train.json", {{"model", {{"widths", {8, 16, 32}}, {"heads", 2}, {"key_dim", 4}, {"d_model", 16}, {"groups", 2}}},
                            {"schedule", {{"epochs", 1}, {"batch_size", 2}}},
                            {"validate_every", 1},
                            {"corruption", {{"spatial_rate", 0.1}, {"temporal_rate", 0.25}, {"seed", 3}}}});
  const std::vector<std::string> tiles{"--set", "manifest.tile=32", "--set", "manifest.stride=32"};
  auto with_tiles = [&](std::vector<std::string> v) {
    v.insert(v.end(), tiles.begin(), tiles.end());
    return v;
  };
  REQUIRE(run_cli(with_tiles({"train", "--manifest", manifest, "--config", (dir / "train.json").string(), "--out",
                              (dir / "t").string(), "--embeddings", "50"})) == 0);
  const json summary = json::parse(slurp(dir / "t" / "train_summary.json"));
  CHECK(summary["last_validation"]["avg_f1"].is_number());
  CHECK(summary["embeddings"] == 50);
  const std::string ckpt = (dir / "t" / "model.ckpt").string();

  REQUIRE(run_cli(with_tiles({"continue", "--checkpoint", ckpt, "--manifest", manifest, "--config",
                              (dir / "train.json").string(), "--out", (dir / "c").string()})) == 0);
  CHECK(fs::exists(dir / "c" / "model.ckpt"));

  REQUIRE(run_cli(with_tiles({"map", "--checkpoint", ckpt, "--manifest", manifest, "--out", (dir / "m").string()})) == 0);
  const Raster bin = read_raster(dir / "m" / "binary.tif");
  CHECK(bin.grid.width == 64);

  REQUIRE(run_cli({"eval", "--map", (dir / "m" / "binary.tif").string(), "--reference",
                   (dir / "w" / "truth.tif").string(), "--out", (dir / "e").string()}) == 0);
  CHECK(!json::parse(slurp(dir / "e" / "eval_report.json")).contains("stratified"));

  REQUIRE(run_cli(with_tiles({"robustness", "--checkpoint", ckpt, "--manifest", manifest, "--out",
                              (dir / "r").string(), "--set", "corruption.spatial_rates=[0,0.3]", "--set",
                              "corruption.temporal_rates=[0,0.5]"})) == 0);
  const json grid = json::parse(slurp(dir / "r" / "robustness_grid.json"));
  CHECK(grid["cells"].size() == 4);

  // a checkpoint that does not fit the data is a data error
  CHECK(run_cli({"map", "--checkpoint", ckpt, "--manifest", manifest, "--out", (dir / "m2").string(), "--set",
                 "manifest.tile=30"}) == 3);
}

TEST_CASE("cube from scenes with a QA band") {
  TempDir dir("cli_scenes");
  const SyntheticWorld w = generate_world([] {
    WorldConfig c;
    c.size = 64;
    c.T = 12;
    return c;
  }());
  save_world(w, dir.path());
  json m = json::parse(slurp(dir / "manifest.json"));
  m.erase("cube");
  json items = json::array();
  const int64_t HW = 64 * 64;
  fs::create_directories(dir / "scenes");
  for (int month = 1; month <= 12; ++month)
    for (int k = 0; k < 2; ++k) {
      Raster r(w.grid, {"B2", "B4", "B8", "B11", "QA60"}, SampleType::Float32);
      for (int64_t p = 0; p < HW; ++p) {
        for (int c = 0; c < 4; ++c) r.data[static_cast<size_t>(p * 5 + c)] = static_cast<float>(w.cube.frames[((month - 1) * 4 + c) * HW + p]);
        // second scene of each month is cloudy on the left half
        r.data[static_cast<size_t>(p * 5 + 4)] = (k == 1 && p % 64 < 32) ? 1024.0 : 0.0;
      }
      r.refresh_validity();
      const std::string name = "scenes/s" + std::to_string(month) + "_" + std::to_string(k) + ".tif";
      write_raster(dir / name, r);
      items.push_back({{"date", "2021-" + std::string(month < 10 ? "0" : "") + std::to_string(month) + (k ? "-20" : "-05")},
                       {"path", name},
                       {"bands", {"B2", "B4", "B8", "B11"}},
                       {"qa_band", "QA60"}});
    }
  m["scenes"] = {{"year", 2021}, {"period", "monthly"}, {"max_cloud", 0.9}, {"qa_rule", {{"mode", "bits"}, {"bits", {10}}}},
                 {"items", items}};
  dump(dir / "scene_manifest.json", m);
  const cli::Manifest man = cli::parse_manifest(m, dir.path());
  const SITSCube cube = cli::load_cube(man, w.grid);
  REQUIRE(cube.T() == 12);
  CHECK(cube.C() == 4);
  // both scenes of a month hold the same spectra, so the composite equals the frame
  for (int64_t t = 0; t < 12; t += 5)
    CHECK(cube.frames[(t * 4 + 2) * HW + 100] == doctest::Approx(static_cast<float>(w.cube.frames[(t * 4 + 2) * HW + 100])));
  CHECK(run_cli({"prepare", "--manifest", (dir / "scene_manifest.json").string(), "--out", (dir / "p").string()}) == 0);
  m["cube"] = "cube.bin";
  CHECK_THROWS_AS(cli::parse_manifest(m, dir.path()), ConfigError);
}
