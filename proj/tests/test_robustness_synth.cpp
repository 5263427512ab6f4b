#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>

#include "croplandws/errors.hpp"
#include "croplandws/robustness_synth.hpp"
#include "doctest.h"
#include "mosaic_oracle.hpp"
#include "test_util.hpp"
#include "ws_oracles.hpp"

using namespace croplandws;
using namespace croplandws::testing;

namespace {

SITSCube random_cube(int64_t T, int64_t C, int64_t H, int64_t W, uint64_t seed) {
  SITSCube cube = blank_cube(T, C, H, W);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.01, 0.5);
  for (int64_t i = 0; i < cube.frames.numel(); ++i) cube.frames[i] = u(rng);
  return cube;
}

double invalid_fraction(const SITSCube& c, int64_t t) {
  const int64_t HW = c.H() * c.W();
  int64_t n = 0;
  for (int64_t p = 0; p < HW; ++p) n += c.validity[static_cast<size_t>(t * HW + p)] == 0;
  return static_cast<double>(n) / static_cast<double>(HW);
}

WorldConfig small_world(uint64_t seed) {
  WorldConfig w;
  w.size = 96;
  w.seed = seed;
  return w;
}

}  // namespace

TEST_CASE("zero rates leave the cube untouched") {
  const SITSCube cube = random_cube(6, 2, 20, 24, 1);
  CorruptionLog log;
  const SITSCube out = corrupt_cube(cube, 0.0, 0.0, 7, &log);
  CHECK(out.frames.storage() == cube.frames.storage());
  CHECK(out.validity == cube.validity);
  CHECK(log.dropped_frames.empty());
}

TEST_CASE("temporal drops are exact") {
  const SITSCube cube = random_cube(12, 2, 16, 16, 2);
  for (int k = 0; k <= 10; ++k) {
    CorruptionLog log;
    const SITSCube out = corrupt_cube(cube, 0.0, k / 12.0, 100 + k, &log);
    REQUIRE(log.dropped_frames.size() == static_cast<size_t>(k));
    int fully_invalid = 0;
    for (int64_t t = 0; t < 12; ++t) fully_invalid += invalid_fraction(out, t) == 1.0;
    CHECK(fully_invalid == k);
  }
  CorruptionLog half;
  corrupt_cube(cube, 0.0, 0.5, 3, &half);
  CHECK(half.dropped_frames.size() == 6);
}

TEST_CASE("dropping every frame is rejected") {
  const SITSCube cube = random_cube(12, 1, 8, 8, 3);
  CHECK_THROWS_AS(corrupt_cube(cube, 0.0, 1.0, 0), ConfigError);
  CHECK_THROWS_AS(corrupt_cube(cube, 0.0, 0.97, 0), ConfigError);
  CHECK_THROWS_AS(corrupt_cube(cube, 1.2, 0.0, 0), ConfigError);
  CHECK_NOTHROW(corrupt_cube(cube, 0.0, 11.0 / 12, 0));
}

TEST_CASE("spatial blobs hit the target fraction and are contiguous") {
  const SITSCube cube = random_cube(4, 3, 64, 64, 4);
  for (double s : {0.1, 0.2, 0.3, 0.4}) {
    CorruptionLog log;
    const SITSCube out = corrupt_cube(cube, s, 0.0, 11, &log);
    for (int64_t t = 0; t < 4; ++t) {
      const double f = invalid_fraction(out, t);
      CHECK(f >= s - 0.005);
      CHECK(f <= s + 0.005);
      CHECK(log.spatial_fractions[static_cast<size_t>(t)] == f);

      // flood fill from one masked pixel reaches all of them
      const int64_t HW = 64 * 64;
      std::vector<uint8_t> seen(HW, 0);
      std::vector<int64_t> stack;
      int64_t total = 0;
      for (int64_t p = 0; p < HW; ++p)
        if (!out.validity[static_cast<size_t>(t * HW + p)]) {
          ++total;
          if (stack.empty() && !seen[static_cast<size_t>(p)]) {
            stack.push_back(p);
            seen[static_cast<size_t>(p)] = 1;
          }
        }
      int64_t reached = 0;
      while (!stack.empty()) {
        const int64_t p = stack.back();
        stack.pop_back();
        ++reached;
        const int64_t r = p / 64, c = p % 64;
        const int64_t nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
        for (const auto& q : nb) {
          if (q[0] < 0 || q[0] >= 64 || q[1] < 0 || q[1] >= 64) continue;
          const int64_t qi = q[0] * 64 + q[1];
          if (seen[static_cast<size_t>(qi)] || out.validity[static_cast<size_t>(t * HW + qi)]) continue;
          seen[static_cast<size_t>(qi)] = 1;
          stack.push_back(qi);
        }
      }
      CHECK(reached == total);
    }
  }
}

TEST_CASE("corruption only touches masked values and is seeded") {
  const SITSCube cube = random_cube(12, 2, 32, 32, 5);
  const SITSCube a = corrupt_cube(cube, 0.3, 0.25, 42);
  const SITSCube b = corrupt_cube(cube, 0.3, 0.25, 42);
  const SITSCube c = corrupt_cube(cube, 0.3, 0.25, 43);
  CHECK(a.validity == b.validity);
  CHECK(a.frames.storage() == b.frames.storage());
  CHECK(a.validity != c.validity);
  const int64_t HW = 32 * 32;
  for (int64_t t = 0; t < 12; ++t)
    for (int64_t p = 0; p < HW; ++p) {
      const bool ok = a.validity[static_cast<size_t>(t * HW + p)];
      for (int64_t ch = 0; ch < 2; ++ch) {
        const int64_t i = (t * 2 + ch) * HW + p;
        if (ok) REQUIRE(a.frames[i] == cube.frames[i]);
        else REQUIRE(a.frames[i] == 0.0);
      }
    }
}

TEST_CASE("corruption config") {
  const CorruptionConfig d;
  CHECK(d.spatial_rates.size() == 5);
  CHECK(d.temporal_rates.size() == 11);
  nlohmann::json j = d;
  const auto back = j.get<CorruptionConfig>();
  CHECK(back.temporal_rates == d.temporal_rates);
  j["spatial_rates"] = {0.1, -0.2};
  CHECK_THROWS_AS(j.get<CorruptionConfig>(), ConfigError);
}

TEST_CASE("class curves") {
  CHECK(vegetation_fraction(LandCover::CropSingle, 6.0) > 0.85);
  CHECK(vegetation_fraction(LandCover::CropSingle, 0.0) < 0.1);
  CHECK(vegetation_fraction(LandCover::CropDouble, 3.8) > vegetation_fraction(LandCover::CropDouble, 6.2));
  CHECK(vegetation_fraction(LandCover::CropSingle, 8.0, 2.0) == vegetation_fraction(LandCover::CropSingle, 6.0));
  CHECK(frame_month(0, 12) == 0.0);
  CHECK(frame_month(11, 12) == 11.0);
  const auto r = class_reflectance(LandCover::Forest, 6.0, 4);
  CHECK(r[2] > r[1]);  // NIR above red under canopy
}

TEST_CASE("noise-free world: products equal truth and fusion keeps everything") {
  WorldConfig cfg = small_world(1);
  cfg.reflectance_sd = 0.0;
  const SyntheticWorld w = generate_world(cfg);
  ProductStack stack;
  stack.grid = w.grid;
  for (size_t m = 0; m < w.products.size(); ++m) {
    CHECK(w.product_binary[m] == w.truth);
    const BinaryLayer b = binarize_product(w.products[m], w.mappings[m]);
    CHECK(b.values == w.truth);
    stack.add(w.mappings[m].product_id, b);
  }
  const FusionResult f = rate_quality(stack);
  CHECK(std::all_of(f.mask.mask.begin(), f.mask.mask.end(), [](uint8_t v) { return v == 1; }));
  CHECK(f.labels.labels == w.truth);
  CHECK(std::count(w.truth.begin(), w.truth.end(), 1) > 0);
  CHECK(std::count(w.truth.begin(), w.truth.end(), 0) > 0);
}

TEST_CASE("pixel spectra follow their class curve") {
  WorldConfig cfg = small_world(2);
  cfg.reflectance_sd = 0.0;
  const SyntheticWorld w = generate_world(cfg);
  const int64_t HW = 96 * 96;
  // water fields have no jitter-sensitive curve: exact class reflectance
  // up to the per-field offset, constant across time
  for (int64_t p = 0; p < HW; ++p) {
    if (w.landcover[static_cast<size_t>(p)] != LandCover::Water) continue;
    for (int t = 1; t < 12; ++t)
      for (int c = 0; c < 4; ++c)
        CHECK(w.cube.frames[(t * 4 + c) * HW + p] == doctest::Approx(w.cube.frames[c * HW + p]).epsilon(1e-12));
    break;
  }
  // single-season crop: NIR peaks mid-year
  for (int64_t p = 0; p < HW; ++p) {
    if (w.landcover[static_cast<size_t>(p)] != LandCover::CropSingle) continue;
    int best = 0;
    for (int t = 1; t < 12; ++t)
      if (w.cube.frames[(t * 4 + 2) * HW + p] > w.cube.frames[(best * 4 + 2) * HW + p]) best = t;
    CHECK(best >= 5);
    CHECK(best <= 7);
    break;
  }
}

TEST_CASE("phase shift moves the season") {
  WorldConfig a = small_world(3), b = small_world(3);
  a.reflectance_sd = b.reflectance_sd = 0.0;
  b.phase_shift = 2.0;
  const SyntheticWorld wa = generate_world(a), wb = generate_world(b);
  CHECK(wa.truth == wb.truth);
  const int64_t HW = 96 * 96;
  for (int64_t p = 0; p < HW; ++p) {
    if (wa.landcover[static_cast<size_t>(p)] != LandCover::CropSingle) continue;
    for (int t = 2; t < 12; ++t)
      CHECK(wb.cube.frames[(t * 4 + 2) * HW + p] == doctest::Approx(wa.cube.frames[((t - 2) * 4 + 2) * HW + p]));
    break;
  }
}

TEST_CASE("fusion beats every single product under field flips") {
  int wins = 0, trials = 20;
  for (int s = 0; s < trials; ++s) {
    WorldConfig cfg = small_world(100 + s);
    cfg.noise = {ProductNoise{0.0, 0.1, 0.0}};
    const SyntheticWorld w = generate_world(cfg);
    ProductStack stack;
    stack.grid = w.grid;
    for (size_t m = 0; m < w.products.size(); ++m)
      stack.add(w.mappings[m].product_id, binarize_product(w.products[m], w.mappings[m]));
    const FusionResult f = rate_quality(stack);
    const double fused = layer_accuracy(f.labels.labels, w.truth);
    bool all = true;
    for (const auto& b : w.product_binary) all = all && fused > layer_accuracy(b, w.truth);
    wins += all;
  }
  CHECK(wins > trials / 2);
}

TEST_CASE("world generation is deterministic and validates") {
  const SyntheticWorld a = generate_world(small_world(7)), b = generate_world(small_world(7));
  CHECK(a.cube.frames.storage() == b.cube.frames.storage());
  CHECK(a.product_binary == b.product_binary);
  CHECK(a.dem == b.dem);
  WorldConfig bad = small_world(0);
  bad.products = 1;
  CHECK_THROWS_AS(generate_world(bad), ConfigError);
  bad = small_world(0);
  bad.noise = {ProductNoise{}, ProductNoise{}};
  CHECK_THROWS_AS(generate_world(bad), ConfigError);
  nlohmann::json j = small_world(5);
  CHECK(j.get<WorldConfig>().size == 96);
}

TEST_CASE("saved world reads back") {
  TempDir dir("world");
  WorldConfig cfg = small_world(8);
  cfg.noise = {ProductNoise{0.2, 0.1, 0.01}};
  const SyntheticWorld w = generate_world(cfg);
  const auto manifest = save_world(w, dir.path());
  std::ifstream in(manifest);
  const auto j = nlohmann::json::parse(in);
  REQUIRE(j["products"].size() == 3);
  const std::string rel = j["products"][1]["path"];
  const Raster p = read_raster(dir / rel);
  const BinaryLayer b = binarize_product(p, w.mappings[1]);
  CHECK(b.values == w.product_binary[1]);
  const SITSCube c = read_cube(dir / "cube.bin");
  CHECK(c.frames.shape() == w.cube.frames.shape());
  const Raster t = read_raster(dir / "truth.tif");
  CHECK(t.at(10, 20) == w.truth[10 * 96 + 20]);
}

TEST_CASE("robustness grid shape and identity cell") {
  std::mt19937_64 rng(9);
  const ModelConfig mc = tiny_model_config(12);
  UTAE model(mc, 3);
  const Checkpoint ck = make_checkpoint(model, NormStats{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}});
  EvalTarget target;
  target.cube = random_patch(mc, 32, 32, rng, 0.0, 0.0).cube;
  target.grid.width = target.grid.height = 32;
  target.grid.pixel_size = 10;
  target.grid.crs_id = "EPSG:32650";
  target.reference.resize(32 * 32);
  for (auto& v : target.reference) v = rng() % 2;
  target.tile = target.stride = 16;
  CorruptionConfig cfg;
  cfg.spatial_rates = {0.0, 0.2};
  cfg.temporal_rates = {0.0, 0.5};
  const RobustnessGrid g = robustness_grid(ck, target, cfg);
  REQUIRE(g.cells.size() == 4);
  const EvalReport clean = evaluate_checkpoint(ck, target);
  CHECK(g.at(0, 0).report.cm == clean.cm);
  CHECK(g.at(0, 0).report.avg_f1 == clean.avg_f1);
  CHECK(g.at(0, 1).corruption.dropped_frames.size() == 6);
  CHECK(g.at(1, 0).spatial_rate == 0.2);
  const auto j = grid_json(g);
  CHECK(j["cells"].size() == 4);
  CHECK(render_grid(g).find("avg F1") == 0);
}
