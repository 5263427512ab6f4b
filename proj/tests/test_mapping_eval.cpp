#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "croplandws/errors.hpp"
#include "croplandws/mapping_eval.hpp"
#include "doctest.h"
#include "mosaic_oracle.hpp"
#include "test_util.hpp"
#include "ws_oracles.hpp"

using namespace croplandws;
using namespace croplandws::testing;

namespace {

RasterGrid make_grid(int64_t W, int64_t H, double px = 10.0) {
  RasterGrid g;
  g.width = W;
  g.height = H;
  g.origin_x = 500000;
  g.origin_y = 3000000;
  g.pixel_size = px;
  g.crs_id = "EPSG:32650";
  return g;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("argmax ties resolve to non-crop") {
  Tensor p({2, 1, 3}, std::vector<double>{0.5, 0.4, 0.6, 0.5, 0.6, 0.4});
  CHECK(argmax_binary(p) == std::vector<uint8_t>{0, 1, 0});
}

TEST_CASE("constant stub gives a constant map") {
  const RasterGrid g = make_grid(40, 40);
  auto constant = [](const SITSCube& t, const TileIndex&) {
    Tensor p({2, t.H(), t.W()});
    for (int64_t k = 0; k < t.H() * t.W(); ++k) {
      p[k] = 0.3;
      p[t.H() * t.W() + k] = 0.7;
    }
    return p;
  };
  const auto m = map_region(blank_cube(2, 1, 40, 40), g, 16, 12, constant);
  for (uint8_t b : m.binary) CHECK(b == 1);
}

TEST_CASE("3x3 overlapping tiles equal brute-force averaging exactly") {
  const RasterGrid g = make_grid(40, 40);
  CHECK(tile_plan(g, 16, 12).size() == 9);
  const auto ref = brute_mosaic(g, 16, 12);
  for (int jobs : {1, 3}) {
    const auto m = map_region(blank_cube(2, 1, 40, 40), g, 16, 12, stub_predictor(), jobs);
    int ties = 0;
    for (int64_t p = 0; p < 1600; ++p) {
      REQUIRE(m.probs[1600 + p] == ref.p_crop[static_cast<size_t>(p)]);
      REQUIRE(m.probs[p] == ref.p_noncrop[static_cast<size_t>(p)]);
      REQUIRE(m.binary[static_cast<size_t>(p)] == ref.binary[static_cast<size_t>(p)]);
      ties += m.probs[1600 + p] == 0.5;
    }
    CHECK(ties > 0);
  }
}

TEST_CASE("single-tile region equals the argmax of one forward pass") {
  std::mt19937_64 rng(1);
  const ModelConfig cfg = tiny_model_config();
  UTAE model(cfg, 4);
  PatchSample p = random_patch(cfg, 16, 16, rng);
  const auto m = map_region(p.cube, make_grid(16, 16), 16, 16, model_predictor(model));
  const Tensor direct = model.forward(p.cube).probs.value();
  CHECK(max_abs_diff(direct.reshaped({2, 16, 16}), m.probs) == 0.0);
  CHECK(m.binary == argmax_binary(direct.reshaped({2, 16, 16})));
}

TEST_CASE("small grids are padded to the tile and cropped back") {
  const RasterGrid g = make_grid(12, 10);
  int64_t seen_rows = 0;
  auto pred = [&](const SITSCube& t, const TileIndex& ix) {
    seen_rows = t.H();
    return stub_predictor()(t, ix);
  };
  const auto m = map_region(blank_cube(2, 1, 10, 12), g, 16, 16, pred);
  CHECK(seen_rows == 16);
  CHECK(m.probs.shape() == Shape{2, 10, 12});
  CHECK(m.probs[120 + 5 * 12 + 3] == stub_crop_prob(5, 3, tile_plan(g, 16, 16)[0]));
}

TEST_CASE("pixels never observed are nodata in the binary map") {
  SITSCube cube = blank_cube(3, 1, 16, 16);
  for (int t = 0; t < 3; ++t) cube.validity[static_cast<size_t>(t * 256 + 17)] = 0;
  cube.validity[static_cast<size_t>(1 * 256 + 18)] = 0;
  const auto m = map_region(cube, make_grid(16, 16), 16, 16, stub_predictor());
  CHECK(m.binary[17] == 255);
  CHECK(m.binary[18] != 255);
}

TEST_CASE("checkpoint mapping checks the manifest") {
  std::mt19937_64 rng(2);
  const ModelConfig cfg = tiny_model_config();
  UTAE model(cfg, 5);
  NormStats norm{{0.5, -0.5, 0.0}, {2.0, 1.0, 4.0}};
  const Checkpoint ck = make_checkpoint(model, norm);
  PatchSample p = random_patch(cfg, 16, 16, rng);
  const auto a = map_region(ck, p.cube, make_grid(16, 16), 16, 16);
  SITSCube normed = p.cube;
  normalize(normed, norm);
  const auto b = map_region(normed, make_grid(16, 16), 16, 16, model_predictor(model));
  CHECK(max_abs_diff(a.probs, b.probs) == 0.0);
  const PatchSample wrong = random_patch(tiny_model_config(5), 16, 16, rng);
  CHECK_THROWS_AS(map_region(ck, wrong.cube, make_grid(16, 16), 16, 16), DataError);
  CHECK_THROWS_AS(map_region(ck, p.cube, make_grid(16, 16), 10, 10), DataError);
}

TEST_CASE("map rasters round-trip") {
  TempDir dir("map_rasters");
  RegionMap m = map_region(blank_cube(2, 1, 20, 20), make_grid(20, 20), 16, 8, stub_predictor());
  m.binary[0] = 255;
  write_raster(dir / "bin.tif", binary_raster(m.grid, m.binary));
  write_raster(dir / "prob.tif", probability_raster(m));
  const Raster b = read_raster(dir / "bin.tif");
  CHECK(b.sample_type == SampleType::UInt8);
  CHECK(b.nodata == 255.0);
  CHECK(b.valid[0] == 0);
  CHECK(b.at(3, 4) == m.binary[3 * 20 + 4]);
  const Raster p = read_raster(dir / "prob.tif");
  CHECK(p.band_names == std::vector<std::string>{"p_noncrop", "p_crop"});
  CHECK(p.at(2, 2, 1) == static_cast<float>(m.probs[400 + 42]));
}

TEST_CASE("slope thresholds are left-closed") {
  CHECK(classify_slope(0.0) == Stratum::Plain);
  CHECK(classify_slope(1.9999) == Stratum::Plain);
  CHECK(classify_slope(2.0) == Stratum::Hill);
  CHECK(classify_slope(5.9999) == Stratum::Hill);
  CHECK(classify_slope(6.0) == Stratum::Mountain);
  CHECK(classify_slope(std::nan("")) == Stratum::Unknown);
}

TEST_CASE("Horn slope of flat and planar DEMs") {
  const RasterGrid g = make_grid(9, 7, 30.0);
  std::vector<double> flat(63, 120.0);
  for (Stratum s : slope_stratify(flat, {}, g, 30.0).classes) CHECK(s == Stratum::Plain);

  const double t4 = std::tan(4.0 * std::numbers::pi / 180.0);
  for (auto [ax, ay] : {std::pair{1.0, 0.0}, {0.0, 1.0}, {0.6, 0.8}}) {
    std::vector<double> ramp(63);
    for (int r = 0; r < 7; ++r)
      for (int c = 0; c < 9; ++c) ramp[static_cast<size_t>(r * 9 + c)] = 500 + t4 * 30.0 * (ax * c + ay * r);
    const auto st = slope_stratify(ramp, {}, g, 30.0);
    for (size_t i = 0; i < 63; ++i) {
      CHECK(st.slope[i] == doctest::Approx(4.0).epsilon(1e-9));
      CHECK(st.classes[i] == Stratum::Hill);
    }
  }
}

TEST_CASE("DEM nodata is an unknown stratum") {
  const RasterGrid g = make_grid(5, 5, 10.0);
  std::vector<double> dem(25, 10.0);
  std::vector<uint8_t> valid(25, 1);
  valid[12] = 0;
  dem[12] = -9999;  // would be a cliff if it were used
  const auto st = slope_stratify(dem, valid, g, 10.0);
  CHECK(st.classes[12] == Stratum::Unknown);
  CHECK(std::isnan(st.slope[12]));
  for (size_t i = 0; i < 25; ++i)
    if (i != 12) CHECK(st.classes[i] == Stratum::Plain);
}

TEST_CASE("stratified reports") {
  std::mt19937_64 rng(3);
  const int64_t n = 400;
  std::vector<uint8_t> pred(n), ref(n), valid(n, 1);
  for (auto& v : pred) v = rng() % 2;
  for (auto& v : ref) v = rng() % 2;
  valid[5] = 0;
  TerrainStrata single;
  single.classes.assign(n, Stratum::Hill);
  const auto one = stratified_report(pred, ref, valid, single);
  REQUIRE(one.strata.size() == 1);
  CHECK(one.absent.size() == 2);
  const EvalReport glob = metrics(confusion(pred, ref, valid));
  CHECK(one.strata.at(Stratum::Hill).cm == glob.cm);
  CHECK(one.strata.at(Stratum::Hill).oa == glob.oa);

  // two strata, errors only in the second
  TerrainStrata two;
  two.classes.resize(n);
  std::vector<uint8_t> p2 = ref;
  for (int64_t i = 0; i < n; ++i) {
    two.classes[static_cast<size_t>(i)] = i < 200 ? Stratum::Plain : (i < 390 ? Stratum::Mountain : Stratum::Unknown);
    if (i >= 200 && i % 4 == 0) p2[static_cast<size_t>(i)] = 1 - ref[static_cast<size_t>(i)];
  }
  const auto r2 = stratified_report(p2, ref, valid, two);
  CHECK(r2.strata.at(Stratum::Plain).oa == 100.0);
  // 190 mountain pixels, indices 200..389, every 4th flipped
  int flipped = 0;
  for (int i = 200; i < 390; ++i) flipped += i % 4 == 0;
  CHECK(r2.strata.at(Stratum::Mountain).oa == doctest::Approx(100.0 * (190 - flipped) / 190));
  ConfusionMatrix sum;
  for (const auto& [s, rep] : r2.strata) sum += rep.cm;
  CHECK(sum == r2.global);
  CHECK(r2.global.total() == 389);  // 390 known minus the invalid pixel
}

TEST_CASE("report serialization") {
  ConfusionMatrix cm;
  cm.counts = {{{900, 100}, {50, 150}}};
  const EvalReport r = metrics(cm);
  const auto j = report_json(r);
  CHECK(j["confusion"]["counts"][0][1] == 100);
  CHECK(j["confusion"]["row_normalized"][1][1].get<double>() == doctest::Approx(0.75));
  CHECK(j["confusion"]["total_normalized"][0][0].get<double>() == doctest::Approx(0.75));
  CHECK(j["oa"].get<double>() == 87.5);
  CHECK(j["crop"]["pa"].get<double>() == 75.0);
  const std::string t = render_report(r, "demo");
  CHECK(t.find("87.50") != std::string::npos);
  CHECK(t.find("demo") == 0);
}

TEST_CASE("pixel embedding export") {
  TempDir dir("embed");
  std::mt19937_64 rng(4);
  const ModelConfig cfg = tiny_model_config();
  UTAE model(cfg, 6);
  std::vector<PatchSample> patches{random_patch(cfg, 8, 8, rng), random_patch(cfg, 8, 8, rng)};

  CHECK(export_pixel_embeddings(model, patches, 0, 1, dir / "e0.csv") == 0);
  const std::string e0 = slurp(dir / "e0.csv");
  CHECK(std::count(e0.begin(), e0.end(), '\n') == 1);
  CHECK(e0.rfind("pixel_id,patch,row,col,label,z0,", 0) == 0);

  CHECK(export_pixel_embeddings(model, patches, 1000, 1, dir / "all.csv") == 128);
  std::ifstream in(dir / "all.csv");
  std::string line;
  std::getline(in, line);
  std::set<int64_t> ids;
  int rows = 0;
  while (std::getline(in, line)) {
    ids.insert(std::stoll(line.substr(0, line.find(','))));
    CHECK(std::count(line.begin(), line.end(), ',') == 4 + 56);
    ++rows;
  }
  CHECK(rows == 128);
  CHECK(ids.size() == 128);

  export_pixel_embeddings(model, patches, 20, 9, dir / "a.csv");
  export_pixel_embeddings(model, patches, 20, 9, dir / "b.csv");
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  export_pixel_embeddings(model, patches, 20, 10, dir / "c.csv");
  CHECK(slurp(dir / "a.csv") != slurp(dir / "c.csv"));
}
