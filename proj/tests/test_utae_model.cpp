#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "croplandws/errors.hpp"
#include "croplandws/utae_model.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace croplandws;
using croplandws::testing::random_tensor;

namespace {

ModelConfig tiny(int T, int levels = 2) {
  ModelConfig c;
  c.levels = levels;
  c.widths = levels == 1 ? std::vector<int>{4, 8} : std::vector<int>{4, 8, 16};
  c.input_channels = 3;
  c.heads = 2;
  c.key_dim = 4;
  c.d_model = 8;
  c.temporal_positions = T;
  c.groups = 2;
  return c;
}

SITSCube random_cube(std::mt19937_64& rng, int64_t T, int64_t C, int64_t H, int64_t W) {
  SITSCube c;
  c.frames = random_tensor({T, C, H, W}, rng);
  for (int t = 0; t < T; ++t) c.period_labels.push_back(t + 1);
  c.validity.assign(static_cast<size_t>(T * H * W), 1);
  return c;
}

bool bytes_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), static_cast<size_t>(a.numel()) * 8) == 0;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny(4);
  CHECK_NOTHROW(c.validate());
  c.widths = {8, 8, 16};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny(4);
  c.widths.pop_back();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(tiny(4).check_input(4, 3, 10, 12), DataError);
  CHECK_THROWS_AS(tiny(4).check_input(5, 3, 16, 16), DataError);
  nlohmann::json j = tiny(4);
  auto back = j.get<ModelConfig>();
  CHECK(back.widths == tiny(4).widths);
  CHECK(back.d_model == 8);
}

TEST_CASE("encode_spatial shapes and weight sharing") {
  std::mt19937_64 rng(1);
  UTAE m(tiny(1, 1), 7);
  auto pyr = m.encode_spatial(ag::constant(random_tensor({1, 3, 8, 8}, rng)));
  REQUIRE(pyr.levels.size() == 2);
  CHECK(pyr.levels[1].shape() == Shape{1, 8, 4, 4});

  UTAE m2(tiny(2), 7);
  Tensor frame = random_tensor({1, 3, 16, 16}, rng);
  Tensor two({2, 3, 16, 16});
  std::copy(frame.values().begin(), frame.values().end(), two.values().begin());
  std::copy(frame.values().begin(), frame.values().end(), two.values().begin() + frame.numel());
  auto p2 = m2.encode_spatial(ag::constant(two));
  for (const auto& lv : p2.levels) {
    const Tensor& v = lv.value();
    const int64_t half = v.numel() / 2;
    CHECK(std::memcmp(v.data(), v.data() + half, static_cast<size_t>(half) * 8) == 0);
  }
}

TEST_CASE("encode_spatial responds to input perturbations at every level") {
  std::mt19937_64 rng(2);
  UTAE m(tiny(2), 3);
  Tensor x = random_tensor({2, 3, 16, 16}, rng);
  auto base = m.encode_spatial(ag::constant(x));
  x[5 * 16 + 7] += 1e-3;
  auto moved = m.encode_spatial(ag::constant(x));
  for (size_t l = 0; l < base.levels.size(); ++l) CHECK(max_abs_diff(base.levels[l].value(), moved.levels[l].value()) > 0);
}

TEST_CASE("attend_temporal") {
  std::mt19937_64 rng(3);
  SUBCASE("a single frame gets weight one") {
    UTAE m(tiny(1), 1);
    auto c = random_cube(rng, 1, 3, 16, 16);
    auto pyr = m.encode_spatial(ag::constant(c.frames));
    auto a = m.attend_temporal(pyr, c.validity_tensor(), c.period_labels);
    for (const auto& w : a.weights)
      for (double v : w.value().values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("equal scores give uniform weights") {
    UTAE m(tiny(4), 1);
    m.param("ltae.query").mutable_value().fill(0.0);
    auto c = random_cube(rng, 4, 3, 16, 16);
    auto a = m.attend_temporal(m.encode_spatial(ag::constant(c.frames)), c.validity_tensor(), c.period_labels);
    for (const auto& w : a.weights)
      for (double v : w.value().values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("a masked frame gets zero weight at every level and the rest sum to one") {
    UTAE m(tiny(5), 2);
    auto c = random_cube(rng, 5, 3, 16, 16);
    for (int64_t p = 0; p < 256; ++p) c.validity[static_cast<size_t>(2 * 256 + p)] = 0;
    auto a = m.attend_temporal(m.encode_spatial(ag::constant(c.frames)), c.validity_tensor(), c.period_labels);
    CHECK(a.fallback_pixels == 0);
    for (const auto& w : a.weights) {
      const Tensor& v = w.value();
      const int64_t P = v.dim(2) * v.dim(3);
      for (int64_t p = 0; p < P; ++p) {
        CHECK(v[2 * P + p] == 0.0);
        double s = 0;
        for (int64_t t = 0; t < 5; ++t) s += v[t * P + p];
        CHECK(std::abs(s - 1.0) < 1e-5);
      }
    }
  }
  SUBCASE("all-invalid pixels fall back to uniform and are counted") {
    UTAE m(tiny(3), 2);
    auto c = random_cube(rng, 3, 3, 16, 16);
    std::fill(c.validity.begin(), c.validity.end(), 0);
    auto r = m.forward(c);
    CHECK(r.attention.fallback_pixels == 16);
    for (const auto& w : r.attention.weights)
      for (double v : w.value().values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
    const Tensor& p = r.probs.value();
    for (int64_t i = 0; i < 256; ++i) CHECK(std::abs(p[i] + p[256 + i] - 1.0) < 1e-6);
  }
}

TEST_CASE("fuse_temporal equals an explicit loop over frames") {
  std::mt19937_64 rng(4);
  UTAE m(tiny(3), 5);
  auto c = random_cube(rng, 3, 3, 16, 16);
  auto pyr = m.encode_spatial(ag::constant(c.frames));
  auto a = m.attend_temporal(pyr, c.validity_tensor(), c.period_labels);
  auto f = m.fuse_temporal(pyr, a);
  for (size_t l = 0; l < pyr.levels.size(); ++l) {
    const Tensor& e = pyr.levels[l].value();
    const Tensor& w = a.weights[l].value();
    const Tensor& cw = m.param("fuse." + std::to_string(l) + ".w").value();
    const Tensor& cb = m.param("fuse." + std::to_string(l) + ".b").value();
    const int64_t T = e.dim(0), C = e.dim(1), H = e.dim(2), W = e.dim(3);
    double worst = 0;
    for (int64_t o = 0; o < C; ++o)
      for (int64_t r = 0; r < H; ++r)
        for (int64_t k = 0; k < W; ++k) {
          double acc = cb[o];
          for (int64_t t = 0; t < T; ++t)
            for (int64_t i = 0; i < C; ++i) acc += cw.at(o, i, 0, 0) * w.at(t, 0, r, k) * e.at(t, i, r, k);
          worst = std::max(worst, std::abs(acc - f.maps[l].value().at(0, o, r, k)));
        }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("fuse_temporal with one frame is the 1x1 convolution of that frame") {
  std::mt19937_64 rng(5);
  UTAE m(tiny(1), 6);
  auto c = random_cube(rng, 1, 3, 16, 16);
  auto pyr = m.encode_spatial(ag::constant(c.frames));
  auto f = m.fuse_temporal(pyr, m.attend_temporal(pyr, c.validity_tensor(), c.period_labels));
  for (size_t l = 0; l < pyr.levels.size(); ++l) {
    auto direct = ag::conv2d(pyr.levels[l], m.param("fuse." + std::to_string(l) + ".w"),
                             m.param("fuse." + std::to_string(l) + ".b"), 1, 0);
    CHECK(max_abs_diff(direct.value(), f.maps[l].value()) < 1e-12);
  }
}

TEST_CASE("decode") {
  std::mt19937_64 rng(6);
  UTAE m(tiny(1, 1), 8);
  FusedFeatures zero{{ag::constant(Tensor({1, 4, 8, 8})), ag::constant(Tensor({1, 8, 4, 4}))}};
  auto d = m.decode(zero);
  CHECK(d.maps[0].shape() == Shape{1, 4, 8, 8});
  for (const auto& mp : d.maps)
    for (double v : mp.value().values()) CHECK(v == 0.0);

  UTAE m2(tiny(1), 9);
  auto r = croplandws::testing::grad_check(
      [&](const std::vector<ag::Var>& v) {
        auto maps = m2.decode(FusedFeatures{v});
        std::mt19937_64 wr(10);
        return ag::sum(ag::mul(maps.maps[0], ag::constant(random_tensor(maps.maps[0].shape(), wr))));
      },
      {random_tensor({1, 4, 16, 16}, rng), random_tensor({1, 8, 8, 8}, rng), random_tensor({1, 16, 4, 4}, rng)}, 1e-6,
      1e-4);
  CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("predict is a stable softmax") {
  auto p = UTAE::predict(ag::constant(Tensor({1, 2, 1, 2}, std::vector<double>{0, 1000, 0, -1000}))).value();
  CHECK(p[0] == 0.5);
  CHECK(p[2] == 0.5);
  CHECK(p[1] == 1.0);
  CHECK(p[3] == 0.0);
}

TEST_CASE("forward shape, determinism and normalization") {
  std::mt19937_64 rng(7);
  ModelConfig cfg = tiny(2);
  UTAE m(cfg, 11);
  auto c = random_cube(rng, 2, 3, 64, 64);
  auto r1 = m.forward(c);
  CHECK(r1.probs.shape() == Shape{1, 2, 64, 64});
  auto r2 = m.forward(c);
  CHECK(bytes_equal(r1.probs.value(), r2.probs.value()));
  UTAE same_seed(cfg, 11);
  CHECK(bytes_equal(same_seed.forward(c).probs.value(), r1.probs.value()));
  const Tensor& p = r1.probs.value();
  for (int64_t i = 0; i < 64 * 64; ++i) CHECK(std::abs(p[i] + p[4096 + i] - 1.0) < 1e-6);
}

TEST_CASE("frame permutation leaves the prediction unchanged only without positional encoding") {
  std::mt19937_64 rng(8);
  auto c = random_cube(rng, 3, 3, 16, 16);
  SITSCube swapped = c;
  const int64_t F = 3 * 256;
  std::swap_ranges(swapped.frames.data(), swapped.frames.data() + F, swapped.frames.data() + 2 * F);

  ModelConfig off = tiny(3);
  off.positional_encoding = false;
  UTAE m(off, 12);
  CHECK(max_abs_diff(m.forward(c).probs.value(), m.forward(swapped).probs.value()) < 1e-12);

  UTAE with_pe(tiny(3), 12);
  CHECK(max_abs_diff(with_pe.forward(c).probs.value(), with_pe.forward(swapped).probs.value()) > 1e-9);
}

TEST_CASE("checkpoint round trip") {
  croplandws::testing::TempDir tmp("ckpt");
  std::mt19937_64 rng(9);
  UTAE m(tiny(2), 13);
  NormStats ns{{0.1, 0.2, 0.3}, {1.0, 2.0, 3.0}};
  save_checkpoint(tmp / "m.ckpt", make_checkpoint(m, ns, {{"epoch", 3}}));
  auto ck = load_checkpoint(tmp / "m.ckpt");
  CHECK(ck.normalization.std == ns.std);
  CHECK(ck.metadata["epoch"] == 3);
  UTAE back = model_from_checkpoint(ck);
  auto c = random_cube(rng, 2, 3, 16, 16);
  CHECK(bytes_equal(back.forward(c).probs.value(), m.forward(c).probs.value()));
  CHECK(back.parameter_count() == m.parameter_count());

  std::ofstream(tmp / "bad.ckpt") << "garbage";
  CHECK_THROWS_AS(load_checkpoint(tmp / "bad.ckpt"), DataError);
  auto wrong = ck;
  wrong.tensors[0].second = Tensor({1});
  CHECK_THROWS_AS(model_from_checkpoint(wrong), DataError);
}
