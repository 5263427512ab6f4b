#include "croplandws/robustness_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "croplandws/errors.hpp"
#include "croplandws/weak_supervision.hpp"

namespace croplandws {

namespace {

// Distribution helpers independent of the standard library's
// implementation-defined distributions.
struct Rng {
  std::mt19937_64 eng;
  explicit Rng(uint64_t seed) : eng(seed) {}
  double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  uint64_t below(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do r = eng(); while (r >= limit);
    return r % n;
  }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
};

void check_rate(double r, const char* what) {
  if (!(r >= 0.0 && r <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
}

}  // namespace

// ---------------------------------------------------------------------------
// corruption

void CorruptionConfig::validate() const {
  if (spatial_rates.empty() || temporal_rates.empty()) throw ConfigError("corruption: rate lists must not be empty");
  for (double r : spatial_rates) check_rate(r, "corruption: spatial rate");
  for (double r : temporal_rates) check_rate(r, "corruption: temporal rate");
}

void to_json(nlohmann::json& j, const CorruptionConfig& c) {
  j = {{"spatial_rates", c.spatial_rates}, {"temporal_rates", c.temporal_rates}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CorruptionConfig& c) {
  const CorruptionConfig d;
  c.spatial_rates = j.value("spatial_rates", d.spatial_rates);
  c.temporal_rates = j.value("temporal_rates", d.temporal_rates);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

SITSCube corrupt_cube(const SITSCube& cube, double spatial_rate, double temporal_rate, uint64_t seed,
                      CorruptionLog* log) {
  cube.validate();
  check_rate(spatial_rate, "corrupt_cube: spatial rate");
  check_rate(temporal_rate, "corrupt_cube: temporal rate");
  const int64_t T = cube.T(), C = cube.C(), H = cube.H(), W = cube.W(), HW = H * W;
  const auto drops = static_cast<int64_t>(std::llround(temporal_rate * static_cast<double>(T)));
  if (drops >= T)
    throw ConfigError("corrupt_cube: temporal rate " + std::to_string(temporal_rate) + " would drop every frame");

  SITSCube out = cube;
  CorruptionLog local;
  local.dropped_frames = seeded_sample(T, drops, mix_seed(seed, 1));
  std::sort(local.dropped_frames.begin(), local.dropped_frames.end());
  local.spatial_fractions.assign(static_cast<size_t>(T), 0.0);
  std::vector<uint8_t> dropped(static_cast<size_t>(T), 0);
  for (int64_t t : local.dropped_frames) dropped[static_cast<size_t>(t)] = 1;

  auto invalidate = [&](int64_t t, int64_t p) {
    out.validity[static_cast<size_t>(t * HW + p)] = 0;
    for (int64_t c = 0; c < C; ++c) out.frames[(t * C + c) * HW + p] = 0.0;
  };

  const auto target = static_cast<int64_t>(std::llround(spatial_rate * static_cast<double>(HW)));
  std::vector<uint8_t> state(static_cast<size_t>(HW));  // 0 free, 1 frontier, 2 blob
  std::vector<int64_t> frontier;
  for (int64_t t = 0; t < T; ++t) {
    if (dropped[static_cast<size_t>(t)]) {
      for (int64_t p = 0; p < HW; ++p) invalidate(t, p);
      continue;
    }
    if (target == 0) continue;
    // Eden growth: add a random frontier pixel until the blob has `target`
    // pixels. 4-connected, so the blob is contiguous.
    Rng rng(mix_seed(seed, 100 + static_cast<uint64_t>(t)));
    std::fill(state.begin(), state.end(), 0);
    frontier.clear();
    const auto centre = static_cast<int64_t>(rng.below(static_cast<uint64_t>(HW)));
    frontier.push_back(centre);
    state[static_cast<size_t>(centre)] = 1;
    int64_t grown = 0;
    while (grown < target) {
      const auto k = static_cast<size_t>(rng.below(frontier.size()));
      const int64_t p = frontier[k];
      frontier[k] = frontier.back();
      frontier.pop_back();
      state[static_cast<size_t>(p)] = 2;
      invalidate(t, p);
      ++grown;
      const int64_t r = p / W, c = p % W;
      const int64_t nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[0] >= H || q[1] < 0 || q[1] >= W) continue;
        const int64_t qi = q[0] * W + q[1];
        if (state[static_cast<size_t>(qi)] != 0) continue;
        state[static_cast<size_t>(qi)] = 1;
        frontier.push_back(qi);
      }
    }
    local.spatial_fractions[static_cast<size_t>(t)] = static_cast<double>(grown) / static_cast<double>(HW);
  }
  if (log) *log = std::move(local);
  return out;
}

EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const EvalTarget& target, int jobs) {
  if (static_cast<int64_t>(target.reference.size()) != target.grid.pixels())
    throw DataError("evaluate: reference does not match the grid");
  const RegionMap map = map_region(ckpt, target.cube, target.grid, target.tile, target.stride, jobs);
  std::vector<uint8_t> valid(map.binary.size());
  for (size_t p = 0; p < valid.size(); ++p) valid[p] = map.binary[p] != 255;
  return metrics(confusion(map.binary, target.reference, valid));
}

RobustnessGrid robustness_grid(const Checkpoint& ckpt, const EvalTarget& target, const CorruptionConfig& cfg,
                               int jobs) {
  cfg.validate();
  RobustnessGrid g;
  g.spatial_rates = cfg.spatial_rates;
  g.temporal_rates = cfg.temporal_rates;
  for (size_t s = 0; s < cfg.spatial_rates.size(); ++s)
    for (size_t t = 0; t < cfg.temporal_rates.size(); ++t) {
      GridCell cell;
      cell.spatial_rate = cfg.spatial_rates[s];
      cell.temporal_rate = cfg.temporal_rates[t];
      cell.seed = mix_seed(cfg.seed, s * cfg.temporal_rates.size() + t);
      EvalTarget corrupted = target;
      corrupted.cube = corrupt_cube(target.cube, cell.spatial_rate, cell.temporal_rate, cell.seed, &cell.corruption);
      cell.report = evaluate_checkpoint(ckpt, corrupted, jobs);
      g.cells.push_back(std::move(cell));
    }
  return g;
}

nlohmann::json grid_json(const RobustnessGrid& g) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : g.cells) {
    double mean_frac = 0.0;
    int64_t kept = 0;
    for (size_t t = 0; t < c.corruption.spatial_fractions.size(); ++t)
      if (!std::binary_search(c.corruption.dropped_frames.begin(), c.corruption.dropped_frames.end(),
                              static_cast<int64_t>(t))) {
        mean_frac += c.corruption.spatial_fractions[t];
        ++kept;
      }
    cells.push_back({{"spatial_rate", c.spatial_rate},
                     {"temporal_rate", c.temporal_rate},
                     {"seed", c.seed},
                     {"dropped_frames", c.corruption.dropped_frames},
                     {"mean_spatial_fraction", kept ? mean_frac / static_cast<double>(kept) : 0.0},
                     {"metrics", report_json(c.report)}});
  }
  return {{"spatial_rates", g.spatial_rates}, {"temporal_rates", g.temporal_rates}, {"cells", cells}};
}

std::string render_grid(const RobustnessGrid& g) {
  std::ostringstream os;
  os << "avg F1 (%), spatial rate down, temporal rate across\n" << std::setw(8) << "";
  for (double t : g.temporal_rates) os << std::setw(8) << std::fixed << std::setprecision(2) << t * 100;
  os << '\n';
  for (size_t s = 0; s < g.spatial_rates.size(); ++s) {
    os << std::setw(8) << std::fixed << std::setprecision(2) << g.spatial_rates[s] * 100;
    for (size_t t = 0; t < g.temporal_rates.size(); ++t)
      os << std::setw(8) << std::fixed << std::setprecision(2) << round_half_up(g.at(s, t).report.avg_f1);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// synthetic world

std::string to_string(LandCover c) {
  switch (c) {
    case LandCover::CropSingle: return "crop_single";
    case LandCover::CropDouble: return "crop_double";
    case LandCover::Grass: return "grass";
    case LandCover::Forest: return "forest";
    case LandCover::Water: return "water";
    case LandCover::Built: return "built";
  }
  return "unknown";
}

void to_json(nlohmann::json& j, const ProductNoise& n) {
  j = {{"boundary", n.boundary}, {"field_flip", n.field_flip}, {"salt", n.salt}};
}

void from_json(const nlohmann::json& j, ProductNoise& n) {
  n.boundary = j.value("boundary", 0.0);
  n.field_flip = j.value("field_flip", 0.0);
  n.salt = j.value("salt", 0.0);
}

void WorldConfig::validate() const {
  if (size < 64) throw ConfigError("world: size must be >= 64");
  if (T < 1 || channels < 1) throw ConfigError("world: T and channels must be >= 1");
  if (products < 2) throw ConfigError("world: at least two products are needed");
  double mix = 0.0;
  for (double v : terrain_mix) {
    if (!(v >= 0.0)) throw ConfigError("world: terrain shares must be >= 0");
    mix += v;
  }
  if (!(mix > 0.0)) throw ConfigError("world: terrain shares must not all be 0");
  for (double v : field_size)
    if (!(v >= 3.0)) throw ConfigError("world: field sizes must be >= 3 pixels");
  if (noise.empty() || (noise.size() != 1 && static_cast<int>(noise.size()) != products))
    throw ConfigError("world: give one noise entry or one per product");
  for (const auto& n : noise) {
    check_rate(n.boundary, "world: boundary rate");
    check_rate(n.field_flip, "world: field flip rate");
    check_rate(n.salt, "world: salt rate");
  }
  if (!(reflectance_sd >= 0.0)) throw ConfigError("world: reflectance_sd must be >= 0");
  check_rate(cloud_rate, "world: cloud rate");
  if (!(pixel_size > 0.0)) throw ConfigError("world: pixel_size must be positive");
}

const ProductNoise& WorldConfig::noise_for(int product) const {
  return noise.size() == 1 ? noise.front() : noise[static_cast<size_t>(product)];
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"size", c.size},
       {"T", c.T},
       {"channels", c.channels},
       {"products", c.products},
       {"terrain_mix", c.terrain_mix},
       {"field_size", c.field_size},
       {"noise", c.noise},
       {"reflectance_sd", c.reflectance_sd},
       {"phase_shift", c.phase_shift},
       {"cloud_rate", c.cloud_rate},
       {"pixel_size", c.pixel_size},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  const WorldConfig d;
  c.size = j.value("size", d.size);
  c.T = j.value("T", d.T);
  c.channels = j.value("channels", d.channels);
  c.products = j.value("products", d.products);
  c.terrain_mix = j.value("terrain_mix", d.terrain_mix);
  c.field_size = j.value("field_size", d.field_size);
  c.noise = j.value("noise", d.noise);
  c.reflectance_sd = j.value("reflectance_sd", d.reflectance_sd);
  c.phase_shift = j.value("phase_shift", d.phase_shift);
  c.cloud_rate = j.value("cloud_rate", d.cloud_rate);
  c.pixel_size = j.value("pixel_size", d.pixel_size);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

namespace {

double bump(double m, double mu, double sigma) {
  const double z = (m - mu) / sigma;
  return std::exp(-0.5 * z * z);
}

// blue, red, NIR, SWIR
constexpr double kSoil[4] = {0.09, 0.13, 0.20, 0.28};
constexpr double kLeaf[4] = {0.03, 0.04, 0.48, 0.17};
constexpr double kWater[4] = {0.07, 0.05, 0.02, 0.01};
constexpr double kBuilt[4] = {0.16, 0.19, 0.24, 0.27};

}  // namespace

double vegetation_fraction(LandCover c, double m, double shift) {
  switch (c) {
    case LandCover::CropSingle: return 0.08 + 0.82 * bump(m, 6.0 + shift, 1.3);
    case LandCover::CropDouble: return 0.08 + 0.75 * std::max(bump(m, 3.8 + shift, 0.9), bump(m, 8.6 + shift, 0.9));
    case LandCover::Grass: return 0.12 + 0.70 * bump(m, 3.0 + shift, 1.1);  // early spring flush, then dries out
    case LandCover::Forest: return 0.62 + 0.18 * bump(m, 6.5 + shift, 3.5);
    case LandCover::Water: return 0.0;
    case LandCover::Built: return 0.05;
  }
  return 0.0;
}

std::vector<double> class_reflectance(LandCover c, double month, int channels, double shift) {
  const double v = vegetation_fraction(c, month, shift);
  std::vector<double> out(static_cast<size_t>(channels));
  for (int k = 0; k < channels; ++k) {
    const int b = k % 4;
    const double base = c == LandCover::Water ? kWater[b] : c == LandCover::Built ? kBuilt[b] : kSoil[b];
    out[static_cast<size_t>(k)] = (1.0 - v) * base + v * kLeaf[b];
  }
  return out;
}

double frame_month(int t, int T) { return (t + 0.5) * 12.0 / T - 0.5; }

ClassMapping product_mapping(int product) {
  ClassMapping m;
  switch (product % 3) {
    case 0:
      m.product_id = "esa_like";
      m.cropland_class_ids = {40};
      m.noncrop_class_ids = {10, 30, 50, 80};
      m.nodata_class_ids = {0};
      break;
    case 1:
      m.product_id = "esri_like";
      m.cropland_class_ids = {5};
      m.noncrop_class_ids = {1, 2, 7, 11};
      m.nodata_class_ids = {0};
      break;
    default:
      m.product_id = "dyworld_like";
      m.cropland_class_ids = {4};
      m.noncrop_class_ids = {0, 1, 2, 6};
      m.nodata_class_ids = {255};
      break;
  }
  if (product >= 3) m.product_id += "_" + std::to_string(product);
  m.strict = true;
  return m;
}

namespace {

// Non-crop code of a land-cover class in product p's code book.
double noncrop_code(int product, LandCover c) {
  // grass, forest, water, built (crop truth shown as non-crop maps to grass)
  static const double codes[3][4] = {{30, 10, 80, 50}, {11, 2, 1, 7}, {2, 1, 0, 6}};
  int k = 0;
  if (c == LandCover::Forest) k = 1;
  else if (c == LandCover::Water) k = 2;
  else if (c == LandCover::Built) k = 3;
  return codes[product % 3][k];
}

double crop_code(int product) {
  static const double codes[3] = {40, 5, 4};
  return codes[product % 3];
}

struct Rect {
  int64_t r0, c0, h, w;
};

}  // namespace

SyntheticWorld generate_world(const WorldConfig& cfg) {
  cfg.validate();
  SyntheticWorld w;
  w.config = cfg;
  const int64_t N = cfg.size, HW = N * N;
  w.grid.width = N;
  w.grid.height = N;
  w.grid.origin_x = 500000.0;
  w.grid.origin_y = 3000000.0;
  w.grid.pixel_size = cfg.pixel_size;
  w.grid.crs_id = "EPSG:32650";

  // terrain: smooth random height, split into zones by quantile
  Rng trng(mix_seed(cfg.seed, 1));
  std::vector<double> h(static_cast<size_t>(HW), 0.0);
  for (int k = 0; k < 6; ++k) {
    const double wl = N * trng.uniform(0.6, 1.6);
    const double th = trng.uniform(0.0, std::numbers::pi);
    const double ph = trng.uniform(0.0, 2 * std::numbers::pi);
    const double amp = trng.uniform(0.5, 1.0);
    for (int64_t r = 0; r < N; ++r)
      for (int64_t c = 0; c < N; ++c)
        h[static_cast<size_t>(r * N + c)] +=
            amp * std::cos(2 * std::numbers::pi * (c * std::cos(th) + r * std::sin(th)) / wl + ph);
  }
  std::vector<double> sorted = h;
  std::sort(sorted.begin(), sorted.end());
  const double mix = cfg.terrain_mix[0] + cfg.terrain_mix[1] + cfg.terrain_mix[2];
  auto quantile = [&](double q) {
    const auto i = std::clamp<int64_t>(static_cast<int64_t>(q * static_cast<double>(HW)), 0, HW - 1);
    return sorted[static_cast<size_t>(i)];
  };
  const double t1 = cfg.terrain_mix[0] / mix, t2 = (cfg.terrain_mix[0] + cfg.terrain_mix[1]) / mix;
  const double q1 = t1 >= 1.0 ? sorted.back() + 1 : quantile(t1);
  const double q2 = t2 >= 1.0 ? sorted.back() + 1 : quantile(t2);
  w.terrain.resize(static_cast<size_t>(HW));
  for (int64_t p = 0; p < HW; ++p) {
    const double v = h[static_cast<size_t>(p)];
    w.terrain[static_cast<size_t>(p)] = v < q1 ? 0 : (v < q2 ? 1 : 2);
  }
  // elevation: flat floor below q1, then steeper with height
  w.dem.resize(static_cast<size_t>(HW));
  for (int64_t p = 0; p < HW; ++p) {
    const double v = h[static_cast<size_t>(p)];
    double z = 100.0 + 2.0 * v;
    if (v > q1) z += 12.0 * (v - q1);
    if (v > q2) z += 40.0 * (v - q2);
    w.dem[static_cast<size_t>(p)] = z;
  }

  // fields: recursive rectangle splits, target size set by terrain
  Rng frng(mix_seed(cfg.seed, 2));
  std::vector<Rect> fields, stack{{0, 0, N, N}};
  while (!stack.empty()) {
    Rect r = stack.back();
    stack.pop_back();
    const uint8_t zone = w.terrain[static_cast<size_t>((r.r0 + r.h / 2) * N + r.c0 + r.w / 2)];
    const double side = cfg.field_size[zone];
    const double area = side * side * frng.uniform(0.6, 1.4);
    const bool split = static_cast<double>(r.h * r.w) > area && std::max(r.h, r.w) >= 6;
    if (!split) {
      fields.push_back(r);
      continue;
    }
    const double f = frng.uniform(0.35, 0.65);
    if (r.h >= r.w) {
      const int64_t a = std::clamp<int64_t>(std::llround(r.h * f), 3, r.h - 3);
      stack.push_back({r.r0, r.c0, a, r.w});
      stack.push_back({r.r0 + a, r.c0, r.h - a, r.w});
    } else {
      const int64_t a = std::clamp<int64_t>(std::llround(r.w * f), 3, r.w - 3);
      stack.push_back({r.r0, r.c0, r.h, a});
      stack.push_back({r.r0, r.c0 + a, r.h, r.w - a});
    }
  }

  // land cover per field, by zone
  static const double kCover[3][kLandCoverCount] = {
      {0.34, 0.24, 0.18, 0.06, 0.06, 0.12},  // plain
      {0.22, 0.14, 0.26, 0.32, 0.02, 0.04},  // hill
      {0.10, 0.06, 0.24, 0.58, 0.01, 0.01},  // mountain
  };
  struct FieldLook {
    LandCover cover;
    double jitter, amp, offset;
  };
  std::vector<FieldLook> looks;
  w.landcover.resize(static_cast<size_t>(HW));
  w.field_id.resize(static_cast<size_t>(HW));
  w.truth.resize(static_cast<size_t>(HW));
  for (size_t i = 0; i < fields.size(); ++i) {
    const Rect& r = fields[i];
    const uint8_t zone = w.terrain[static_cast<size_t>((r.r0 + r.h / 2) * N + r.c0 + r.w / 2)];
    double u = frng.uniform(), acc = 0.0;
    int cls = kLandCoverCount - 1;
    for (int k = 0; k < kLandCoverCount; ++k) {
      acc += kCover[zone][k];
      if (u < acc) {
        cls = k;
        break;
      }
    }
    looks.push_back({static_cast<LandCover>(cls), frng.uniform(-0.6, 0.6), frng.uniform(0.85, 1.05), 0.01 * frng.normal()});
    for (int64_t rr = r.r0; rr < r.r0 + r.h; ++rr)
      for (int64_t cc = r.c0; cc < r.c0 + r.w; ++cc) {
        const auto p = static_cast<size_t>(rr * N + cc);
        w.landcover[p] = static_cast<LandCover>(cls);
        w.field_id[p] = static_cast<int32_t>(i);
        w.truth[p] = is_crop(static_cast<LandCover>(cls)) ? 1 : 0;
      }
  }

  // reflectance cube
  const int T = cfg.T, C = cfg.channels;
  w.cube.frames = Tensor({T, C, N, N});
  w.cube.validity.assign(static_cast<size_t>(T * HW), 1);
  for (int t = 0; t < T; ++t) w.cube.period_labels.push_back(static_cast<int>(std::lround(frame_month(t, T))) + 1);
  Rng crng(mix_seed(cfg.seed, 3));
  std::vector<std::vector<double>> curve(fields.size());
  for (int t = 0; t < T; ++t) {
    const double month = frame_month(t, T);
    for (size_t i = 0; i < fields.size(); ++i) {
      const FieldLook& lk = looks[i];
      const double v = std::clamp(vegetation_fraction(lk.cover, month - lk.jitter, cfg.phase_shift) * lk.amp, 0.0, 1.0);
      curve[i].assign(static_cast<size_t>(C), 0.0);
      for (int k = 0; k < C; ++k) {
        const int b = k % 4;
        const double base = lk.cover == LandCover::Water ? kWater[b] : lk.cover == LandCover::Built ? kBuilt[b] : kSoil[b];
        curve[i][static_cast<size_t>(k)] = (1.0 - v) * base + v * kLeaf[b] + lk.offset;
      }
    }
    for (int64_t p = 0; p < HW; ++p) {
      const auto& cv = curve[static_cast<size_t>(w.field_id[static_cast<size_t>(p)])];
      const bool cloudy = cfg.cloud_rate > 0.0 && crng.bernoulli(cfg.cloud_rate);
      for (int k = 0; k < C; ++k) {
        const double noise = cfg.reflectance_sd * crng.normal();
        w.cube.frames[(static_cast<int64_t>(t) * C + k) * HW + p] = cloudy ? 0.0 : cv[static_cast<size_t>(k)] + noise;
      }
      if (cloudy) w.cube.validity[static_cast<size_t>(t * HW + p)] = 0;
    }
  }

  // pseudo-products
  for (int m = 0; m < cfg.products; ++m) {
    const ProductNoise& nz = cfg.noise_for(m);
    Rng prng(mix_seed(cfg.seed, 100 + static_cast<uint64_t>(m)));
    std::vector<uint8_t> b = w.truth;
    std::vector<uint8_t> edge_field(fields.size()), flip_field(fields.size());
    for (size_t i = 0; i < fields.size(); ++i) {
      edge_field[i] = prng.bernoulli(nz.boundary);
      flip_field[i] = prng.bernoulli(nz.field_flip);
    }
    // boundary: crop fields lose their outer ring where it touches non-crop,
    // non-crop fields gain one where they touch crop
    for (int64_t r = 0; r < N; ++r)
      for (int64_t c = 0; c < N; ++c) {
        const auto p = static_cast<size_t>(r * N + c);
        const auto f = static_cast<size_t>(w.field_id[p]);
        if (!edge_field[f]) continue;
        const int64_t nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
        for (const auto& q : nb) {
          if (q[0] < 0 || q[0] >= N || q[1] < 0 || q[1] >= N) continue;
          const auto qi = static_cast<size_t>(q[0] * N + q[1]);
          if (w.field_id[qi] != w.field_id[p] && w.truth[qi] != w.truth[p]) {
            b[p] = w.truth[qi];
            break;
          }
        }
      }
    for (int64_t p = 0; p < HW; ++p)
      if (flip_field[static_cast<size_t>(w.field_id[static_cast<size_t>(p)])]) b[static_cast<size_t>(p)] ^= 1;
    for (int64_t p = 0; p < HW; ++p)
      if (nz.salt > 0.0 && prng.bernoulli(nz.salt)) b[static_cast<size_t>(p)] ^= 1;

    ClassMapping mapping = product_mapping(m);
    Raster raster(w.grid, {"class"}, SampleType::UInt8, static_cast<double>(*mapping.nodata_class_ids.begin()));
    for (int64_t p = 0; p < HW; ++p)
      raster.data[static_cast<size_t>(p)] =
          b[static_cast<size_t>(p)] ? crop_code(m) : noncrop_code(m, w.landcover[static_cast<size_t>(p)]);
    raster.refresh_validity();
    w.product_binary.push_back(std::move(b));
    w.products.push_back(std::move(raster));
    w.mappings.push_back(std::move(mapping));
  }
  return w;
}

double layer_accuracy(const std::vector<uint8_t>& layer, const std::vector<uint8_t>& truth) {
  if (layer.size() != truth.size() || truth.empty()) throw DataError("layer_accuracy: size mismatch");
  int64_t ok = 0, n = 0;
  for (size_t p = 0; p < truth.size(); ++p) {
    if (layer[p] > 1 || truth[p] > 1) continue;
    ok += layer[p] == truth[p];
    ++n;
  }
  if (n == 0) throw DataError("layer_accuracy: nothing to compare");
  return 100.0 * static_cast<double>(ok) / static_cast<double>(n);
}

std::filesystem::path save_world(const SyntheticWorld& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "products");
  const auto HW = static_cast<size_t>(world.grid.pixels());

  Raster truth(world.grid, {"cropland"}, SampleType::UInt8, 255.0);
  Raster cover(world.grid, {"landcover"}, SampleType::UInt8);
  Raster dem(world.grid, {"elevation"}, SampleType::Float32);
  for (size_t p = 0; p < HW; ++p) {
    truth.data[p] = world.truth[p];
    cover.data[p] = static_cast<double>(world.landcover[p]);
    dem.data[p] = static_cast<float>(world.dem[p]);
  }
  truth.refresh_validity();
  cover.refresh_validity();
  dem.refresh_validity();
  write_raster(dir / "truth.tif", truth);
  write_raster(dir / "landcover.tif", cover);
  write_raster(dir / "dem.tif", dem);
  write_cube(dir / "cube.bin", world.cube);

  nlohmann::json products = nlohmann::json::array();
  for (size_t m = 0; m < world.products.size(); ++m) {
    const ClassMapping& map = world.mappings[m];
    const std::string rel = "products/" + map.product_id + ".tif";
    write_raster(dir / rel, world.products[m]);
    products.push_back({{"id", map.product_id},
                        {"path", rel},
                        {"mapping",
                         {{"cropland", map.cropland_class_ids},
                          {"noncrop", map.noncrop_class_ids},
                          {"nodata", map.nodata_class_ids},
                          {"strict", map.strict}}}});
  }
  const nlohmann::json manifest = {{"name", "synthetic"},
                                   {"world", world.config},
                                   {"cube", "cube.bin"},
                                   {"products", products},
                                   {"reference", "truth.tif"},
                                   {"dem", "dem.tif"},
                                   {"tile", 64},
                                   {"stride", 64}};
  const auto path = dir / "manifest.json";
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("save_world: cannot write " + path.string());
  f << manifest.dump(2) << '\n';
  return path;
}

}  // namespace croplandws
