#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "croplandws/label_fusion.hpp"
#include "croplandws/mapping_eval.hpp"
#include "croplandws/metrics.hpp"
#include "croplandws/raster_io.hpp"
#include "croplandws/sits_pipeline.hpp"
#include "croplandws/utae_model.hpp"
#include "json.hpp"

namespace croplandws {

// ---- corruption protocol ----

struct CorruptionConfig {
  std::vector<double> spatial_rates{0.0, 0.1, 0.2, 0.3, 0.4};
  // k/12 for k = 0..10
  std::vector<double> temporal_rates{0.0,      1.0 / 12, 2.0 / 12, 3.0 / 12, 4.0 / 12, 5.0 / 12,
                                     6.0 / 12, 7.0 / 12, 8.0 / 12, 9.0 / 12, 10.0 / 12};
  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const CorruptionConfig& c);
void from_json(const nlohmann::json& j, CorruptionConfig& c);

struct CorruptionLog {
  std::vector<int64_t> dropped_frames;     // sorted
  std::vector<double> spatial_fractions;   // per frame; 0 for dropped frames
};

// Drops exactly round(temporal_rate * T) frames and masks one contiguous
// blob of round(spatial_rate * H * W) pixels in every surviving frame.
// Only validity changes, plus zeroing of the newly invalid values. Throws
// ConfigError when no frame would survive.
SITSCube corrupt_cube(const SITSCube& cube, double spatial_rate, double temporal_rate, uint64_t seed,
                      CorruptionLog* log = nullptr);

struct GridCell {
  double spatial_rate = 0.0;
  double temporal_rate = 0.0;
  uint64_t seed = 0;
  EvalReport report;
  CorruptionLog corruption;
};

struct RobustnessGrid {
  std::vector<double> spatial_rates;
  std::vector<double> temporal_rates;
  std::vector<GridCell> cells;  // row-major: spatial outer, temporal inner

  const GridCell& at(size_t s, size_t t) const { return cells[s * temporal_rates.size() + t]; }
};

struct EvalTarget {
  SITSCube cube;  // raw (un-normalized) reflectance
  RasterGrid grid;
  std::vector<uint8_t> reference;  // {0, 1}; other values skipped
  int64_t tile = 64;
  int64_t stride = 64;
};

// Maps the cube with the checkpoint and scores it against the reference.
EvalReport evaluate_checkpoint(const Checkpoint& ckpt, const EvalTarget& target, int jobs = 1);

// Every (spatial, temporal) cell, corruption seeded by mix_seed(seed, cell).
RobustnessGrid robustness_grid(const Checkpoint& ckpt, const EvalTarget& target, const CorruptionConfig& cfg,
                               int jobs = 1);

nlohmann::json grid_json(const RobustnessGrid& g);
// Heat-table of rounded average F1, spatial rates down, temporal across.
std::string render_grid(const RobustnessGrid& g);

// ---- synthetic phenology world ----

enum class LandCover : uint8_t { CropSingle = 0, CropDouble = 1, Grass = 2, Forest = 3, Water = 4, Built = 5 };
inline constexpr int kLandCoverCount = 6;
inline bool is_crop(LandCover c) { return c == LandCover::CropSingle || c == LandCover::CropDouble; }
std::string to_string(LandCover c);

struct ProductNoise {
  double boundary = 0.0;    // fraction of fields whose crop edge is eroded / dilated by one pixel
  double field_flip = 0.0;  // fraction of fields with the whole label inverted
  double salt = 0.0;        // per-pixel flip probability
};

void to_json(nlohmann::json& j, const ProductNoise& n);
void from_json(const nlohmann::json& j, ProductNoise& n);

struct WorldConfig {
  int64_t size = 256;
  int T = 12;
  int channels = 4;
  int products = 3;
  std::array<double, 3> terrain_mix{0.5, 0.3, 0.2};  // plain, hill, mountain shares
  std::array<double, 3> field_size{28.0, 12.0, 7.0}; // mean field side in pixels per terrain class
  std::vector<ProductNoise> noise{ProductNoise{}};    // one entry for all products, or one per product
  double reflectance_sd = 0.02;
  double phase_shift = 0.0;  // months added to every vegetation curve
  double cloud_rate = 0.0;   // per-frame per-pixel invalid probability
  double pixel_size = 10.0;
  uint64_t seed = 0;

  void validate() const;
  const ProductNoise& noise_for(int product) const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

// Vegetation fraction of a class at fractional month m (0 = mid-January).
double vegetation_fraction(LandCover c, double month, double phase_shift = 0.0);
// Noise-free reflectance of a class (channels: blue, red, NIR, SWIR; extra
// channels repeat the pattern).
std::vector<double> class_reflectance(LandCover c, double month, int channels, double phase_shift = 0.0);
// Month of frame t for a T-frame year.
double frame_month(int t, int T);

struct SyntheticWorld {
  WorldConfig config;
  RasterGrid grid;
  std::vector<uint8_t> truth;       // {0, 1}
  std::vector<LandCover> landcover;
  std::vector<uint8_t> terrain;     // 0 plain, 1 hill, 2 mountain
  std::vector<int32_t> field_id;
  std::vector<double> dem;          // metres
  std::vector<std::vector<uint8_t>> product_binary;  // {0, 1} per product
  std::vector<Raster> products;     // coded like the real products
  std::vector<ClassMapping> mappings;
  SITSCube cube;                    // raw reflectance
};

SyntheticWorld generate_world(const WorldConfig& cfg);

// Standard three-product code books: ESA-like (crop 40), Esri-like (crop 5),
// Dynamic-World-like (crop 4); further products cycle through them.
ClassMapping product_mapping(int product);

// Binary agreement accuracy (percent) of a {0,1} layer vs. truth.
double layer_accuracy(const std::vector<uint8_t>& layer, const std::vector<uint8_t>& truth);

// Writes truth, dem, product rasters, the cube and a manifest.json that the
// command-line pipeline consumes. Returns the manifest path.
std::filesystem::path save_world(const SyntheticWorld& world, const std::filesystem::path& dir);

}  // namespace croplandws
