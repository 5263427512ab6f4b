#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "croplandws/metrics.hpp"
#include "croplandws/raster_io.hpp"
#include "croplandws/sits_pipeline.hpp"
#include "croplandws/utae_model.hpp"
#include "json.hpp"

namespace croplandws {

// Class probabilities [K, rows, cols] for one (possibly padded) tile cube.
using TilePredictor = std::function<Tensor(const SITSCube& tile, const TileIndex& index)>;

// Wraps a trained model; the cube must already be normalized.
TilePredictor model_predictor(const UTAE& model);

struct RegionMap {
  RasterGrid grid;
  Tensor probs;                 // [K, H, W] mosaicked probabilities
  std::vector<uint8_t> binary;  // H*W: 0 / 1, 255 where no frame was ever valid
};

// argmax per pixel; ties go to class 0 (non-crop).
std::vector<uint8_t> argmax_binary(const Tensor& probs);

// Tiles the cube with tile_plan(tile, stride), predicts every tile (up to
// `jobs` in parallel), mosaics and takes the argmax.
RegionMap map_region(const SITSCube& cube, const RasterGrid& grid, int64_t tile, int64_t stride,
                     const TilePredictor& predict, int jobs = 1);

// Same with a checkpoint: checks the cube against the stored model config
// and normalizes a copy with the stored statistics.
RegionMap map_region(const Checkpoint& ckpt, const SITSCube& raw_cube, const RasterGrid& grid, int64_t tile,
                     int64_t stride, int jobs = 1);

Raster probability_raster(const RegionMap& map);  // Float32, one band per class
Raster binary_raster(const RasterGrid& grid, const std::vector<uint8_t>& binary);  // UInt8, nodata 255

enum class Stratum : uint8_t { Plain = 0, Hill = 1, Mountain = 2, Unknown = 255 };

std::string to_string(Stratum s);
// [0, 2) plain, [2, 6) hill, >= 6 mountain; NaN is unknown.
Stratum classify_slope(double degrees);

struct TerrainStrata {
  RasterGrid grid;
  std::vector<double> slope;     // degrees, NaN where unknown
  std::vector<Stratum> classes;  // per pixel
};

// Horn's 3x3 slope. Image borders use linear extrapolation, so planes get
// their exact slope everywhere; invalid neighbours take the centre value.
TerrainStrata slope_stratify(const std::vector<double>& dem, const std::vector<uint8_t>& dem_valid,
                             const RasterGrid& grid, double cell);
TerrainStrata slope_stratify(const Raster& dem);

struct StratifiedReport {
  std::map<Stratum, EvalReport> strata;  // present strata only
  std::vector<Stratum> absent;           // strata with no valid pixel
  ConfusionMatrix global;
};

StratifiedReport stratified_report(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref,
                                   const std::vector<uint8_t>& valid, const TerrainStrata& strata);

// Machine-readable report: raw counts, row- and total-normalized matrices,
// and every percentage rounded half-up to two decimals.
nlohmann::json report_json(const EvalReport& r);
nlohmann::json report_json(const StratifiedReport& r);
// Plain-text table of the headline numbers.
std::string render_report(const EvalReport& r, const std::string& title = "");
std::string render_report(const StratifiedReport& r);

// Writes a CSV of seeded-sample pixels: pixel_id,patch,row,col,label,z0..zD-1.
// Labels come from `reference` when given (one H*W vector per patch),
// otherwise from the patch labels. Rows are ordered by pixel id. Returns the
// number of rows written.
int64_t export_pixel_embeddings(const UTAE& model, const std::vector<PatchSample>& patches, int64_t sample_count,
                                uint64_t seed, const std::filesystem::path& out,
                                const std::vector<std::vector<uint8_t>>* reference = nullptr);

}  // namespace croplandws
