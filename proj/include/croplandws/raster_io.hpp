#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "croplandws/tensor.hpp"

namespace croplandws {

// North-up pixel grid. origin is the outer corner of pixel (0, 0); rows grow
// southwards, so pixel (r, c) spans x in [ox + c*ps, ox + (c+1)*ps) and
// y in (oy - (r+1)*ps, oy - r*ps].
struct RasterGrid {
  int64_t width = 0;
  int64_t height = 0;
  double origin_x = 0.0;
  double origin_y = 0.0;
  double pixel_size = 1.0;
  std::string crs_id;

  void validate() const;
  int64_t pixels() const { return width * height; }
  bool operator==(const RasterGrid&) const = default;
};

bool aligned(const RasterGrid& a, const RasterGrid& b);
void require_aligned(const RasterGrid& a, const RasterGrid& b, const std::string& what);

enum class SampleType { UInt8, UInt16, Int16, UInt32, Int32, Float32, Float64 };

std::string to_string(SampleType t);
SampleType sample_type_from_string(const std::string& s);

// Multi-band raster held as doubles, pixel-interleaved (H x W x B). Every
// supported on-disk sample type is exactly representable, so read/write
// round-trips are lossless.
struct Raster {
  RasterGrid grid;
  std::vector<std::string> band_names;
  SampleType sample_type = SampleType::Float32;
  std::optional<double> nodata;  // NaN is a valid nodata value
  std::vector<double> data;
  std::vector<uint8_t> valid;  // H x W; 0 where any band is nodata/NaN

  Raster() = default;
  Raster(RasterGrid g, std::vector<std::string> bands, SampleType type, std::optional<double> nodata_value = {});

  int64_t bands() const { return static_cast<int64_t>(band_names.size()); }
  double& at(int64_t row, int64_t col, int64_t band = 0) {
    return data[static_cast<size_t>((row * grid.width + col) * bands() + band)];
  }
  double at(int64_t row, int64_t col, int64_t band = 0) const {
    return data[static_cast<size_t>((row * grid.width + col) * bands() + band)];
  }
  // Recomputes `valid` from nodata and NaN values.
  void refresh_validity();
  // One band as a flat H*W vector.
  std::vector<double> band(int64_t b) const;
  int64_t band_index(const std::string& name) const;
};

struct WriteOptions {
  int64_t tile_size = 256;  // rounded to a multiple of 16 and shrunk for small rasters
  bool compress = true;     // deflate
};

// Reads a (Geo)TIFF. An empty band_subset selects every band, otherwise the
// named bands in the requested order.
Raster read_raster(const std::filesystem::path& path, const std::vector<std::string>& band_subset = {});
void write_raster(const std::filesystem::path& path, const Raster& raster, const WriteOptions& options = {});

enum class Resampling { Nearest, Average };

// Resamples a raster onto a target grid sharing its CRS. Average resampling
// weights source pixels by overlap area and skips invalid pixels.
Raster align_to_grid(const Raster& source, const RasterGrid& target, Resampling resampling);

struct TileIndex {
  int64_t tile_row = 0;
  int64_t tile_col = 0;
  int64_t row0 = 0;
  int64_t col0 = 0;
  int64_t rows = 0;
  int64_t cols = 0;
  int64_t stride = 0;
  // Padding needed to reach the nominal tile size when the grid is smaller
  // than one tile along an axis.
  int64_t pad_rows = 0;
  int64_t pad_cols = 0;

  bool operator==(const TileIndex&) const = default;
};

// Sliding-window plan. Windows start every `stride` pixels; the last window
// along each axis is shifted inward so that it ends at the grid edge.
std::vector<TileIndex> tile_plan(const RasterGrid& grid, int64_t tile, int64_t stride);

struct ProbTile {
  TileIndex index;
  Tensor probs;  // [K, rows, cols]
};

// Per-pixel mean of the probability vectors of every tile covering the pixel.
// Returns [K, H, W]. Independent of tile order.
Tensor mosaic_probabilistic(const std::vector<ProbTile>& tiles, const RasterGrid& grid);

}  // namespace croplandws
