#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "croplandws/label_fusion.hpp"
#include "croplandws/raster_io.hpp"
#include "croplandws/tensor.hpp"

namespace croplandws {

struct Date {
  int year = 1970;
  int month = 1;
  int day = 1;

  // Parses YYYY-MM-DD; throws ConfigError on malformed or impossible dates.
  static Date parse(const std::string& s);
  std::string str() const;
  // Days since 1970-01-01 (proleptic Gregorian).
  int64_t days() const;
  auto operator<=>(const Date&) const = default;
};

struct SceneRecord {
  Date timestamp;
  Tensor bands;                     // [C, H, W] surface reflectance
  std::vector<uint8_t> cloud_mask;  // H*W, 1 = cloud or otherwise unusable
  double cloud_fraction = 0.0;

  int64_t height() const { return bands.dim(1); }
  int64_t width() const { return bands.dim(2); }
  void update_cloud_fraction();
};

// How a QA band marks cloudy pixels: any of the listed bits set, or the
// value being one of the listed classes.
struct QaRule {
  enum class Mode { Bits, Values };
  Mode mode = Mode::Bits;
  std::vector<int> bits{10, 11};
  std::set<int64_t> values;
};

// 1 where the QA value flags cloud; invalid QA pixels count as cloudy.
std::vector<uint8_t> decode_cloud_mask(const Raster& qa, const QaRule& rule);

std::vector<SceneRecord> filter_scenes(const std::vector<SceneRecord>& scenes, double max_cloud);

// Replaces each cloudy pixel of `target` by the value of the first scene in
// `neighbors` (ordered by temporal distance) that is clear there. Pixels
// clear nowhere become NaN and stay flagged.
SceneRecord fill_clouds(const SceneRecord& target, const std::vector<SceneRecord>& neighbors);

// Orders candidates by |Δdays| to the target, ties to the earlier scene.
std::vector<SceneRecord> neighbors_by_time(const SceneRecord& target, const std::vector<SceneRecord>& pool);

enum class Period { Monthly, Seasonal, Annual };

Period period_from_string(const std::string& s);
std::string to_string(Period p);
int period_count(Period p);
// 1-based period index of a date (month, calendar quarter, or 1).
int period_of(const Date& d, Period p);

struct SITSCube {
  Tensor frames;                  // [T, C, H, W]; 0 where invalid
  std::vector<int> period_labels; // T entries, 1-based
  std::vector<uint8_t> validity;  // T*H*W

  int64_t T() const { return frames.dim(0); }
  int64_t C() const { return frames.dim(1); }
  int64_t H() const { return frames.dim(2); }
  int64_t W() const { return frames.dim(3); }
  // validity as a [T, 1, H, W] tensor of 0/1.
  Tensor validity_tensor() const;
  // Cube restricted to a pixel window.
  SITSCube window(int64_t row0, int64_t col0, int64_t rows, int64_t cols) const;
  void validate() const;
};

// Per-period masked mean of every scene of `year`. Scenes of other years are
// ignored. Values are summed in sorted order so scene order cannot change
// the result.
SITSCube composite(const std::vector<SceneRecord>& scenes, Period period, int year);

struct PatchSample {
  SITSCube cube;                     // tile-sized
  std::vector<uint8_t> quality_mask; // rows*cols
  std::vector<uint8_t> labels;       // rows*cols, kNoLabel = ignore
  TileIndex tile;

  int64_t rows() const { return cube.H(); }
  int64_t cols() const { return cube.W(); }
};

// The window's sub-cube, zero-padded (validity 0) to the nominal tile size
// when the plan asks for padding.
SITSCube tile_cube(const SITSCube& cube, const TileIndex& index);

// One patch per window. Windows flagged with padding are zero-padded up to
// the nominal tile size with validity 0 and ignored labels.
std::vector<PatchSample> build_patches(const SITSCube& cube, const QualityMask& mask, const FusedLabels& labels,
                                       const std::vector<TileIndex>& plan);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  bool empty() const { return mean.empty(); }
};

// Per-channel mean and population std over valid pixels of every patch.
NormStats compute_norm_stats(const std::vector<PatchSample>& patches);
NormStats compute_norm_stats(const SITSCube& cube);
// z-scores valid values in place; invalid entries become exactly 0.
void normalize(SITSCube& cube, const NormStats& stats);

// Binary cube store: a small JSON header followed by little-endian data.
void write_cube(const std::filesystem::path& path, const SITSCube& cube);
SITSCube read_cube(const std::filesystem::path& path);

}  // namespace croplandws
