#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "croplandws/raster_io.hpp"

namespace croplandws {

// Byte value used for nodata in binary layers and for "ignore" in fused labels.
inline constexpr uint8_t kNoLabel = 255;

struct ClassMapping {
  std::string product_id;
  std::set<int64_t> cropland_class_ids;
  std::set<int64_t> nodata_class_ids;
  // Codes that map to non-crop. In strict mode a code found in none of the
  // three sets is an error; otherwise it also maps to non-crop.
  std::set<int64_t> noncrop_class_ids;
  bool strict = false;

  void validate() const;
};

// Single-byte layer on a grid: {0, 1, kNoLabel}.
struct BinaryLayer {
  RasterGrid grid;
  std::vector<uint8_t> values;
};

// Band 0 of `raw` mapped to {0, 1, kNoLabel}. Pixels invalid in the raster
// (container nodata or NaN) become kNoLabel too.
BinaryLayer binarize_product(const Raster& raw, const ClassMapping& mapping);

// Per-pixel most frequent class over the bands of a per-date class stack.
// Codes in `ignore_codes` and invalid values do not vote; ties go to the
// smallest code; pixels with no vote get `fill`.
Raster temporal_mode(const Raster& per_date, const std::set<int64_t>& ignore_codes, double fill);

struct ProductStack {
  RasterGrid grid;
  std::vector<std::vector<uint8_t>> layers;
  std::vector<std::string> product_ids;

  void add(const std::string& id, const BinaryLayer& layer);
  int64_t size() const { return static_cast<int64_t>(layers.size()); }
  void validate() const;
};

struct QualityMask {
  RasterGrid grid;
  std::vector<uint8_t> mask;  // 1 = every product agrees and none is nodata
};

struct FusedLabels {
  RasterGrid grid;
  std::vector<uint8_t> labels;  // {0, 1} where mask = 1, kNoLabel elsewhere
};

struct FusionResult {
  QualityMask mask;
  FusedLabels labels;
};

FusionResult rate_quality(const ProductStack& stack);

struct FusionStats {
  double label_ratio = 0.0;  // fraction of pixels with mask = 1
  int64_t high_quality_pixels = 0;
  int64_t total_pixels = 0;
  // Macro F1 (percent) of fused labels vs. the reference over mask = 1
  // pixels; absent without a reference or when no pixel is comparable.
  std::optional<double> macro_f1;
};

// reference values: {0, 1}; anything else is skipped.
FusionStats fusion_stats(const QualityMask& mask, const FusedLabels& labels,
                         const std::optional<std::vector<uint8_t>>& reference = std::nullopt);

}  // namespace croplandws
