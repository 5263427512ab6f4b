#include "croplandws/label_fusion.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "croplandws/errors.hpp"
#include "croplandws/metrics.hpp"

namespace croplandws {

void ClassMapping::validate() const {
  for (auto c : cropland_class_ids) {
    if (nodata_class_ids.count(c))
      throw ConfigError(product_id + ": class " + std::to_string(c) + " is both cropland and nodata");
    if (noncrop_class_ids.count(c))
      throw ConfigError(product_id + ": class " + std::to_string(c) + " is both cropland and non-crop");
  }
  for (auto c : nodata_class_ids)
    if (noncrop_class_ids.count(c))
      throw ConfigError(product_id + ": class " + std::to_string(c) + " is both nodata and non-crop");
  if (cropland_class_ids.empty()) throw ConfigError(product_id + ": no cropland class ids");
}

BinaryLayer binarize_product(const Raster& raw, const ClassMapping& mapping) {
  mapping.validate();
  if (raw.bands() < 1) throw DataError(mapping.product_id + ": product raster has no bands");
  BinaryLayer out{raw.grid, std::vector<uint8_t>(static_cast<size_t>(raw.grid.pixels()), kNoLabel)};
  for (int64_t p = 0; p < raw.grid.pixels(); ++p) {
    if (!raw.valid[static_cast<size_t>(p)]) continue;
    const double v = raw.data[static_cast<size_t>(p * raw.bands())];
    const auto code = static_cast<int64_t>(v);
    if (static_cast<double>(code) != v)
      throw DataError(mapping.product_id + ": non-integer class code " + std::to_string(v));
    if (mapping.nodata_class_ids.count(code)) continue;
    if (mapping.cropland_class_ids.count(code)) {
      out.values[static_cast<size_t>(p)] = 1;
    } else {
      if (mapping.strict && !mapping.noncrop_class_ids.count(code))
        throw DataError(mapping.product_id + ": unmapped class code " + std::to_string(code) + " at pixel (" +
                        std::to_string(p / raw.grid.width) + ", " + std::to_string(p % raw.grid.width) + ")");
      out.values[static_cast<size_t>(p)] = 0;
    }
  }
  return out;
}

Raster temporal_mode(const Raster& per_date, const std::set<int64_t>& ignore_codes, double fill) {
  const int64_t B = per_date.bands();
  if (B < 1) throw DataError("temporal_mode: empty stack");
  Raster out(per_date.grid, {"mode"}, per_date.sample_type, per_date.nodata);
  const bool nan_nodata = per_date.nodata && std::isnan(*per_date.nodata);
  std::map<int64_t, int64_t> votes;
  for (int64_t p = 0; p < per_date.grid.pixels(); ++p) {
    votes.clear();
    for (int64_t b = 0; b < B; ++b) {
      const double v = per_date.data[static_cast<size_t>(p * B + b)];
      if (std::isnan(v) || (per_date.nodata && !nan_nodata && v == *per_date.nodata)) continue;
      const auto code = static_cast<int64_t>(v);
      if (ignore_codes.count(code)) continue;
      ++votes[code];
    }
    double best = fill;
    int64_t best_n = 0;
    for (const auto& [code, n] : votes)  // ascending code order, so ties keep the smallest
      if (n > best_n) {
        best = static_cast<double>(code);
        best_n = n;
      }
    out.data[static_cast<size_t>(p)] = best;
  }
  out.refresh_validity();
  return out;
}

void ProductStack::add(const std::string& id, const BinaryLayer& layer) {
  if (layers.empty())
    grid = layer.grid;
  else
    require_aligned(grid, layer.grid, "product stack (" + id + ")");
  if (static_cast<int64_t>(layer.values.size()) != layer.grid.pixels())
    throw DataError("product stack (" + id + "): layer size does not match its grid");
  layers.push_back(layer.values);
  product_ids.push_back(id);
}

void ProductStack::validate() const {
  if (layers.size() < 2) throw DataError("label fusion needs at least two products, got " + std::to_string(layers.size()));
  if (product_ids.size() != layers.size()) throw DataError("product stack: id count does not match layer count");
  for (const auto& l : layers) {
    if (static_cast<int64_t>(l.size()) != grid.pixels()) throw DataError("product stack: layer size mismatch");
    for (uint8_t v : l)
      if (v > 1 && v != kNoLabel) throw DataError("product stack: layer values must be 0, 1 or nodata");
  }
}

FusionResult rate_quality(const ProductStack& stack) {
  stack.validate();
  const auto n = static_cast<size_t>(stack.grid.pixels());
  FusionResult r{{stack.grid, std::vector<uint8_t>(n, 0)}, {stack.grid, std::vector<uint8_t>(n, kNoLabel)}};
  for (size_t p = 0; p < n; ++p) {
    const uint8_t first = stack.layers[0][p];
    if (first == kNoLabel) continue;
    bool agree = true;
    for (size_t m = 1; m < stack.layers.size() && agree; ++m) agree = stack.layers[m][p] == first;
    if (!agree) continue;
    r.mask.mask[p] = 1;
    r.labels.labels[p] = first;
  }
  return r;
}

FusionStats fusion_stats(const QualityMask& mask, const FusedLabels& labels,
                         const std::optional<std::vector<uint8_t>>& reference) {
  require_aligned(mask.grid, labels.grid, "fusion_stats");
  const auto n = static_cast<size_t>(mask.grid.pixels());
  if (mask.mask.size() != n || labels.labels.size() != n) throw DataError("fusion_stats: raster size mismatch");
  FusionStats s;
  s.total_pixels = static_cast<int64_t>(n);
  s.high_quality_pixels = std::count(mask.mask.begin(), mask.mask.end(), 1);
  s.label_ratio = static_cast<double>(s.high_quality_pixels) / static_cast<double>(n);
  if (reference) {
    if (reference->size() != n) throw DataError("fusion_stats: reference size mismatch");
    ConfusionMatrix cm;
    for (size_t p = 0; p < n; ++p) {
      if (!mask.mask[p]) continue;
      const uint8_t ref = (*reference)[p], lab = labels.labels[p];
      if (ref > 1 || lab > 1) continue;
      ++cm.counts[ref][lab];
    }
    if (cm.total() > 0) s.macro_f1 = metrics(cm).avg_f1;
  }
  return s;
}

}  // namespace croplandws
