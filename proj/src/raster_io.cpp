#include "croplandws/raster_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "croplandws/errors.hpp"

namespace croplandws {

void RasterGrid::validate() const {
  if (width <= 0 || height <= 0) throw DataError("raster grid must have positive width and height");
  if (!(pixel_size > 0.0) || !std::isfinite(pixel_size)) throw DataError("raster grid pixel size must be positive");
  if (!std::isfinite(origin_x) || !std::isfinite(origin_y)) throw DataError("raster grid origin must be finite");
}

bool aligned(const RasterGrid& a, const RasterGrid& b) { return a == b; }

void require_aligned(const RasterGrid& a, const RasterGrid& b, const std::string& what) {
  if (!aligned(a, b))
    throw DataError(what + ": grids are not aligned (" + std::to_string(a.width) + "x" + std::to_string(a.height) + " " +
                    a.crs_id + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + " " + b.crs_id + ")");
}

std::string to_string(SampleType t) {
  switch (t) {
    case SampleType::UInt8: return "uint8";
    case SampleType::UInt16: return "uint16";
    case SampleType::Int16: return "int16";
    case SampleType::UInt32: return "uint32";
    case SampleType::Int32: return "int32";
    case SampleType::Float32: return "float32";
    case SampleType::Float64: return "float64";
  }
  return "?";
}

SampleType sample_type_from_string(const std::string& s) {
  for (auto t : {SampleType::UInt8, SampleType::UInt16, SampleType::Int16, SampleType::UInt32, SampleType::Int32,
                 SampleType::Float32, SampleType::Float64})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown sample type '" + s + "'");
}

Raster::Raster(RasterGrid g, std::vector<std::string> bands, SampleType type, std::optional<double> nodata_value)
    : grid(std::move(g)), band_names(std::move(bands)), sample_type(type), nodata(nodata_value) {
  grid.validate();
  data.assign(static_cast<size_t>(grid.pixels() * this->bands()), 0.0);
  valid.assign(static_cast<size_t>(grid.pixels()), 1);
}

void Raster::refresh_validity() {
  const int64_t B = bands();
  valid.assign(static_cast<size_t>(grid.pixels()), 1);
  const bool nan_nodata = nodata && std::isnan(*nodata);
  for (int64_t p = 0; p < grid.pixels(); ++p) {
    for (int64_t b = 0; b < B; ++b) {
      const double v = data[static_cast<size_t>(p * B + b)];
      if (std::isnan(v) || (nodata && !nan_nodata && v == *nodata)) {
        valid[static_cast<size_t>(p)] = 0;
        break;
      }
    }
  }
}

std::vector<double> Raster::band(int64_t b) const {
  if (b < 0 || b >= bands()) throw DataError("band index out of range");
  std::vector<double> out(static_cast<size_t>(grid.pixels()));
  for (int64_t p = 0; p < grid.pixels(); ++p) out[static_cast<size_t>(p)] = data[static_cast<size_t>(p * bands() + b)];
  return out;
}

int64_t Raster::band_index(const std::string& name) const {
  auto it = std::find(band_names.begin(), band_names.end(), name);
  if (it == band_names.end()) throw DataError("band '" + name + "' not present");
  return it - band_names.begin();
}

namespace {

bool is_float(SampleType t) { return t == SampleType::Float32 || t == SampleType::Float64; }

// Value written into pixels that receive no data.
double fill_value(const Raster& r, SampleType out_type) {
  if (r.nodata) return *r.nodata;
  if (is_float(out_type)) return std::numeric_limits<double>::quiet_NaN();
  switch (out_type) {
    case SampleType::UInt8: return 255;
    case SampleType::UInt16: return 65535;
    case SampleType::Int16: return -32768;
    case SampleType::UInt32: return 4294967295.0;
    case SampleType::Int32: return -2147483648.0;
    default: return 0;
  }
}

}  // namespace

Raster align_to_grid(const Raster& source, const RasterGrid& target, Resampling resampling) {
  target.validate();
  source.grid.validate();
  if (source.grid.crs_id != target.crs_id)
    throw DataError("align_to_grid: CRS mismatch (" + source.grid.crs_id + " vs " + target.crs_id + ")");
  const RasterGrid& sg = source.grid;
  const double s_x1 = sg.origin_x + static_cast<double>(sg.width) * sg.pixel_size;
  const double s_y1 = sg.origin_y - static_cast<double>(sg.height) * sg.pixel_size;
  const double t_x1 = target.origin_x + static_cast<double>(target.width) * target.pixel_size;
  const double t_y1 = target.origin_y - static_cast<double>(target.height) * target.pixel_size;
  if (std::min(s_x1, t_x1) <= std::max(sg.origin_x, target.origin_x) ||
      std::min(sg.origin_y, target.origin_y) <= std::max(s_y1, t_y1))
    throw DataError("align_to_grid: source and target do not overlap");

  if (aligned(sg, target)) return source;

  const int64_t B = source.bands();
  const SampleType out_type =
      resampling == Resampling::Nearest || is_float(source.sample_type) ? source.sample_type : SampleType::Float32;
  Raster out(target, source.band_names, out_type, source.nodata);
  const double fill = fill_value(source, out_type);
  bool any_missing = false;

  for (int64_t r = 0; r < target.height; ++r) {
    for (int64_t c = 0; c < target.width; ++c) {
      const size_t tp = static_cast<size_t>(r * target.width + c);
      bool ok = false;
      if (resampling == Resampling::Nearest) {
        const double x = target.origin_x + (static_cast<double>(c) + 0.5) * target.pixel_size;
        const double y = target.origin_y - (static_cast<double>(r) + 0.5) * target.pixel_size;
        const auto sc = static_cast<int64_t>(std::floor((x - sg.origin_x) / sg.pixel_size));
        const auto sr = static_cast<int64_t>(std::floor((sg.origin_y - y) / sg.pixel_size));
        if (sc >= 0 && sr >= 0 && sc < sg.width && sr < sg.height && source.valid[static_cast<size_t>(sr * sg.width + sc)]) {
          for (int64_t b = 0; b < B; ++b) out.at(r, c, b) = source.at(sr, sc, b);
          ok = true;
        }
      } else {
        // Footprint of the target pixel in fractional source pixel units.
        const double fx0 = (target.origin_x + static_cast<double>(c) * target.pixel_size - sg.origin_x) / sg.pixel_size;
        const double fx1 = fx0 + target.pixel_size / sg.pixel_size;
        const double fy0 = (sg.origin_y - (target.origin_y - static_cast<double>(r) * target.pixel_size)) / sg.pixel_size;
        const double fy1 = fy0 + target.pixel_size / sg.pixel_size;
        const int64_t c0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(fx0)));
        const int64_t c1 = std::min<int64_t>(sg.width, static_cast<int64_t>(std::ceil(fx1)));
        const int64_t r0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(fy0)));
        const int64_t r1 = std::min<int64_t>(sg.height, static_cast<int64_t>(std::ceil(fy1)));
        double wsum = 0.0;
        std::vector<double> acc(static_cast<size_t>(B), 0.0);
        for (int64_t sr = r0; sr < r1; ++sr) {
          const double oy = std::min(fy1, static_cast<double>(sr + 1)) - std::max(fy0, static_cast<double>(sr));
          if (oy <= 0) continue;
          for (int64_t sc = c0; sc < c1; ++sc) {
            if (!source.valid[static_cast<size_t>(sr * sg.width + sc)]) continue;
            const double ox = std::min(fx1, static_cast<double>(sc + 1)) - std::max(fx0, static_cast<double>(sc));
            if (ox <= 0) continue;
            const double w = ox * oy;
            wsum += w;
            for (int64_t b = 0; b < B; ++b) acc[static_cast<size_t>(b)] += w * source.at(sr, sc, b);
          }
        }
        if (wsum > 0) {
          for (int64_t b = 0; b < B; ++b) out.at(r, c, b) = acc[static_cast<size_t>(b)] / wsum;
          ok = true;
        }
      }
      if (!ok) {
        for (int64_t b = 0; b < B; ++b) out.at(r, c, b) = fill;
        out.valid[tp] = 0;
        any_missing = true;
      }
    }
  }
  if (any_missing && !out.nodata) out.nodata = fill;
  return out;
}

namespace {

struct AxisWindow {
  int64_t start;
  int64_t size;
  int64_t pad;
};

std::vector<AxisWindow> axis_windows(int64_t n, int64_t tile, int64_t stride) {
  if (n <= tile) return {{0, n, tile - n}};
  std::vector<AxisWindow> out;
  for (int64_t p = 0;; p += stride) {
    if (p + tile >= n) {
      out.push_back({n - tile, tile, 0});
      break;
    }
    out.push_back({p, tile, 0});
  }
  return out;
}

}  // namespace

std::vector<TileIndex> tile_plan(const RasterGrid& grid, int64_t tile, int64_t stride) {
  grid.validate();
  if (tile <= 0) throw ConfigError("tile size must be positive");
  if (stride <= 0 || stride > tile) throw ConfigError("stride must satisfy 0 < stride <= tile");
  const auto rows = axis_windows(grid.height, tile, stride);
  const auto cols = axis_windows(grid.width, tile, stride);
  std::vector<TileIndex> plan;
  plan.reserve(rows.size() * cols.size());
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < cols.size(); ++j)
      plan.push_back({static_cast<int64_t>(i), static_cast<int64_t>(j), rows[i].start, cols[j].start, rows[i].size,
                      cols[j].size, stride, rows[i].pad, cols[j].pad});
  return plan;
}

Tensor mosaic_probabilistic(const std::vector<ProbTile>& tiles, const RasterGrid& grid) {
  grid.validate();
  if (tiles.empty()) throw DataError("mosaic: no tiles");
  const int64_t K = tiles.front().probs.rank() == 3 ? tiles.front().probs.dim(0) : 0;
  if (K < 2) throw DataError("mosaic: tiles need at least two probability channels");
  const int64_t H = grid.height, W = grid.width;

  // Accumulate in a canonical tile order so the result is bit-identical for
  // any permutation of the input.
  std::vector<const ProbTile*> order;
  for (const auto& t : tiles) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](const ProbTile* a, const ProbTile* b) {
    const auto& x = a->index;
    const auto& y = b->index;
    return std::tie(x.row0, x.col0, x.rows, x.cols, x.tile_row, x.tile_col) <
           std::tie(y.row0, y.col0, y.rows, y.cols, y.tile_row, y.tile_col);
  });

  Tensor sum({K, H, W}, 0.0);
  std::vector<int64_t> count(static_cast<size_t>(H * W), 0);
  for (const ProbTile* t : order) {
    const TileIndex& ix = t->index;
    if (t->probs.shape() != Shape{K, ix.rows, ix.cols})
      throw DataError("mosaic: tile probability shape " + shape_str(t->probs.shape()) + " does not match window " +
                      std::to_string(ix.rows) + "x" + std::to_string(ix.cols) + " with " + std::to_string(K) +
                      " channels");
    if (ix.row0 < 0 || ix.col0 < 0 || ix.row0 + ix.rows > H || ix.col0 + ix.cols > W)
      throw DataError("mosaic: tile window outside grid");
    for (int64_t r = 0; r < ix.rows; ++r) {
      for (int64_t c = 0; c < ix.cols; ++c) {
        const int64_t p = (ix.row0 + r) * W + (ix.col0 + c);
        bool finite = true;
        for (int64_t k = 0; k < K; ++k) finite = finite && std::isfinite(t->probs[(k * ix.rows + r) * ix.cols + c]);
        if (!finite) continue;  // nodata prediction
        for (int64_t k = 0; k < K; ++k) sum[k * H * W + p] += t->probs[(k * ix.rows + r) * ix.cols + c];
        ++count[static_cast<size_t>(p)];
      }
    }
  }
  for (int64_t p = 0; p < H * W; ++p) {
    const auto n = count[static_cast<size_t>(p)];
    if (n == 0)
      throw DataError("mosaic: pixel (" + std::to_string(p / W) + ", " + std::to_string(p % W) + ") not covered by any tile");
    for (int64_t k = 0; k < K; ++k) sum[k * H * W + p] /= static_cast<double>(n);
  }
  return sum;
}

}  // namespace croplandws
