#include "croplandws/mapping_eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include "croplandws/errors.hpp"
#include "croplandws/weak_supervision.hpp"

namespace croplandws {

TilePredictor model_predictor(const UTAE& model) {
  return [&model](const SITSCube& tile, const TileIndex&) {
    const ForwardResult fwd = model.forward(tile);
    const Tensor& p = fwd.probs.value();
    return p.reshaped({p.dim(1), p.dim(2), p.dim(3)});
  };
}

std::vector<uint8_t> argmax_binary(const Tensor& probs) {
  if (probs.rank() != 3) throw std::invalid_argument("argmax_binary: expected [K, H, W]");
  const int64_t K = probs.dim(0), P = probs.dim(1) * probs.dim(2);
  std::vector<uint8_t> out(static_cast<size_t>(P), 0);
  for (int64_t p = 0; p < P; ++p) {
    int64_t best = 0;
    for (int64_t k = 1; k < K; ++k)
      if (probs[k * P + p] > probs[best * P + p]) best = k;  // strict: ties stay with the lower class
    out[static_cast<size_t>(p)] = static_cast<uint8_t>(best);
  }
  return out;
}

RegionMap map_region(const SITSCube& cube, const RasterGrid& grid, int64_t tile, int64_t stride,
                     const TilePredictor& predict, int jobs) {
  cube.validate();
  grid.validate();
  if (grid.height != cube.H() || grid.width != cube.W()) throw DataError("map_region: cube does not match the grid");
  const auto plan = tile_plan(grid, tile, stride);
  std::vector<ProbTile> tiles(plan.size());
  std::atomic<size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (size_t i = next++; i < plan.size(); i = next++) {
      try {
        const TileIndex& ix = plan[i];
        Tensor p = predict(tile_cube(cube, ix), ix);
        if (p.rank() == 4 && p.dim(0) == 1) p = p.reshaped({p.dim(1), p.dim(2), p.dim(3)});
        if (p.rank() != 3 || p.dim(1) != ix.rows + ix.pad_rows || p.dim(2) != ix.cols + ix.pad_cols)
          throw DataError("map_region: predictor returned " + shape_str(p.shape()) + " for a " +
                          std::to_string(ix.rows + ix.pad_rows) + "x" + std::to_string(ix.cols + ix.pad_cols) + " tile");
        if (ix.pad_rows || ix.pad_cols) {
          Tensor crop({p.dim(0), ix.rows, ix.cols});
          for (int64_t k = 0; k < p.dim(0); ++k)
            for (int64_t r = 0; r < ix.rows; ++r)
              for (int64_t c = 0; c < ix.cols; ++c) crop[(k * ix.rows + r) * ix.cols + c] = p[(k * p.dim(1) + r) * p.dim(2) + c];
          p = std::move(crop);
        }
        tiles[i] = {ix, std::move(p)};
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = plan.size();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(plan.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  RegionMap out;
  out.grid = grid;
  out.probs = mosaic_probabilistic(tiles, grid);
  out.binary = argmax_binary(out.probs);
  const int64_t HW = cube.H() * cube.W();
  for (int64_t p = 0; p < HW; ++p) {
    bool seen = false;
    for (int64_t t = 0; t < cube.T() && !seen; ++t) seen = cube.validity[static_cast<size_t>(t * HW + p)] != 0;
    if (!seen) out.binary[static_cast<size_t>(p)] = 255;
  }
  return out;
}

RegionMap map_region(const Checkpoint& ckpt, const SITSCube& raw_cube, const RasterGrid& grid, int64_t tile,
                     int64_t stride, int jobs) {
  raw_cube.validate();
  const UTAE model = model_from_checkpoint(ckpt);
  const ModelConfig& cfg = model.config();
  // every tile, padded or not, is tile x tile
  cfg.check_input(raw_cube.T(), raw_cube.C(), tile, tile);
  SITSCube cube = raw_cube;
  if (!ckpt.normalization.empty()) {
    if (static_cast<int64_t>(ckpt.normalization.mean.size()) != cube.C())
      throw DataError("map_region: checkpoint normalization has the wrong channel count");
    normalize(cube, ckpt.normalization);
  }
  return map_region(cube, grid, tile, stride, model_predictor(model), jobs);
}

Raster probability_raster(const RegionMap& map) {
  const int64_t K = map.probs.dim(0), HW = map.grid.pixels();
  std::vector<std::string> names;
  for (int64_t k = 0; k < K; ++k) names.push_back(K == 2 ? (k == 0 ? "p_noncrop" : "p_crop") : "p_class" + std::to_string(k));
  Raster r(map.grid, names, SampleType::Float32);
  for (int64_t p = 0; p < HW; ++p)
    for (int64_t k = 0; k < K; ++k) r.data[static_cast<size_t>(p * K + k)] = static_cast<float>(map.probs[k * HW + p]);
  r.refresh_validity();
  return r;
}

Raster binary_raster(const RasterGrid& grid, const std::vector<uint8_t>& binary) {
  if (static_cast<int64_t>(binary.size()) != grid.pixels()) throw DataError("binary_raster: size does not match the grid");
  Raster r(grid, {"cropland"}, SampleType::UInt8, 255.0);
  for (size_t p = 0; p < binary.size(); ++p) r.data[p] = binary[p];
  r.refresh_validity();
  return r;
}

// ---------------------------------------------------------------------------

std::string to_string(Stratum s) {
  switch (s) {
    case Stratum::Plain: return "plain";
    case Stratum::Hill: return "hill";
    case Stratum::Mountain: return "mountain";
    case Stratum::Unknown: return "unknown";
  }
  return "unknown";
}

Stratum classify_slope(double degrees) {
  if (std::isnan(degrees)) return Stratum::Unknown;
  if (degrees < 2.0) return Stratum::Plain;
  if (degrees < 6.0) return Stratum::Hill;
  return Stratum::Mountain;
}

TerrainStrata slope_stratify(const std::vector<double>& dem, const std::vector<uint8_t>& dem_valid,
                             const RasterGrid& grid, double cell) {
  grid.validate();
  if (!(cell > 0.0)) throw ConfigError("slope_stratify: cell size must be positive");
  const int64_t H = grid.height, W = grid.width;
  if (static_cast<int64_t>(dem.size()) != H * W || (!dem_valid.empty() && static_cast<int64_t>(dem_valid.size()) != H * W))
    throw DataError("slope_stratify: DEM does not match the grid");
  auto ok = [&](int64_t r, int64_t c) {
    const auto i = static_cast<size_t>(r * W + c);
    return (dem_valid.empty() || dem_valid[i]) && std::isfinite(dem[i]);
  };

  TerrainStrata out;
  out.grid = grid;
  out.slope.assign(static_cast<size_t>(H * W), std::numeric_limits<double>::quiet_NaN());
  out.classes.assign(static_cast<size_t>(H * W), Stratum::Unknown);
  for (int64_t r = 0; r < H; ++r)
    for (int64_t c = 0; c < W; ++c) {
      if (!ok(r, c)) continue;
      const double centre = dem[static_cast<size_t>(r * W + c)];
      auto inside = [&](int64_t rr, int64_t cc) { return ok(rr, cc) ? dem[static_cast<size_t>(rr * W + cc)] : centre; };
      // linear extrapolation beyond the border, one axis at a time
      auto col_ext = [&](int64_t rr, int64_t cc) {
        if (cc < 0) return W >= 2 ? 2 * inside(rr, 0) - inside(rr, 1) : inside(rr, 0);
        if (cc >= W) return W >= 2 ? 2 * inside(rr, W - 1) - inside(rr, W - 2) : inside(rr, W - 1);
        return inside(rr, cc);
      };
      auto z = [&](int64_t rr, int64_t cc) {
        if (rr < 0) return H >= 2 ? 2 * col_ext(0, cc) - col_ext(1, cc) : col_ext(0, cc);
        if (rr >= H) return H >= 2 ? 2 * col_ext(H - 1, cc) - col_ext(H - 2, cc) : col_ext(H - 1, cc);
        return col_ext(rr, cc);
      };
      const double a = z(r - 1, c - 1), b = z(r - 1, c), cc = z(r - 1, c + 1);
      const double d = z(r, c - 1), f = z(r, c + 1);
      const double g = z(r + 1, c - 1), h = z(r + 1, c), i = z(r + 1, c + 1);
      const double dzdx = ((cc + 2 * f + i) - (a + 2 * d + g)) / (8 * cell);
      const double dzdy = ((g + 2 * h + i) - (a + 2 * b + cc)) / (8 * cell);
      const double deg = std::atan(std::hypot(dzdx, dzdy)) * 180.0 / std::numbers::pi;
      out.slope[static_cast<size_t>(r * W + c)] = deg;
      out.classes[static_cast<size_t>(r * W + c)] = classify_slope(deg);
    }
  return out;
}

TerrainStrata slope_stratify(const Raster& dem) {
  return slope_stratify(dem.band(0), dem.valid, dem.grid, dem.grid.pixel_size);
}

StratifiedReport stratified_report(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref,
                                   const std::vector<uint8_t>& valid, const TerrainStrata& strata) {
  const size_t n = strata.classes.size();
  if (pred.size() != n || ref.size() != n || (!valid.empty() && valid.size() != n))
    throw DataError("stratified_report: inputs are not aligned with the strata");
  StratifiedReport out;
  std::map<Stratum, ConfusionMatrix> cms;
  for (size_t p = 0; p < n; ++p) {
    const Stratum s = strata.classes[p];
    if (s == Stratum::Unknown || (!valid.empty() && !valid[p]) || pred[p] > 1 || ref[p] > 1) continue;
    ++cms[s].counts[ref[p]][pred[p]];
    ++out.global.counts[ref[p]][pred[p]];
  }
  for (Stratum s : {Stratum::Plain, Stratum::Hill, Stratum::Mountain}) {
    auto it = cms.find(s);
    if (it == cms.end()) out.absent.push_back(s);
    else out.strata.emplace(s, metrics(it->second));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json scores_json(const ClassScores& s) {
  return {{"pa", round_half_up(s.pa)},  {"ua", round_half_up(s.ua)},
          {"f1", round_half_up(s.f1)},  {"iou", round_half_up(s.iou)},
          {"degenerate", s.degenerate}, {"absent", s.absent}};
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << round_half_up(v);
  return os.str();
}

}  // namespace

nlohmann::json report_json(const EvalReport& r) {
  const auto& c = r.cm.counts;
  const double total = static_cast<double>(r.cm.total());
  nlohmann::json rows = nlohmann::json::array(), shares = nlohmann::json::array();
  for (int i = 0; i < 2; ++i) {
    const double row = static_cast<double>(c[i][0] + c[i][1]);
    rows.push_back({row > 0 ? c[i][0] / row : 0.0, row > 0 ? c[i][1] / row : 0.0});
    shares.push_back({total > 0 ? c[i][0] / total : 0.0, total > 0 ? c[i][1] / total : 0.0});
  }
  return {{"oa", round_half_up(r.oa)},
          {"miou", round_half_up(r.miou)},
          {"avg_f1", round_half_up(r.avg_f1)},
          {"crop", scores_json(r.crop)},
          {"noncrop", scores_json(r.noncrop)},
          {"confusion",
           {{"rows", "reference (non-crop, crop)"},
            {"cols", "prediction (non-crop, crop)"},
            {"counts", {{c[0][0], c[0][1]}, {c[1][0], c[1][1]}}},
            {"row_normalized", rows},
            {"total_normalized", shares}}},
          {"exact", {{"oa", r.oa}, {"miou", r.miou}, {"avg_f1", r.avg_f1}, {"crop_f1", r.crop.f1}, {"noncrop_f1", r.noncrop.f1}}}};
}

nlohmann::json report_json(const StratifiedReport& r) {
  nlohmann::json j;
  j["global"] = r.global.total() > 0 ? report_json(metrics(r.global)) : nlohmann::json(nullptr);
  j["strata"] = nlohmann::json::object();
  for (const auto& [s, rep] : r.strata) {
    j["strata"][to_string(s)] = report_json(rep);
    j["strata"][to_string(s)]["pixels"] = rep.cm.total();
  }
  j["absent"] = nlohmann::json::array();
  for (Stratum s : r.absent) j["absent"].push_back(to_string(s));
  return j;
}

std::string render_report(const EvalReport& r, const std::string& title) {
  std::ostringstream os;
  if (!title.empty()) os << title << '\n';
  os << std::left << std::setw(10) << "class" << std::right << std::setw(8) << "PA" << std::setw(8) << "UA"
     << std::setw(8) << "F1" << std::setw(8) << "IoU" << '\n';
  auto line = [&](const char* name, const ClassScores& s) {
    os << std::left << std::setw(10) << name << std::right << std::setw(8) << pct(s.pa) << std::setw(8) << pct(s.ua)
       << std::setw(8) << pct(s.f1) << std::setw(8) << pct(s.iou) << '\n';
  };
  line("crop", r.crop);
  line("non-crop", r.noncrop);
  os << "OA " << pct(r.oa) << "  mIoU " << pct(r.miou) << "  avg F1 " << pct(r.avg_f1) << "  pixels " << r.cm.total()
     << '\n';
  return os.str();
}

std::string render_report(const StratifiedReport& r) {
  std::ostringstream os;
  if (r.global.total() > 0) os << render_report(metrics(r.global), "all strata") << '\n';
  for (const auto& [s, rep] : r.strata) os << render_report(rep, to_string(s)) << '\n';
  for (Stratum s : r.absent) os << to_string(s) << ": no pixels\n";
  return os.str();
}

int64_t export_pixel_embeddings(const UTAE& model, const std::vector<PatchSample>& patches, int64_t sample_count,
                                uint64_t seed, const std::filesystem::path& out,
                                const std::vector<std::vector<uint8_t>>* reference) {
  if (sample_count < 0) throw ConfigError("export_pixel_embeddings: sample_count must be >= 0");
  if (reference && reference->size() != patches.size())
    throw DataError("export_pixel_embeddings: one reference vector per patch is required");
  std::vector<int64_t> offset{0};
  for (const auto& p : patches) offset.push_back(offset.back() + p.rows() * p.cols());
  std::vector<int64_t> ids = seeded_sample(offset.back(), sample_count, seed);
  std::sort(ids.begin(), ids.end());

  // feature width without running the model: sum of decoder widths
  int64_t D = 0;
  for (int l = 0; l <= model.config().levels; ++l) D += model.config().widths[static_cast<size_t>(l)];

  if (!out.parent_path().empty()) std::filesystem::create_directories(out.parent_path());
  std::ofstream f(out, std::ios::trunc);
  if (!f) throw DataError("export_pixel_embeddings: cannot write " + out.string());
  f << "pixel_id,patch,row,col,label";
  for (int64_t d = 0; d < D; ++d) f << ",z" << d;
  f << '\n';

  size_t k = 0;
  char buf[32];
  for (size_t pi = 0; pi < patches.size() && k < ids.size(); ++pi) {
    if (ids[k] >= offset[pi + 1]) continue;
    const PatchSample& patch = patches[pi];
    const int64_t H = patch.rows(), W = patch.cols();
    const Tensor z = feature_space(model.forward(patch.cube).maps, H, W).value();
    if (z.dim(1) != D) throw std::logic_error("export_pixel_embeddings: unexpected feature width");
    const auto& labels = reference ? (*reference)[pi] : patch.labels;
    if (static_cast<int64_t>(labels.size()) != H * W) throw DataError("export_pixel_embeddings: label size mismatch");
    for (; k < ids.size() && ids[k] < offset[pi + 1]; ++k) {
      const int64_t p = ids[k] - offset[pi];
      f << ids[k] << ',' << pi << ',' << p / W << ',' << p % W << ',' << static_cast<int>(labels[static_cast<size_t>(p)]);
      for (int64_t d = 0; d < D; ++d) {
        std::snprintf(buf, sizeof buf, ",%.9g", z[d * H * W + p]);
        f << buf;
      }
      f << '\n';
    }
  }
  return static_cast<int64_t>(ids.size());
}

}  // namespace croplandws
