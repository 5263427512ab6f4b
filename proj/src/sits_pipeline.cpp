#include "croplandws/sits_pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>

#include "croplandws/errors.hpp"
#include "json.hpp"

namespace croplandws {

Date Date::parse(const std::string& s) {
  static const std::regex re(R"(^(\d{4})-(\d{2})-(\d{2})$)");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw ConfigError("malformed date '" + s + "' (expected YYYY-MM-DD)");
  Date d{std::stoi(m[1].str()), std::stoi(m[2].str()), std::stoi(m[3].str())};
  const std::chrono::year_month_day ymd{std::chrono::year{d.year}, std::chrono::month{static_cast<unsigned>(d.month)},
                                        std::chrono::day{static_cast<unsigned>(d.day)}};
  if (!ymd.ok()) throw ConfigError("invalid date '" + s + "'");
  return d;
}

std::string Date::str() const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", year, month, day);
  return buf;
}

int64_t Date::days() const {
  const std::chrono::year_month_day ymd{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                                        std::chrono::day{static_cast<unsigned>(day)}};
  return std::chrono::sys_days{ymd}.time_since_epoch().count();
}

void SceneRecord::update_cloud_fraction() {
  cloud_fraction = cloud_mask.empty()
                       ? 0.0
                       : static_cast<double>(std::count(cloud_mask.begin(), cloud_mask.end(), 1)) /
                             static_cast<double>(cloud_mask.size());
}

std::vector<uint8_t> decode_cloud_mask(const Raster& qa, const QaRule& rule) {
  std::vector<uint8_t> out(static_cast<size_t>(qa.grid.pixels()), 1);
  for (int64_t p = 0; p < qa.grid.pixels(); ++p) {
    if (!qa.valid[static_cast<size_t>(p)]) continue;
    const auto v = static_cast<int64_t>(qa.data[static_cast<size_t>(p * qa.bands())]);
    bool cloudy = false;
    if (rule.mode == QaRule::Mode::Bits) {
      for (int b : rule.bits) cloudy = cloudy || ((v >> b) & 1);
    } else {
      cloudy = rule.values.count(v) > 0;
    }
    out[static_cast<size_t>(p)] = cloudy ? 1 : 0;
  }
  return out;
}

std::vector<SceneRecord> filter_scenes(const std::vector<SceneRecord>& scenes, double max_cloud) {
  std::vector<SceneRecord> out;
  for (const auto& s : scenes)
    if (s.cloud_fraction <= max_cloud) out.push_back(s);
  return out;
}

std::vector<SceneRecord> neighbors_by_time(const SceneRecord& target, const std::vector<SceneRecord>& pool) {
  std::vector<const SceneRecord*> ptrs;
  for (const auto& s : pool)
    if (&s != &target) ptrs.push_back(&s);
  const int64_t t0 = target.timestamp.days();
  std::stable_sort(ptrs.begin(), ptrs.end(), [t0](const SceneRecord* a, const SceneRecord* b) {
    const int64_t da = std::abs(a->timestamp.days() - t0), db = std::abs(b->timestamp.days() - t0);
    if (da != db) return da < db;
    return a->timestamp < b->timestamp;
  });
  std::vector<SceneRecord> out;
  for (auto* p : ptrs) out.push_back(*p);
  return out;
}

SceneRecord fill_clouds(const SceneRecord& target, const std::vector<SceneRecord>& neighbors) {
  SceneRecord out = target;
  const int64_t C = target.bands.dim(0), HW = target.height() * target.width();
  for (const auto& n : neighbors)
    if (n.bands.shape() != target.bands.shape() || static_cast<int64_t>(n.cloud_mask.size()) != HW)
      throw DataError("fill_clouds: neighbour scene " + n.timestamp.str() + " has a different shape");
  for (int64_t p = 0; p < HW; ++p) {
    if (!target.cloud_mask[static_cast<size_t>(p)]) continue;
    const SceneRecord* src = nullptr;
    for (const auto& n : neighbors)
      if (!n.cloud_mask[static_cast<size_t>(p)]) {
        src = &n;
        break;
      }
    for (int64_t c = 0; c < C; ++c) out.bands[c * HW + p] = src ? src->bands[c * HW + p] : std::nan("");
    out.cloud_mask[static_cast<size_t>(p)] = src ? 0 : 1;
  }
  out.update_cloud_fraction();
  return out;
}

Period period_from_string(const std::string& s) {
  if (s == "monthly") return Period::Monthly;
  if (s == "seasonal") return Period::Seasonal;
  if (s == "annual") return Period::Annual;
  throw ConfigError("unknown compositing period '" + s + "' (monthly, seasonal or annual)");
}

std::string to_string(Period p) {
  switch (p) {
    case Period::Monthly: return "monthly";
    case Period::Seasonal: return "seasonal";
    case Period::Annual: return "annual";
  }
  return "?";
}

int period_count(Period p) {
  switch (p) {
    case Period::Monthly: return 12;
    case Period::Seasonal: return 4;
    case Period::Annual: return 1;
  }
  return 0;
}

int period_of(const Date& d, Period p) {
  switch (p) {
    case Period::Monthly: return d.month;
    case Period::Seasonal: return (d.month - 1) / 3 + 1;
    case Period::Annual: return 1;
  }
  return 0;
}

Tensor SITSCube::validity_tensor() const {
  Tensor m({T(), 1, H(), W()});
  for (int64_t i = 0; i < m.numel(); ++i) m[i] = validity[static_cast<size_t>(i)];
  return m;
}

SITSCube SITSCube::window(int64_t row0, int64_t col0, int64_t rows, int64_t cols) const {
  SITSCube out;
  out.frames = frames.window(row0, col0, rows, cols);
  out.period_labels = period_labels;
  out.validity.resize(static_cast<size_t>(T() * rows * cols));
  for (int64_t t = 0; t < T(); ++t)
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c)
        out.validity[static_cast<size_t>((t * rows + r) * cols + c)] =
            validity[static_cast<size_t>((t * H() + row0 + r) * W() + col0 + c)];
  return out;
}

void SITSCube::validate() const {
  if (frames.rank() != 4 || T() < 1) throw DataError("cube frames must be [T, C, H, W] with T >= 1");
  if (static_cast<int64_t>(period_labels.size()) != T()) throw DataError("cube period labels do not match T");
  if (static_cast<int64_t>(validity.size()) != T() * H() * W()) throw DataError("cube validity size mismatch");
}

SITSCube composite(const std::vector<SceneRecord>& scenes, Period period, int year) {
  if (scenes.empty()) throw DataError("composite: no scenes");
  const Shape shape = scenes.front().bands.shape();
  if (shape.size() != 3) throw DataError("composite: scene bands must be [C, H, W]");
  const int64_t C = shape[0], H = shape[1], W = shape[2], HW = H * W;
  const int T = period_count(period);

  std::vector<std::vector<const SceneRecord*>> groups(static_cast<size_t>(T));
  for (const auto& s : scenes) {
    if (s.bands.shape() != shape) throw DataError("composite: scene " + s.timestamp.str() + " has a different shape");
    if (s.timestamp.year != year) continue;
    groups[static_cast<size_t>(period_of(s.timestamp, period) - 1)].push_back(&s);
  }

  SITSCube cube;
  cube.frames = Tensor({T, C, H, W}, 0.0);
  cube.validity.assign(static_cast<size_t>(T * HW), 0);
  for (int t = 0; t < T; ++t) cube.period_labels.push_back(t + 1);

  // A scene contributes at a pixel when it is clear there and every channel
  // is finite.
  std::vector<const SceneRecord*> obs;
  std::vector<double> vals;
  for (int t = 0; t < T; ++t) {
    for (int64_t p = 0; p < HW; ++p) {
      obs.clear();
      for (const SceneRecord* s : groups[static_cast<size_t>(t)]) {
        bool ok = !s->cloud_mask[static_cast<size_t>(p)];
        for (int64_t c = 0; c < C && ok; ++c) ok = std::isfinite(s->bands[c * HW + p]);
        if (ok) obs.push_back(s);
      }
      if (obs.empty()) continue;
      cube.validity[static_cast<size_t>(t * HW + p)] = 1;
      for (int64_t c = 0; c < C; ++c) {
        vals.clear();
        for (const SceneRecord* s : obs) vals.push_back(s->bands[c * HW + p]);
        std::sort(vals.begin(), vals.end());
        double acc = 0.0;
        for (double v : vals) acc += v;
        cube.frames[(t * C + c) * HW + p] = acc / static_cast<double>(vals.size());
      }
    }
  }
  return cube;
}

SITSCube tile_cube(const SITSCube& cube, const TileIndex& ix) {
  if (ix.row0 < 0 || ix.col0 < 0 || ix.row0 + ix.rows > cube.H() || ix.col0 + ix.cols > cube.W())
    throw DataError("tile_cube: window outside the cube");
  SITSCube win = cube.window(ix.row0, ix.col0, ix.rows, ix.cols);
  if (ix.pad_rows == 0 && ix.pad_cols == 0) return win;
  const int64_t R = ix.rows + ix.pad_rows, K = ix.cols + ix.pad_cols;
  SITSCube out;
  out.period_labels = cube.period_labels;
  out.frames = Tensor({cube.T(), cube.C(), R, K}, 0.0);
  out.validity.assign(static_cast<size_t>(cube.T() * R * K), 0);
  for (int64_t t = 0; t < cube.T(); ++t)
    for (int64_t r = 0; r < ix.rows; ++r)
      for (int64_t c = 0; c < ix.cols; ++c) {
        for (int64_t ch = 0; ch < cube.C(); ++ch) out.frames.at(t, ch, r, c) = win.frames.at(t, ch, r, c);
        out.validity[static_cast<size_t>((t * R + r) * K + c)] =
            win.validity[static_cast<size_t>((t * ix.rows + r) * ix.cols + c)];
      }
  return out;
}

std::vector<PatchSample> build_patches(const SITSCube& cube, const QualityMask& mask, const FusedLabels& labels,
                                       const std::vector<TileIndex>& plan) {
  cube.validate();
  require_aligned(mask.grid, labels.grid, "build_patches");
  if (mask.grid.height != cube.H() || mask.grid.width != cube.W())
    throw DataError("build_patches: cube is " + std::to_string(cube.W()) + "x" + std::to_string(cube.H()) +
                    " but labels are " + std::to_string(mask.grid.width) + "x" + std::to_string(mask.grid.height));
  const int64_t W = cube.W();
  std::vector<PatchSample> out;
  out.reserve(plan.size());
  for (const auto& ix : plan) {
    if (ix.row0 < 0 || ix.col0 < 0 || ix.row0 + ix.rows > cube.H() || ix.col0 + ix.cols > W)
      throw DataError("build_patches: window outside the cube");
    const int64_t R = ix.rows + ix.pad_rows, K = ix.cols + ix.pad_cols;
    PatchSample s;
    s.tile = ix;
    s.cube = tile_cube(cube, ix);
    s.quality_mask.assign(static_cast<size_t>(R * K), 0);
    s.labels.assign(static_cast<size_t>(R * K), kNoLabel);
    for (int64_t r = 0; r < ix.rows; ++r)
      for (int64_t c = 0; c < ix.cols; ++c) {
        const auto src = static_cast<size_t>((ix.row0 + r) * W + ix.col0 + c);
        s.quality_mask[static_cast<size_t>(r * K + c)] = mask.mask[src];
        s.labels[static_cast<size_t>(r * K + c)] = labels.labels[src];
      }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

void accumulate_stats(const SITSCube& cube, std::vector<double>& sum, std::vector<double>& sq, std::vector<int64_t>& n,
                      const std::vector<double>* mean) {
  const int64_t C = cube.C(), HW = cube.H() * cube.W();
  for (int64_t t = 0; t < cube.T(); ++t)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < HW; ++p) {
        if (!cube.validity[static_cast<size_t>(t * HW + p)]) continue;
        const double v = cube.frames[(t * C + c) * HW + p];
        if (mean) {
          const double d = v - (*mean)[static_cast<size_t>(c)];
          sq[static_cast<size_t>(c)] += d * d;
        } else {
          sum[static_cast<size_t>(c)] += v;
          ++n[static_cast<size_t>(c)];
        }
      }
}

NormStats finish_stats(const std::vector<const SITSCube*>& cubes) {
  if (cubes.empty()) throw DataError("normalization: no data");
  const auto C = static_cast<size_t>(cubes.front()->C());
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  std::vector<int64_t> n(C, 0);
  for (auto* c : cubes) accumulate_stats(*c, sum, sq, n, nullptr);
  NormStats s;
  s.mean.resize(C);
  for (size_t c = 0; c < C; ++c) {
    if (n[c] == 0) throw DataError("normalization: channel " + std::to_string(c) + " has no valid pixel");
    s.mean[c] = sum[c] / static_cast<double>(n[c]);
  }
  for (auto* c : cubes) accumulate_stats(*c, sum, sq, n, &s.mean);
  s.std.resize(C);
  for (size_t c = 0; c < C; ++c) {
    s.std[c] = std::sqrt(sq[c] / static_cast<double>(n[c]));
    if (!(s.std[c] > 1e-12)) s.std[c] = 1.0;  // constant channel
  }
  return s;
}

}  // namespace

NormStats compute_norm_stats(const std::vector<PatchSample>& patches) {
  std::vector<const SITSCube*> cubes;
  for (const auto& p : patches) cubes.push_back(&p.cube);
  return finish_stats(cubes);
}

NormStats compute_norm_stats(const SITSCube& cube) { return finish_stats({&cube}); }

void normalize(SITSCube& cube, const NormStats& stats) {
  const int64_t C = cube.C(), HW = cube.H() * cube.W();
  if (static_cast<int64_t>(stats.mean.size()) != C || static_cast<int64_t>(stats.std.size()) != C)
    throw DataError("normalization statistics have " + std::to_string(stats.mean.size()) + " channels, cube has " +
                    std::to_string(C));
  for (int64_t t = 0; t < cube.T(); ++t)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < HW; ++p) {
        double& v = cube.frames[(t * C + c) * HW + p];
        v = cube.validity[static_cast<size_t>(t * HW + p)]
                ? (v - stats.mean[static_cast<size_t>(c)]) / stats.std[static_cast<size_t>(c)]
                : 0.0;
      }
}

namespace {
constexpr char kCubeMagic[] = "CWSCUBE1\n";
}

void write_cube(const std::filesystem::path& path, const SITSCube& cube) {
  cube.validate();
  nlohmann::json h = {{"format_version", 1},
                      {"shape", cube.frames.shape()},
                      {"period_labels", cube.period_labels}};
  const std::string header = h.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f.write(kCubeMagic, sizeof(kCubeMagic) - 1);
  const uint64_t n = header.size();
  f.write(reinterpret_cast<const char*>(&n), sizeof n);
  f.write(header.data(), static_cast<std::streamsize>(n));
  f.write(reinterpret_cast<const char*>(cube.frames.data()), static_cast<std::streamsize>(cube.frames.numel() * 8));
  f.write(reinterpret_cast<const char*>(cube.validity.data()), static_cast<std::streamsize>(cube.validity.size()));
  if (!f) throw DataError("failed writing " + path.string());
}

SITSCube read_cube(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open cube " + path.string());
  char magic[sizeof(kCubeMagic) - 1];
  f.read(magic, sizeof magic);
  if (!f || std::string(magic, sizeof magic) != kCubeMagic) throw DataError(path.string() + ": not a cube file");
  uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!f || n > (1u << 20)) throw DataError(path.string() + ": corrupt header");
  std::string header(n, '\0');
  f.read(header.data(), static_cast<std::streamsize>(n));
  SITSCube cube;
  try {
    auto h = nlohmann::json::parse(header);
    cube.frames = Tensor(h.at("shape").get<Shape>());
    cube.period_labels = h.at("period_labels").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad header: " + e.what());
  }
  f.read(reinterpret_cast<char*>(cube.frames.data()), static_cast<std::streamsize>(cube.frames.numel() * 8));
  cube.validity.resize(static_cast<size_t>(cube.T() * cube.H() * cube.W()));
  f.read(reinterpret_cast<char*>(cube.validity.data()), static_cast<std::streamsize>(cube.validity.size()));
  if (!f) throw DataError(path.string() + ": truncated cube");
  cube.validate();
  return cube;
}

}  // namespace croplandws
