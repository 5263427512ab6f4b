#include "croplandws/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "croplandws/errors.hpp"
#include "croplandws/mapping_eval.hpp"
#include "croplandws/robustness_synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace croplandws::cli {

// ---------------------------------------------------------------------------
// config documents

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_override(std::map<std::string, json>& docs, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError("--set: empty path segment in '" + key + "'");
    parts.push_back(p);
  }
  auto doc = docs.find(parts.front());
  if (doc == docs.end()) {
    std::string names;
    for (const auto& [n, _] : docs) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("--set: unknown document '" + parts.front() + "' (this command has: " + names + ")");
  }
  if (parts.size() < 2) throw ConfigError("--set: '" + key + "' names a whole document");
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &doc->second;
  for (size_t i = 1; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError("--set: '" + key + "' descends into a non-object");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ConfigError("--set: '" + key + "' descends into a non-object");
  (*node)[parts.back()] = value;
}

namespace {

std::set<int64_t> code_set(const json& j, const char* key) {
  std::set<int64_t> out;
  if (!j.contains(key)) return out;
  for (const auto& v : j.at(key)) out.insert(v.get<int64_t>());
  return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <class F>
auto config_guard(const std::string& what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

json grid_json(const RasterGrid& g) {
  return {{"width", g.width},           {"height", g.height},         {"origin_x", g.origin_x},
          {"origin_y", g.origin_y},     {"pixel_size", g.pixel_size}, {"crs", g.crs_id}};
}

RasterGrid grid_from_json(const json& j) {
  RasterGrid g;
  g.width = j.at("width");
  g.height = j.at("height");
  g.origin_x = j.at("origin_x");
  g.origin_y = j.at("origin_y");
  g.pixel_size = j.at("pixel_size");
  g.crs_id = j.at("crs");
  return g;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::vector<const ProductEntry*> Manifest::selected_products() const {
  std::vector<const ProductEntry*> out;
  if (use_products.empty()) {
    for (const auto& p : products) out.push_back(&p);
  } else {
    for (const auto& id : use_products) {
      const ProductEntry* hit = nullptr;
      for (const auto& p : products)
        if (p.id == id) hit = &p;
      if (!hit) throw ConfigError("manifest: use_products names unknown product '" + id + "'");
      out.push_back(hit);
    }
  }
  if (out.empty()) throw ConfigError("manifest: no products selected");
  return out;
}

Manifest parse_manifest(const json& doc, const fs::path& base) {
  return config_guard("manifest", [&] {
    if (!doc.is_object()) throw ConfigError("manifest: expected a JSON object");
    Manifest m;
    m.document = doc;
    m.name = doc.value("name", m.name);
    if (!doc.contains("products") || doc.at("products").empty()) throw ConfigError("manifest: no products listed");
    for (const auto& p : doc.at("products")) {
      ProductEntry e;
      e.id = p.at("id");
      e.path = resolve(base, p.at("path"));
      const json& map = p.at("mapping");
      e.mapping.product_id = e.id;
      e.mapping.cropland_class_ids = code_set(map, "cropland");
      e.mapping.noncrop_class_ids = code_set(map, "noncrop");
      e.mapping.nodata_class_ids = code_set(map, "nodata");
      e.mapping.strict = map.value("strict", false);
      e.mapping.validate();
      if (p.contains("temporal_mode")) {
        e.temporal_mode = true;
        e.mode_ignore = code_set(p.at("temporal_mode"), "ignore");
      }
      m.products.push_back(std::move(e));
    }
    m.use_products = doc.value("use_products", std::vector<std::string>{});
    if (doc.contains("cube")) m.cube = resolve(base, doc.at("cube"));
    if (doc.contains("scenes")) {
      const json& s = doc.at("scenes");
      SceneSource src;
      src.year = s.at("year");
      src.period = period_from_string(s.value("period", "monthly"));
      src.max_cloud = s.value("max_cloud", 1.0);
      if (s.contains("qa_rule")) {
        const json& q = s.at("qa_rule");
        const std::string mode = q.value("mode", "bits");
        if (mode == "bits") {
          src.qa.mode = QaRule::Mode::Bits;
          src.qa.bits = q.value("bits", src.qa.bits);
        } else if (mode == "values") {
          src.qa.mode = QaRule::Mode::Values;
          src.qa.values = code_set(q, "values");
        } else {
          throw ConfigError("manifest: qa_rule.mode must be 'bits' or 'values'");
        }
      }
      for (const auto& it : s.at("items")) {
        SceneEntry e;
        e.date = Date::parse(it.at("date"));
        e.path = resolve(base, it.at("path"));
        e.bands = it.value("bands", std::vector<std::string>{});
        e.qa_band = it.value("qa_band", "");
        src.items.push_back(std::move(e));
      }
      if (src.items.empty()) throw ConfigError("manifest: scenes.items is empty");
      m.scenes = std::move(src);
    }
    if (m.cube && m.scenes) throw ConfigError("manifest: give either 'cube' or 'scenes', not both");
    if (doc.contains("reference")) m.reference = resolve(base, doc.at("reference"));
    if (doc.contains("dem")) m.dem = resolve(base, doc.at("dem"));
    m.tile = doc.value("tile", m.tile);
    m.stride = doc.value("stride", m.stride);
    m.map_stride = doc.value("map_stride", m.map_stride);
    if (m.tile < 1 || m.stride < 1 || m.map_stride < 0) throw ConfigError("manifest: tile/stride must be positive");
    m.selected_products();
    return m;
  });
}

ModelConfig TrainConfig::model_for(int64_t T, int64_t C) const {
  json j = model;
  if (!j.contains("temporal_positions")) j["temporal_positions"] = T;
  if (!j.contains("input_channels")) j["input_channels"] = C;
  ModelConfig c = config_guard("train.model", [&] { return j.get<ModelConfig>(); });
  c.validate();
  return c;
}

TrainConfig parse_train_config(const json& doc) {
  return config_guard("train config", [&] {
    if (!doc.is_object()) throw ConfigError("train config: expected a JSON object");
    TrainConfig c;
    c.model = doc.value("model", json::object());
    if (doc.contains("loss")) c.loss = doc.at("loss").get<LossWeights>();
    if (doc.contains("schedule")) c.schedule = doc.at("schedule").get<TrainSchedule>();
    c.validate_every = doc.value("validate_every", 0);
    if (doc.contains("corruption")) {
      const json& k = doc.at("corruption");
      c.corrupt_spatial = k.value("spatial_rate", 0.0);
      c.corrupt_temporal = k.value("temporal_rate", 0.0);
      c.corrupt_seed = k.value("seed", uint64_t{0});
      if (!(c.corrupt_spatial >= 0.0 && c.corrupt_spatial <= 1.0 && c.corrupt_temporal >= 0.0 &&
            c.corrupt_temporal < 1.0))
        throw ConfigError("train config: corruption rates must lie in [0, 1)");
    }
    c.loss.validate();
    c.schedule.validate();
    if (c.validate_every < 0) throw ConfigError("train config: validate_every must be >= 0");
    return c;
  });
}

// ---------------------------------------------------------------------------
// pipeline steps

FuseOutput fuse(const Manifest& m) {
  FuseOutput out;
  ProductStack stack;
  bool first = true;
  for (const ProductEntry* p : m.selected_products()) {
    Raster raw = read_raster(p->path);
    if (p->temporal_mode) {
      const double fill = p->mapping.nodata_class_ids.empty() ? 0.0 : static_cast<double>(*p->mapping.nodata_class_ids.begin());
      raw = temporal_mode(raw, p->mode_ignore, fill);
    }
    if (first) {
      out.grid = raw.grid;
      stack.grid = raw.grid;
      first = false;
    } else if (!aligned(raw.grid, out.grid)) {
      raw = align_to_grid(raw, out.grid, Resampling::Nearest);
    }
    stack.add(p->id, binarize_product(raw, p->mapping));
  }
  out.fusion = rate_quality(stack);
  std::optional<std::vector<uint8_t>> ref;
  if (m.reference) ref = load_reference(*m.reference, out.grid);
  out.stats = fusion_stats(out.fusion.mask, out.fusion.labels, ref);
  return out;
}

void write_fusion(const FuseOutput& f, const fs::path& out) {
  fs::create_directories(out);
  Raster labels(f.grid, {"label"}, SampleType::UInt8, 255.0), mask(f.grid, {"quality"}, SampleType::UInt8);
  for (size_t p = 0; p < f.fusion.labels.labels.size(); ++p) {
    labels.data[p] = f.fusion.labels.labels[p];
    mask.data[p] = f.fusion.mask.mask[p];
  }
  labels.refresh_validity();
  mask.refresh_validity();
  write_raster(out / "fused_labels.tif", labels);
  write_raster(out / "quality_mask.tif", mask);
  json stats = {{"label_ratio", f.stats.label_ratio},
                {"high_quality_pixels", f.stats.high_quality_pixels},
                {"total_pixels", f.stats.total_pixels}};
  stats["macro_f1"] = f.stats.macro_f1 ? json(*f.stats.macro_f1) : json(nullptr);
  write_json(out / "fusion_stats.json", stats);
}

namespace {

SITSCube cube_from_scenes(const SceneSource& src, const RasterGrid& grid) {
  std::vector<SceneRecord> scenes;
  for (const auto& it : src.items) {
    Raster r = read_raster(it.path);
    if (!aligned(r.grid, grid)) throw DataError("scene " + it.path.string() + " is not aligned with the product grid");
    std::vector<int64_t> bands;
    if (it.bands.empty()) {
      for (int64_t b = 0; b < r.bands(); ++b)
        if (r.band_names[static_cast<size_t>(b)] != it.qa_band) bands.push_back(b);
    } else {
      for (const auto& name : it.bands) bands.push_back(r.band_index(name));
    }
    const int64_t HW = grid.pixels(), C = static_cast<int64_t>(bands.size());
    SceneRecord s;
    s.timestamp = it.date;
    s.bands = Tensor({C, grid.height, grid.width});
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < HW; ++p)
        s.bands[c * HW + p] = r.data[static_cast<size_t>(p * r.bands() + bands[static_cast<size_t>(c)])];
    if (!it.qa_band.empty()) {
      s.cloud_mask = decode_cloud_mask(read_raster(it.path, {it.qa_band}), src.qa);
      for (int64_t p = 0; p < HW; ++p) s.cloud_mask[static_cast<size_t>(p)] |= !r.valid[static_cast<size_t>(p)];
    } else {
      s.cloud_mask.resize(static_cast<size_t>(HW));
      for (int64_t p = 0; p < HW; ++p) s.cloud_mask[static_cast<size_t>(p)] = !r.valid[static_cast<size_t>(p)];
    }
    s.update_cloud_fraction();
    scenes.push_back(std::move(s));
  }
  const std::vector<SceneRecord> kept = filter_scenes(scenes, src.max_cloud);
  if (kept.empty()) throw DataError("every scene exceeds max_cloud");
  std::vector<SceneRecord> filled;
  for (const auto& s : kept) filled.push_back(fill_clouds(s, neighbors_by_time(s, kept)));
  return composite(filled, src.period, src.year);
}

}  // namespace

SITSCube load_cube(const Manifest& m, const RasterGrid& grid) {
  SITSCube cube;
  if (m.cube) cube = read_cube(*m.cube);
  else if (m.scenes) cube = cube_from_scenes(*m.scenes, grid);
  else throw ConfigError("manifest: needs 'cube' or 'scenes'");
  if (cube.H() != grid.height || cube.W() != grid.width)
    throw DataError("cube is " + std::to_string(cube.H()) + "x" + std::to_string(cube.W()) + " but the grid is " +
                    std::to_string(grid.height) + "x" + std::to_string(grid.width));
  return cube;
}

std::vector<uint8_t> load_reference(const fs::path& path, const RasterGrid& grid) {
  Raster r = read_raster(path);
  if (!aligned(r.grid, grid)) r = align_to_grid(r, grid, Resampling::Nearest);
  std::vector<uint8_t> out(static_cast<size_t>(grid.pixels()), 255);
  for (size_t p = 0; p < out.size(); ++p) {
    const double v = r.data[p * static_cast<size_t>(r.bands())];
    if (r.valid[p] && (v == 0.0 || v == 1.0)) out[p] = static_cast<uint8_t>(v);
  }
  return out;
}

fs::path cache_root(const std::optional<fs::path>& explicit_root, const fs::path& fallback) {
  if (explicit_root) return *explicit_root;
  if (const char* env = std::getenv("CROPLANDWS_CACHE"); env && *env) return env;
  return fallback;
}

fs::path prepare(const Manifest& m, const fs::path& root) {
  const FuseOutput f = fuse(m);
  std::ostringstream key;
  key << std::hex << std::setw(16) << std::setfill('0')
      << fnv1a(m.document.dump() + "|" + (m.cube ? m.cube->string() : "") + "|" +
               (m.products.empty() ? "" : m.products.front().path.string()));
  const fs::path dir = root / (m.name + "-" + key.str());
  if (fs::exists(dir / "store.json")) return dir;

  const SITSCube cube = load_cube(m, f.grid);
  const auto plan = tile_plan(f.grid, m.tile, m.stride);
  const auto patches = build_patches(cube, f.fusion.mask, f.fusion.labels, plan);
  const NormStats norm = compute_norm_stats(patches);

  const fs::path tmp = root / (m.name + "-" + key.str() + ".partial");
  fs::remove_all(tmp);
  write_fusion(f, tmp);
  write_cube(tmp / "cube.bin", cube);
  write_json(tmp / "store.json", {{"key", key.str()},
                                  {"grid", grid_json(f.grid)},
                                  {"tile", m.tile},
                                  {"stride", m.stride},
                                  {"patches", patches.size()},
                                  {"T", cube.T()},
                                  {"C", cube.C()},
                                  {"normalization", {{"mean", norm.mean}, {"std", norm.std}}},
                                  {"manifest", m.document}});
  fs::remove_all(dir);
  fs::rename(tmp, dir);
  return dir;
}

PatchStore load_store(const fs::path& dir) {
  const json meta = load_json(dir / "store.json");
  PatchStore s;
  s.dir = dir;
  config_guard("patch store", [&] {
    s.grid = grid_from_json(meta.at("grid"));
    s.norm.mean = meta.at("normalization").at("mean").get<std::vector<double>>();
    s.norm.std = meta.at("normalization").at("std").get<std::vector<double>>();
    return 0;
  });
  const SITSCube cube = read_cube(dir / "cube.bin");
  const Raster labels = read_raster(dir / "fused_labels.tif"), mask = read_raster(dir / "quality_mask.tif");
  FusedLabels fl{s.grid, {}};
  QualityMask qm{s.grid, {}};
  for (size_t p = 0; p < labels.data.size(); ++p) {
    fl.labels.push_back(static_cast<uint8_t>(labels.data[p]));
    qm.mask.push_back(static_cast<uint8_t>(mask.data[p]));
  }
  s.patches = build_patches(cube, qm, fl, tile_plan(s.grid, meta.at("tile"), meta.at("stride")));
  for (auto& p : s.patches) normalize(p.cube, s.norm);
  return s;
}

// ---------------------------------------------------------------------------
// command line

namespace {

struct Common {
  std::vector<std::string> sets;
  int jobs = 0;
  std::optional<fs::path> cache;

  int workers() const {
    if (jobs > 0) return jobs;
    return std::max(1u, std::thread::hardware_concurrency());
  }
};

struct Docs {
  std::map<std::string, json> docs;
  std::map<std::string, fs::path> bases;

  void load(const std::string& name, const fs::path& path) {
    docs[name] = load_json(path);
    bases[name] = fs::absolute(path).parent_path();
  }
  void set_default(const std::string& name, json value) {
    docs[name] = std::move(value);
    bases[name] = fs::current_path();
  }
  void apply(const std::vector<std::string>& sets) {
    for (const auto& s : sets) apply_override(docs, s);
  }
  Manifest manifest() const { return parse_manifest(docs.at("manifest"), bases.at("manifest")); }
};

void say(const std::string& s) { std::cout << s << std::flush; }

EvalTarget eval_target(const Manifest& m, const RasterGrid& grid) {
  if (!m.reference) throw ConfigError("manifest: this command needs a 'reference' raster");
  EvalTarget t;
  t.cube = load_cube(m, grid);
  t.grid = grid;
  t.reference = load_reference(*m.reference, grid);
  t.tile = m.tile;
  t.stride = m.map_stride > 0 ? m.map_stride : m.tile;
  return t;
}

RasterGrid product_grid(const Manifest& m) {
  const ProductEntry* p = m.selected_products().front();
  Raster r = read_raster(p->path);
  return r.grid;
}

json train_run(const Manifest& m, const TrainConfig& tc, const fs::path& out, const Common& c,
               const std::optional<fs::path>& resume, int64_t embeddings) {
  fs::create_directories(out);
  const fs::path store_dir = prepare(m, cache_root(c.cache, out / "patches"));
  PatchStore store = load_store(store_dir);
  if (store.patches.empty()) throw DataError("patch store holds no patches");
  if (tc.corrupt_spatial > 0.0 || tc.corrupt_temporal > 0.0)
    for (size_t i = 0; i < store.patches.size(); ++i)
      store.patches[i].cube = corrupt_cube(store.patches[i].cube, tc.corrupt_spatial, tc.corrupt_temporal,
                                           mix_seed(tc.corrupt_seed, i));
  const SITSCube& first = store.patches.front().cube;

  TrainOptions opt;
  opt.out_dir = out;
  opt.normalization = store.norm;
  opt.metadata = {{"manifest", m.document}, {"loss", tc.loss}, {"schedule", tc.schedule}};
  std::optional<EvalTarget> target;
  if (tc.validate_every > 0) {
    target = eval_target(m, store.grid);
    const int every = tc.validate_every;
    const NormStats norm = store.norm;
    const int jobs = c.workers();
    opt.validator = [&target, every, norm, jobs](const UTAE& model, int epoch) -> json {
      if ((epoch + 1) % every != 0) return nullptr;
      const EvalReport r = evaluate_checkpoint(make_checkpoint(model, norm), *target, jobs);
      return {{"avg_f1", r.avg_f1}, {"oa", r.oa}, {"miou", r.miou}};
    };
  }

  const TrainResult r = resume ? continue_train(load_checkpoint(*resume), store.patches, tc.loss, tc.schedule, opt)
                               : train(store.patches, tc.model_for(first.T(), first.C()), tc.loss, tc.schedule, opt);
  json summary = {{"checkpoint", r.checkpoint.string()},
                  {"patch_store", store_dir.string()},
                  {"patches", store.patches.size()},
                  {"epochs", tc.schedule.epochs},
                  {"final_epoch_loss", r.epoch_losses.empty() ? json(nullptr) : json(r.epoch_losses.back())}};
  if (!r.validation.empty()) summary["last_validation"] = r.validation.back();
  if (embeddings > 0) {
    summary["embeddings"] =
        export_pixel_embeddings(r.model, store.patches, embeddings, tc.schedule.seed, out / "embeddings.csv");
  }
  write_json(out / "train_summary.json", summary);
  return summary;
}

void map_run(const Manifest& m, const fs::path& ckpt_path, const fs::path& out, const Common& c) {
  fs::create_directories(out);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const RasterGrid grid = product_grid(m);
  const SITSCube cube = load_cube(m, grid);
  const RegionMap map = map_region(ckpt, cube, grid, m.tile, m.map_stride > 0 ? m.map_stride : m.tile, c.workers());
  write_raster(out / "probabilities.tif", probability_raster(map));
  write_raster(out / "binary.tif", binary_raster(grid, map.binary));
}

json eval_run(const fs::path& map_path, const fs::path& ref_path, const std::optional<fs::path>& dem_path,
              const std::optional<fs::path>& out) {
  const Raster map = read_raster(map_path);
  std::vector<uint8_t> pred(static_cast<size_t>(map.grid.pixels()), 255);
  for (size_t p = 0; p < pred.size(); ++p) {
    const double v = map.data[p * static_cast<size_t>(map.bands())];
    if (map.valid[p] && (v == 0.0 || v == 1.0)) pred[p] = static_cast<uint8_t>(v);
  }
  const std::vector<uint8_t> ref = load_reference(ref_path, map.grid);
  std::vector<uint8_t> valid(pred.size());
  for (size_t p = 0; p < pred.size(); ++p) valid[p] = pred[p] != 255 && ref[p] != 255;
  const EvalReport rep = metrics(confusion(pred, ref, valid));
  json j = {{"global", report_json(rep)}};
  say(render_report(rep, "global"));
  if (dem_path) {
    Raster dem = read_raster(*dem_path);
    if (!aligned(dem.grid, map.grid)) dem = align_to_grid(dem, map.grid, Resampling::Average);
    const StratifiedReport s = stratified_report(pred, ref, valid, slope_stratify(dem));
    j["stratified"] = report_json(s);
    say(render_report(s));
  }
  if (out) {
    fs::create_directories(*out);
    write_json(*out / "eval_report.json", j);
  }
  return j;
}

json default_pipeline_world() {
  WorldConfig w;
  w.size = 128;
  w.noise = {ProductNoise{0.1, 0.1, 0.0}};
  return w;
}

json default_pipeline_train() {
  return {{"model", {{"levels", 2}, {"widths", {8, 16, 32}}, {"heads", 2}, {"key_dim", 4}, {"d_model", 16}, {"groups", 2}}},
          {"schedule", {{"epochs", 4}, {"batch_size", 4}, {"lr", 5e-3}, {"lr_late", 1e-3}, {"sampling", {{"anchors", 64}, {"pool", 512}}}}}};
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"croplandws: weakly supervised cropland mapping from fused land-cover labels"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "croplandws 0.1.0");
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--set", common.sets, "Override a config value: <doc>.<key.path>=<json or string>")
        ->take_all()
        ->allow_extra_args(false);
    sub->add_option("--jobs", common.jobs, "Cap worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
    sub->add_option("--cache", common.cache, "Patch-store root (default: $CROPLANDWS_CACHE, then <out>/patches)");
  };

  fs::path manifest_path, config_path, out_dir, ckpt_path, map_path, ref_path;
  std::optional<fs::path> dem_path, eval_out, world_path;
  int64_t embeddings = 0;

  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse products into high-quality labels and a quality mask");
  fuse_cmd->add_option("--manifest", manifest_path, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  fuse_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_common(fuse_cmd);

  auto* prep_cmd = app.add_subcommand("prepare", "Fuse labels, build the cube and write the patch store");
  prep_cmd->add_option("--manifest", manifest_path, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  prep_cmd->add_option("--out", out_dir, "Output directory (patch store under <out>/patches by default)")->required();
  add_common(prep_cmd);

  auto* train_cmd = app.add_subcommand("train", "Train a model with the weak-supervision loss");
  train_cmd->add_option("--manifest", manifest_path, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--config", config_path, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_option("--embeddings", embeddings, "Export N sampled pixel embeddings after training");
  add_common(train_cmd);

  auto* cont_cmd = app.add_subcommand("continue", "Continue training a checkpoint on new data");
  cont_cmd->add_option("--checkpoint", ckpt_path, "Starting checkpoint")->required()->check(CLI::ExistingFile);
  cont_cmd->add_option("--manifest", manifest_path, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  cont_cmd->add_option("--config", config_path, "Training config (JSON)")->required()->check(CLI::ExistingFile);
  cont_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_common(cont_cmd);

  auto* map_cmd = app.add_subcommand("map", "Sliding-window inference over the manifest's region");
  map_cmd->add_option("--checkpoint", ckpt_path, "Model checkpoint")->required()->check(CLI::ExistingFile);
  map_cmd->add_option("--manifest", manifest_path, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  map_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_common(map_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Score a binary map against a reference raster");
  eval_cmd->add_option("--map", map_path, "Binary map raster")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--reference", ref_path, "Reference raster (0/1)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--dem", dem_path, "DEM for slope-stratified metrics")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", eval_out, "Write eval_report.json here");

  auto* rob_cmd = app.add_subcommand("robustness", "Spatial x temporal missing-data grid");
  rob_cmd->add_option("--checkpoint", ckpt_path, "Model checkpoint")->required()->check(CLI::ExistingFile);
  rob_cmd->add_option("--manifest", manifest_path, "Dataset manifest (JSON)")->required()->check(CLI::ExistingFile);
  rob_cmd->add_option("--config", config_path, "Corruption config (JSON; default 5x11 grid)")->check(CLI::ExistingFile);
  rob_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_common(rob_cmd);

  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic phenology world on disk");
  synth_cmd->add_option("--config", world_path, "World config (JSON; defaults otherwise)")->check(CLI::ExistingFile);
  synth_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_common(synth_cmd);

  auto* pipe_cmd = app.add_subcommand("pipeline", "synth -> fuse -> prepare -> train -> map -> eval in one run");
  pipe_cmd->add_option("--world", world_path, "World config (JSON)")->check(CLI::ExistingFile);
  pipe_cmd->add_option("--config", config_path, "Training config (JSON)")->check(CLI::ExistingFile);
  pipe_cmd->add_option("--out", out_dir, "Output directory")->required();
  add_common(pipe_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    Docs d;
    if (fuse_cmd->parsed()) {
      d.load("manifest", manifest_path);
      d.apply(common.sets);
      const FuseOutput f = fuse(d.manifest());
      write_fusion(f, out_dir);
      say("label ratio " + std::to_string(f.stats.label_ratio) + ", fused labels in " + out_dir.string() + "\n");
    } else if (prep_cmd->parsed()) {
      d.load("manifest", manifest_path);
      d.apply(common.sets);
      const fs::path dir = prepare(d.manifest(), cache_root(common.cache, out_dir / "patches"));
      say("patch store " + dir.string() + "\n");
    } else if (train_cmd->parsed() || cont_cmd->parsed()) {
      d.load("manifest", manifest_path);
      d.load("train", config_path);
      d.apply(common.sets);
      const TrainConfig tc = parse_train_config(d.docs.at("train"));
      std::optional<fs::path> resume;
      if (cont_cmd->parsed()) resume = ckpt_path;
      const json s = train_run(d.manifest(), tc, out_dir, common, resume, embeddings);
      say("checkpoint " + s.at("checkpoint").get<std::string>() + "\n");
    } else if (map_cmd->parsed()) {
      d.load("manifest", manifest_path);
      d.apply(common.sets);
      map_run(d.manifest(), ckpt_path, out_dir, common);
      say("maps in " + out_dir.string() + "\n");
    } else if (eval_cmd->parsed()) {
      eval_run(map_path, ref_path, dem_path, eval_out);
    } else if (rob_cmd->parsed()) {
      d.load("manifest", manifest_path);
      if (config_path.empty()) d.set_default("corruption", CorruptionConfig{});
      else d.load("corruption", config_path);
      d.apply(common.sets);
      const Manifest m = d.manifest();
      const CorruptionConfig cc = config_guard("corruption", [&] { return d.docs.at("corruption").get<CorruptionConfig>(); });
      const EvalTarget target = eval_target(m, product_grid(m));
      const RobustnessGrid g = robustness_grid(load_checkpoint(ckpt_path), target, cc, common.workers());
      fs::create_directories(out_dir);
      write_json(out_dir / "robustness_grid.json", grid_json(g));
      say(render_grid(g));
    } else if (synth_cmd->parsed()) {
      if (world_path) d.load("world", *world_path);
      else d.set_default("world", WorldConfig{});
      d.apply(common.sets);
      const WorldConfig wc = config_guard("world", [&] { return d.docs.at("world").get<WorldConfig>(); });
      say("manifest " + save_world(generate_world(wc), out_dir).string() + "\n");
    } else if (pipe_cmd->parsed()) {
      if (world_path) d.load("world", *world_path);
      else d.set_default("world", default_pipeline_world());
      if (!config_path.empty()) d.load("train", config_path);
      else d.set_default("train", default_pipeline_train());
      d.set_default("manifest", json::object());  // filled after synth; overrides merge in below
      std::map<std::string, json> manifest_sets{{"manifest", json::object()}};
      std::vector<std::string> other_sets;
      for (const auto& s : common.sets) {
        if (s.rfind("manifest.", 0) == 0) apply_override(manifest_sets, s);
        else other_sets.push_back(s);
      }
      d.docs.erase("manifest");
      d.apply(other_sets);
      const WorldConfig wc = config_guard("world", [&] { return d.docs.at("world").get<WorldConfig>(); });
      const TrainConfig tc = parse_train_config(d.docs.at("train"));

      const fs::path world_dir = out_dir / "world";
      const fs::path mpath = save_world(generate_world(wc), world_dir);
      json mdoc = load_json(mpath);
      mdoc.merge_patch(manifest_sets.at("manifest"));
      const Manifest m = parse_manifest(mdoc, world_dir);
      say("[1/5] world " + world_dir.string() + "\n");
      const FuseOutput f = fuse(m);
      write_fusion(f, out_dir / "fuse");
      say("[2/5] fused labels, label ratio " + std::to_string(f.stats.label_ratio) + "\n");
      const json s = train_run(m, tc, out_dir / "train", common, std::nullopt, 0);
      say("[3/5] trained " + s.at("checkpoint").get<std::string>() + "\n");
      map_run(m, s.at("checkpoint").get<std::string>(), out_dir / "map", common);
      say("[4/5] mapped\n");
      eval_run(out_dir / "map" / "binary.tif", *m.reference, m.dem, out_dir / "eval");
      say("[5/5] report " + (out_dir / "eval" / "eval_report.json").string() + "\n");
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
}

}  // namespace croplandws::cli
