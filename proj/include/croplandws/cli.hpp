#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "croplandws/label_fusion.hpp"
#include "croplandws/sits_pipeline.hpp"
#include "croplandws/utae_model.hpp"
#include "croplandws/weak_supervision.hpp"
#include "json.hpp"

namespace croplandws::cli {

// ---- config documents ----

// Reads a JSON document; ConfigError when missing or malformed.
nlohmann::json load_json(const std::filesystem::path& path);

// Applies "a.b.c=value" to a set of named documents; the first path segment
// names the document. The value is parsed as JSON when possible and taken as
// a string otherwise.
void apply_override(std::map<std::string, nlohmann::json>& docs, const std::string& assignment);

struct ProductEntry {
  std::string id;
  std::filesystem::path path;
  ClassMapping mapping;
  // Per-date class stacks are reduced by temporal mode first.
  bool temporal_mode = false;
  std::set<int64_t> mode_ignore;
};

struct SceneEntry {
  Date date;
  std::filesystem::path path;
  std::vector<std::string> bands;  // empty = all bands except the QA band
  std::string qa_band;             // empty = no QA band
};

struct SceneSource {
  int year = 0;
  Period period = Period::Monthly;
  double max_cloud = 1.0;
  QaRule qa;
  std::vector<SceneEntry> items;
};

// Dataset manifest. Relative paths resolve against the manifest directory.
struct Manifest {
  std::string name = "dataset";
  std::vector<ProductEntry> products;
  std::vector<std::string> use_products;  // subset by id; empty = all
  std::optional<std::filesystem::path> cube;
  std::optional<SceneSource> scenes;
  std::optional<std::filesystem::path> reference;
  std::optional<std::filesystem::path> dem;
  int64_t tile = 64;
  int64_t stride = 64;      // training patch stride
  int64_t map_stride = 0;   // 0 = tile (no overlap)
  nlohmann::json document;  // as loaded, after overrides

  std::vector<const ProductEntry*> selected_products() const;
};

Manifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base);

struct TrainConfig {
  nlohmann::json model = nlohmann::json::object();  // T and C default to the data
  LossWeights loss;
  TrainSchedule schedule;
  int validate_every = 0;  // epochs; needs a reference in the manifest
  // Optional training-time corruption of every patch (off by default).
  double corrupt_spatial = 0.0;
  double corrupt_temporal = 0.0;
  uint64_t corrupt_seed = 0;

  ModelConfig model_for(int64_t T, int64_t C) const;
};

TrainConfig parse_train_config(const nlohmann::json& doc);

// ---- pipeline steps ----

struct FuseOutput {
  RasterGrid grid;
  FusionResult fusion;
  FusionStats stats;
};

FuseOutput fuse(const Manifest& m);
void write_fusion(const FuseOutput& f, const std::filesystem::path& out);

// Raw reflectance cube on `grid`, from a cube file or from scenes.
SITSCube load_cube(const Manifest& m, const RasterGrid& grid);

std::vector<uint8_t> load_reference(const std::filesystem::path& path, const RasterGrid& grid);

struct PatchStore {
  std::filesystem::path dir;
  RasterGrid grid;
  std::vector<PatchSample> patches;  // normalized
  NormStats norm;
};

// Cache root: explicit value, else CROPLANDWS_CACHE, else `fallback`.
std::filesystem::path cache_root(const std::optional<std::filesystem::path>& explicit_root,
                                 const std::filesystem::path& fallback);

// Writes (or reuses) the patch store keyed by the manifest content.
std::filesystem::path prepare(const Manifest& m, const std::filesystem::path& root);
PatchStore load_store(const std::filesystem::path& dir);

// Runs the command line; returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace croplandws::cli
