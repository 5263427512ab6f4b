#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "croplandws/autograd.hpp"
#include "croplandws/sits_pipeline.hpp"
#include "json.hpp"

namespace croplandws {

struct ModelConfig {
  int levels = 2;                      // L
  std::vector<int> widths{16, 32, 64}; // C^0..C^L
  int input_channels = 4;
  int classes = 2;
  int heads = 4;
  int key_dim = 8;        // per attention head
  int d_model = 64;       // temporal encoder token width
  int temporal_positions = 12;
  int groups = 4;         // group normalization
  bool positional_encoding = true;
  bool mask_attention = true;

  void validate() const;
  // Throws DataError unless a cube of this shape can be fed to the model.
  void check_input(int64_t T, int64_t C, int64_t H, int64_t W) const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// e^l for l = 0..L, each [T, C^l, H/2^l, W/2^l].
struct EncoderPyramid {
  std::vector<ag::Var> levels;
};

// a^l for l = 0..L, each [T, 1, H/2^l, W/2^l].
struct TemporalAttention {
  std::vector<ag::Var> weights;
  int64_t fallback_pixels = 0;  // pixels at level L with no valid frame
};

// F^l for l = 0..L, each [1, C^l, H/2^l, W/2^l].
struct FusedFeatures {
  std::vector<ag::Var> maps;
};

// Decoder outputs indexed by spatial level: maps[0] is full resolution,
// maps[L] is the deepest (= F^L).
struct DecoderMaps {
  std::vector<ag::Var> maps;
};

struct ForwardResult {
  ag::Var logits;  // [1, K, H, W]
  ag::Var probs;   // [1, K, H, W]
  DecoderMaps maps;
  TemporalAttention attention;
};

// Sinusoidal encoding of period positions: table [T, d] with
// pe[t][2i] = sin(pos_t / 1000^(2i/d)), pe[t][2i+1] = cos(...).
Tensor positional_table(const std::vector<int>& positions, int d);

// Max-pools a [T, 1, H, W] 0/1 mask by 2^level (a coarse pixel is valid if
// any covered fine pixel is).
Tensor pool_validity(const Tensor& mask, int level);

class UTAE {
 public:
  UTAE(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Stable, ordered parameter list.
  const std::vector<std::pair<std::string, ag::Var>>& parameters() const { return params_; }
  ag::Var& param(const std::string& name);
  const ag::Var& param(const std::string& name) const;
  int64_t parameter_count() const;
  void zero_grad();

  // x: [T, C, H, W] normalized frames.
  EncoderPyramid encode_spatial(const ag::Var& x) const;
  // validity: [T, 1, H, W]; positions: T period indices.
  TemporalAttention attend_temporal(const EncoderPyramid& pyramid, const Tensor& validity,
                                    const std::vector<int>& positions) const;
  FusedFeatures fuse_temporal(const EncoderPyramid& pyramid, const TemporalAttention& attn) const;
  DecoderMaps decode(const FusedFeatures& fused) const;
  ag::Var head_logits(const DecoderMaps& maps) const;
  static ag::Var predict(const ag::Var& logits) { return ag::softmax_channels(logits); }

  ForwardResult forward(const SITSCube& cube) const;
  ForwardResult forward(const ag::Var& x, const Tensor& validity, const std::vector<int>& positions) const;

 private:
  ag::Var conv_block(const ag::Var& x, const std::string& prefix, int stride) const;
  void add_param(const std::string& name, Tensor value);

  ModelConfig cfg_;
  std::vector<std::pair<std::string, ag::Var>> params_;
  std::map<std::string, size_t> index_;
};

// Self-describing checkpoint: magic line, JSON header (format version,
// model config, normalization, tensor index, free-form metadata), then raw
// little-endian float64 tensors.
struct Checkpoint {
  ModelConfig config;
  NormStats normalization;
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json metadata = nlohmann::json::object();
};

Checkpoint make_checkpoint(const UTAE& model, const NormStats& norm, nlohmann::json metadata = nlohmann::json::object());
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Builds a model from a checkpoint, verifying every parameter is present
// with the expected shape.
UTAE model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace croplandws
