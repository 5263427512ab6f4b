#include "croplandws/utae_model.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "croplandws/errors.hpp"

namespace croplandws {

void ModelConfig::validate() const {
  if (levels < 1) throw ConfigError("model: levels must be >= 1");
  if (static_cast<int>(widths.size()) != levels + 1)
    throw ConfigError("model: expected " + std::to_string(levels + 1) + " channel widths, got " +
                      std::to_string(widths.size()));
  for (size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] <= 0) throw ConfigError("model: widths must be positive");
    if (i > 0 && widths[i] <= widths[i - 1]) throw ConfigError("model: widths must strictly increase with depth");
  }
  if (input_channels <= 0) throw ConfigError("model: input_channels must be positive");
  if (classes < 2) throw ConfigError("model: classes must be >= 2");
  if (heads <= 0 || key_dim <= 0 || d_model <= 0) throw ConfigError("model: attention sizes must be positive");
  if (temporal_positions <= 0) throw ConfigError("model: temporal_positions must be positive");
  if (groups <= 0) throw ConfigError("model: groups must be positive");
}

void ModelConfig::check_input(int64_t T, int64_t C, int64_t H, int64_t W) const {
  if (T != temporal_positions)
    throw DataError("model expects " + std::to_string(temporal_positions) + " time steps, cube has " + std::to_string(T));
  if (C != input_channels)
    throw DataError("model expects " + std::to_string(input_channels) + " channels, cube has " + std::to_string(C));
  const int64_t f = int64_t{1} << levels;
  if (H % f != 0 || W % f != 0 || H < f || W < f)
    throw DataError("spatial size " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by 2^" +
                    std::to_string(levels));
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"levels", c.levels},
       {"widths", c.widths},
       {"input_channels", c.input_channels},
       {"classes", c.classes},
       {"heads", c.heads},
       {"key_dim", c.key_dim},
       {"d_model", c.d_model},
       {"temporal_positions", c.temporal_positions},
       {"groups", c.groups},
       {"positional_encoding", c.positional_encoding},
       {"mask_attention", c.mask_attention}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.levels = j.value("levels", d.levels);
  c.widths = j.value("widths", d.widths);
  c.input_channels = j.value("input_channels", d.input_channels);
  c.classes = j.value("classes", d.classes);
  c.heads = j.value("heads", d.heads);
  c.key_dim = j.value("key_dim", d.key_dim);
  c.d_model = j.value("d_model", d.d_model);
  c.temporal_positions = j.value("temporal_positions", d.temporal_positions);
  c.groups = j.value("groups", d.groups);
  c.positional_encoding = j.value("positional_encoding", d.positional_encoding);
  c.mask_attention = j.value("mask_attention", d.mask_attention);
}

Tensor positional_table(const std::vector<int>& positions, int d) {
  Tensor pe({static_cast<int64_t>(positions.size()), d});
  for (size_t t = 0; t < positions.size(); ++t)
    for (int i = 0; i < d; ++i) {
      const double angle = positions[t] / std::pow(1000.0, 2.0 * (i / 2) / d);
      pe[static_cast<int64_t>(t) * d + i] = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

Tensor pool_validity(const Tensor& mask, int level) {
  const int64_t T = mask.dim(0), H = mask.dim(2), W = mask.dim(3), f = int64_t{1} << level;
  Tensor out({T, 1, H / f, W / f}, 0.0);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t r = 0; r < H; ++r)
      for (int64_t c = 0; c < W; ++c)
        if (mask.at(t, 0, r, c) != 0.0) out.at(t, 0, r / f, c / f) = 1.0;
  return out;
}

namespace {

int norm_groups(int requested, int channels) { return std::gcd(requested, channels); }

}  // namespace

UTAE::UTAE(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape shape, double fan_in) {
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = u(rng);
    return t;
  };
  auto conv = [&](const std::string& name, int co, int ci, int k) {
    add_param(name + ".w", uniform({co, ci, k, k}, static_cast<double>(ci * k * k)));
    add_param(name + ".b", Tensor({co}, 0.0));
  };
  auto norm = [&](const std::string& name, int c) {
    add_param(name + ".g", Tensor({c}, 1.0));
    add_param(name + ".b", Tensor({c}, 0.0));
  };
  const auto& w = cfg_.widths;
  const int L = cfg_.levels;

  for (int l = 0; l <= L; ++l) {
    const std::string p = "enc." + std::to_string(l);
    conv(p + ".conv1", w[l], l == 0 ? cfg_.input_channels : w[l - 1], 3);
    norm(p + ".gn1", w[l]);
    conv(p + ".conv2", w[l], w[l], 3);
    norm(p + ".gn2", w[l]);
  }

  norm("ltae.ln", w[L]);
  conv("ltae.in", cfg_.d_model, w[L], 1);
  conv("ltae.key", cfg_.heads * cfg_.key_dim, cfg_.d_model, 1);
  {
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / cfg_.key_dim));
    Tensor q({cfg_.heads, cfg_.key_dim});
    for (auto& v : q.values()) v = n(rng);
    add_param("ltae.query", std::move(q));
  }

  for (int l = 0; l <= L; ++l) conv("fuse." + std::to_string(l), w[l], w[l], 1);

  for (int l = L - 1; l >= 0; --l) {
    const std::string p = "dec." + std::to_string(l);
    add_param(p + ".up.w", uniform({w[l + 1], w[l], 4, 4}, static_cast<double>(w[l + 1] * 4)));
    add_param(p + ".up.b", Tensor({w[l]}, 0.0));
    norm(p + ".gnup", w[l]);
    conv(p + ".conv1", w[l], 2 * w[l], 3);
    norm(p + ".gn1", w[l]);
    conv(p + ".conv2", w[l], w[l], 3);
    norm(p + ".gn2", w[l]);
  }
  conv("head", cfg_.classes, w[0], 3);
}

void UTAE::add_param(const std::string& name, Tensor value) {
  index_[name] = params_.size();
  params_.emplace_back(name, ag::parameter(std::move(value)));
}

ag::Var& UTAE::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw DataError("model has no parameter '" + name + "'");
  return params_[it->second].second;
}

const ag::Var& UTAE::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw DataError("model has no parameter '" + name + "'");
  return params_[it->second].second;
}

int64_t UTAE::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, v] : params_) n += v.value().numel();
  return n;
}

void UTAE::zero_grad() {
  for (auto& [name, v] : params_) v.zero_grad();
}

ag::Var UTAE::conv_block(const ag::Var& x, const std::string& p, int stride) const {
  auto gn = [&](const ag::Var& v, const std::string& n) {
    return ag::relu(ag::group_norm(v, param(n + ".g"), param(n + ".b"),
                                   norm_groups(cfg_.groups, static_cast<int>(v.shape()[1]))));
  };
  ag::Var h = gn(ag::conv2d(x, param(p + ".conv1.w"), param(p + ".conv1.b"), stride, 1), p + ".gn1");
  return gn(ag::conv2d(h, param(p + ".conv2.w"), param(p + ".conv2.b"), 1, 1), p + ".gn2");
}

EncoderPyramid UTAE::encode_spatial(const ag::Var& x) const {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DataError("encode_spatial: input must be [T, C, H, W]");
  cfg_.check_input(s[0], s[1], s[2], s[3]);
  EncoderPyramid pyr;
  pyr.levels.push_back(conv_block(x, "enc.0", 1));
  for (int l = 1; l <= cfg_.levels; ++l) pyr.levels.push_back(conv_block(pyr.levels.back(), "enc." + std::to_string(l), 2));
  return pyr;
}

TemporalAttention UTAE::attend_temporal(const EncoderPyramid& pyramid, const Tensor& validity,
                                        const std::vector<int>& positions) const {
  const int L = cfg_.levels;
  if (static_cast<int>(pyramid.levels.size()) != L + 1) throw DataError("attend_temporal: incomplete pyramid");
  const ag::Var& eL = pyramid.levels[static_cast<size_t>(L)];
  const int64_t T = eL.shape()[0];
  if (validity.rank() != 4 || validity.dim(0) != T || validity.dim(1) != 1)
    throw DataError("attend_temporal: validity must be [T, 1, H, W]");
  if (static_cast<int64_t>(positions.size()) != T) throw DataError("attend_temporal: need one position per frame");

  const Tensor ones = Tensor::full(validity.shape(), 1.0);
  const Tensor& mask0 = cfg_.mask_attention ? validity : ones;

  ag::Var h = ag::layer_norm_channels(eL, param("ltae.ln.g"), param("ltae.ln.b"));
  h = ag::conv2d(h, param("ltae.in.w"), param("ltae.in.b"), 1, 0);
  if (cfg_.positional_encoding) h = ag::add_channel_constant(h, positional_table(positions, cfg_.d_model));
  ag::Var keys = ag::conv2d(h, param("ltae.key.w"), param("ltae.key.b"), 1, 0);

  TemporalAttention out;
  out.weights.resize(static_cast<size_t>(L + 1));
  ag::Var aL = ag::temporal_attention(keys, param("ltae.query"), pool_validity(mask0, L), cfg_.heads,
                                      &out.fallback_pixels);
  out.weights[static_cast<size_t>(L)] = aL;
  for (int l = 0; l < L; ++l) {
    const Shape& sl = pyramid.levels[static_cast<size_t>(l)].shape();
    ag::Var up = ag::upsample_bilinear(aL, sl[2], sl[3]);
    out.weights[static_cast<size_t>(l)] = ag::mask_renormalize(up, pool_validity(mask0, l));
  }
  return out;
}

FusedFeatures UTAE::fuse_temporal(const EncoderPyramid& pyramid, const TemporalAttention& attn) const {
  if (pyramid.levels.size() != attn.weights.size()) throw DataError("fuse_temporal: level count mismatch");
  FusedFeatures f;
  for (size_t l = 0; l < pyramid.levels.size(); ++l) {
    const std::string p = "fuse." + std::to_string(l);
    ag::Var collapsed = ag::temporal_weighted_sum(pyramid.levels[l], attn.weights[l]);
    f.maps.push_back(ag::conv2d(collapsed, param(p + ".w"), param(p + ".b"), 1, 0));
  }
  return f;
}

DecoderMaps UTAE::decode(const FusedFeatures& fused) const {
  const int L = cfg_.levels;
  if (static_cast<int>(fused.maps.size()) != L + 1) throw DataError("decode: incomplete fused features");
  DecoderMaps d;
  d.maps.resize(static_cast<size_t>(L + 1));
  d.maps[static_cast<size_t>(L)] = fused.maps[static_cast<size_t>(L)];
  for (int l = L - 1; l >= 0; --l) {
    const std::string p = "dec." + std::to_string(l);
    const ag::Var& deeper = d.maps[static_cast<size_t>(l + 1)];
    ag::Var up = ag::conv_transpose2d(deeper, param(p + ".up.w"), param(p + ".up.b"), 2, 1);
    up = ag::relu(ag::group_norm(up, param(p + ".gnup.g"), param(p + ".gnup.b"),
                                 norm_groups(cfg_.groups, cfg_.widths[static_cast<size_t>(l)])));
    if (up.shape() != fused.maps[static_cast<size_t>(l)].shape())
      throw DataError("decode: level " + std::to_string(l) + " shape mismatch " + shape_str(up.shape()) + " vs " +
                      shape_str(fused.maps[static_cast<size_t>(l)].shape()));
    ag::Var cat = ag::concat_channels({up, fused.maps[static_cast<size_t>(l)]});
    d.maps[static_cast<size_t>(l)] = conv_block(cat, p, 1);
  }
  return d;
}

ag::Var UTAE::head_logits(const DecoderMaps& maps) const {
  if (maps.maps.empty()) throw DataError("predict: no decoder maps");
  return ag::conv2d(maps.maps.front(), param("head.w"), param("head.b"), 1, 1);
}

ForwardResult UTAE::forward(const ag::Var& x, const Tensor& validity, const std::vector<int>& positions) const {
  ForwardResult r;
  EncoderPyramid pyr = encode_spatial(x);
  r.attention = attend_temporal(pyr, validity, positions);
  r.maps = decode(fuse_temporal(pyr, r.attention));
  r.logits = head_logits(r.maps);
  r.probs = predict(r.logits);
  return r;
}

ForwardResult UTAE::forward(const SITSCube& cube) const {
  cube.validate();
  return forward(ag::constant(cube.frames), cube.validity_tensor(), cube.period_labels);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {
constexpr char kCkptMagic[] = "CWSCKPT1\n";
constexpr int kFormatVersion = 1;
}  // namespace

Checkpoint make_checkpoint(const UTAE& model, const NormStats& norm, nlohmann::json metadata) {
  Checkpoint c;
  c.config = model.config();
  c.normalization = norm;
  c.metadata = std::move(metadata);
  for (const auto& [name, v] : model.parameters()) c.tensors.emplace_back(name, v.value());
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json h;
  h["format_version"] = kFormatVersion;
  h["model_config"] = ckpt.config;
  h["normalization"] = {{"mean", ckpt.normalization.mean}, {"std", ckpt.normalization.std}};
  h["metadata"] = ckpt.metadata;
  int64_t offset = 0;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  h["tensors"] = index;
  const std::string header = h.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling temp file first so a crash never leaves a torn checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write checkpoint " + path.string());
    f.write(kCkptMagic, sizeof(kCkptMagic) - 1);
    const uint64_t n = header.size();
    f.write(reinterpret_cast<const char*>(&n), sizeof n);
    f.write(header.data(), static_cast<std::streamsize>(n));
    for (const auto& [name, t] : ckpt.tensors)
      f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
    if (!f) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  char magic[sizeof(kCkptMagic) - 1];
  f.read(magic, sizeof magic);
  if (!f || std::string(magic, sizeof magic) != kCkptMagic) throw DataError(path.string() + ": not a checkpoint");
  uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!f || n > (64u << 20)) throw DataError(path.string() + ": corrupt checkpoint header");
  std::string header(n, '\0');
  f.read(header.data(), static_cast<std::streamsize>(n));
  if (!f) throw DataError(path.string() + ": truncated checkpoint header");
  Checkpoint c;
  std::vector<std::pair<std::string, Shape>> index;
  try {
    const auto h = nlohmann::json::parse(header);
    if (h.at("format_version").get<int>() != kFormatVersion)
      throw DataError(path.string() + ": unsupported checkpoint version " + h.at("format_version").dump());
    c.config = h.at("model_config").get<ModelConfig>();
    c.normalization.mean = h.at("normalization").at("mean").get<std::vector<double>>();
    c.normalization.std = h.at("normalization").at("std").get<std::vector<double>>();
    c.metadata = h.value("metadata", nlohmann::json::object());
    for (const auto& e : h.at("tensors")) index.emplace_back(e.at("name").get<std::string>(), e.at("shape").get<Shape>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad checkpoint header: " + e.what());
  }
  for (auto& [name, shape] : index) {
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
    if (!f) throw DataError(path.string() + ": truncated tensor data for " + name);
    c.tensors.emplace_back(name, std::move(t));
  }
  return c;
}

UTAE model_from_checkpoint(const Checkpoint& ckpt) {
  UTAE model(ckpt.config, 0);
  if (ckpt.tensors.size() != model.parameters().size())
    throw DataError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                    std::to_string(model.parameters().size()));
  for (const auto& [name, t] : ckpt.tensors) {
    ag::Var& p = model.param(name);
    if (p.shape() != t.shape())
      throw DataError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                      shape_str(p.shape()));
    p.mutable_value() = t;
  }
  return model;
}

}  // namespace croplandws
