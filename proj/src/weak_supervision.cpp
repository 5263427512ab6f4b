#include "croplandws/weak_supervision.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>

#include "croplandws/errors.hpp"

namespace croplandws {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Unbiased integer in [0, n) by rejection; independent of the standard
// library's distribution implementation.
uint64_t bounded(std::mt19937_64& rng, uint64_t n) {
  const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
  uint64_t r;
  do r = rng(); while (r >= limit);
  return r % n;
}

// First k entries of a seeded Fisher-Yates shuffle of 0..n-1.
std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k, std::mt19937_64& rng) {
  k = std::min(k, n);
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<int64_t>(bounded(rng, static_cast<uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(k));
  return idx;
}

// Same accumulation order as dice_similarity so cached norms give
// bit-identical scores.
double sumsq(const double* a, int64_t D) {
  double s = 0.0;
  for (int64_t i = 0; i < D; ++i) s += a[i] * a[i];
  return s;
}

double dot(const double* a, const double* b, int64_t D) {
  double s = 0.0;
  for (int64_t i = 0; i < D; ++i) s += a[i] * b[i];
  return s;
}

double dice_from(double d, double aa, double bb) {
  const double den = aa + bb;
  return den > 0.0 ? 2.0 * d / den : 0.0;
}

}  // namespace

uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x632BE59BD9B4E019ULL)); }

std::vector<int64_t> seeded_sample(int64_t n, int64_t k, uint64_t seed) {
  if (n < 0 || k < 0) throw std::invalid_argument("seeded_sample: negative count");
  std::mt19937_64 rng(seed);
  return sample_without_replacement(n, k, rng);
}

// ---------------------------------------------------------------------------

void LossWeights::validate() const {
  auto check = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string("loss weights: ") + name + " must be finite and >= 0");
  };
  check(alpha, "alpha");
  check(beta, "beta");
  check(gamma, "gamma");
  check(margin, "margin");
  check(supervised_weight, "supervised_weight");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"alpha", w.alpha},   {"beta", w.beta}, {"gamma", w.gamma}, {"margin", w.margin},
       {"supervised_weight", w.supervised_weight}, {"reduction", "mean"}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.alpha = j.value("alpha", d.alpha);
  w.beta = j.value("beta", d.beta);
  w.gamma = j.value("gamma", d.gamma);
  w.margin = j.value("margin", d.margin);
  w.supervised_weight = j.value("supervised_weight", d.supervised_weight);
  if (j.contains("reduction") && j.at("reduction") != "mean") throw ConfigError("loss weights: only mean reduction is supported");
  w.validate();
}

void to_json(nlohmann::json& j, const SamplingConfig& s) { j = {{"anchors", s.anchors}, {"pool", s.pool}}; }

void from_json(const nlohmann::json& j, SamplingConfig& s) {
  const SamplingConfig d;
  s.anchors = j.value("anchors", d.anchors);
  s.pool = j.value("pool", d.pool);
  if (s.anchors < 1 || s.pool < 1) throw ConfigError("sampling: anchors and pool must be >= 1");
}

// ---------------------------------------------------------------------------

ag::Var feature_space(const DecoderMaps& maps, int64_t H, int64_t W) {
  if (maps.maps.empty()) throw std::invalid_argument("feature_space: no decoder maps");
  std::vector<ag::Var> parts;
  parts.reserve(maps.maps.size());
  for (const auto& m : maps.maps) {
    const Tensor& v = m.value();
    if (v.rank() != 4 || v.dim(0) != 1) throw std::invalid_argument("feature_space: decoder maps must be [1, C, h, w]");
    parts.push_back(v.dim(2) == H && v.dim(3) == W ? m : ag::upsample_bilinear(m, H, W));
  }
  return ag::softmax_channels(ag::concat_channels(parts));
}

ag::Var supervised_loss(const ag::Var& probs, const std::vector<uint8_t>& labels, const std::vector<uint8_t>& mask,
                        int64_t* contributing) {
  return ag::masked_nll(probs, labels, mask, contributing);
}

double dice_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dice_similarity: length mismatch");
  const auto D = static_cast<int64_t>(a.size());
  return dice_from(dot(a.data(), b.data(), D), sumsq(a.data(), D), sumsq(b.data(), D));
}

AnchorSet sample_anchors(int64_t H, int64_t W, int64_t K, int64_t M, uint64_t seed) {
  if (H < 2 || W < 2) throw DataError("sample_anchors: patch must be at least 2x2");
  if (K < 1 || M < 1) throw ConfigError("sample_anchors: K and M must be >= 1");
  std::mt19937_64 rng(seed);
  AnchorSet s;
  s.anchors = sample_without_replacement(H * W, K, rng);
  s.pool = sample_without_replacement(H * W, M, rng);
  return s;
}

void find_matches(const Tensor& z, AnchorSet& set) {
  if (z.rank() != 4 || z.dim(0) != 1) throw std::invalid_argument("find_matches: z must be [1, D, H, W]");
  const int64_t D = z.dim(1), H = z.dim(2), W = z.dim(3), P = H * W;
  auto check = [&](const std::vector<int64_t>& v, const char* what) {
    for (int64_t p : v)
      if (p < 0 || p >= P) throw std::out_of_range(std::string("find_matches: ") + what + " index out of range");
  };
  check(set.anchors, "anchor");
  check(set.pool, "pool");

  // pixel-major copy so each feature vector is contiguous
  std::vector<double> pix(static_cast<size_t>(P * D));
  for (int64_t c = 0; c < D; ++c)
    for (int64_t p = 0; p < P; ++p) pix[static_cast<size_t>(p * D + c)] = z[c * P + p];
  auto vec = [&](int64_t p) { return pix.data() + p * D; };
  std::vector<double> norm(static_cast<size_t>(P), -1.0);
  auto nrm = [&](int64_t p) {
    double& v = norm[static_cast<size_t>(p)];
    if (v < 0.0) v = sumsq(vec(p), D);
    return v;
  };

  set.matches.clear();
  for (int64_t n : set.anchors) {
    const double nn = nrm(n);
    int64_t s = -1, d = -1;
    double best = 0.0, worst = 0.0;
    for (int64_t q : set.pool) {
      if (q == n) continue;
      const double sim = dice_from(dot(vec(n), vec(q), D), nn, nrm(q));
      if (s < 0 || sim > best || (sim == best && q < s)) {
        best = sim;
        s = q;
      }
      if (d < 0 || sim < worst || (sim == worst && q < d)) {
        worst = sim;
        d = q;
      }
    }
    if (s < 0) continue;  // pool held only the anchor itself
    const int64_t r = n / W, c = n % W;
    int64_t sn = -1;
    double bn = 0.0;
    for (int64_t dr = -1; dr <= 1; ++dr)
      for (int64_t dc = -1; dc <= 1; ++dc) {
        if (dr == 0 && dc == 0) continue;
        const int64_t rr = r + dr, cc = c + dc;
        if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
        const int64_t q = rr * W + cc;
        const double sim = dice_from(dot(vec(n), vec(q), D), nn, nrm(q));
        if (sn < 0 || sim > bn || (sim == bn && q < sn)) {
          bn = sim;
          sn = q;
        }
      }
    if (sn < 0) throw DataError("find_matches: anchor has no neighbour");
    set.matches.push_back({n, s, d, sn});
  }
}

UnsupervisedTerms unsupervised_terms(const ag::Var& z, const AnchorSet& set, const LossWeights& w) {
  UnsupervisedTerms out;
  if (set.matches.empty() || w.unsupervised_off()) {
    out.total = ag::constant(Tensor(Shape{}, 0.0));
    return out;
  }
  std::vector<std::pair<int64_t, int64_t>> ps, pd, pn;
  for (const auto& m : set.matches) {
    ps.emplace_back(m.n, m.s);
    pd.emplace_back(m.n, m.d);
    pn.emplace_back(m.n, m.sn);
  }
  const ag::Var ks = ag::mean(ag::kl_pairs(z, ps, kKlEps));
  const ag::Var kd_raw = ag::kl_pairs(z, pd, kKlEps);
  const ag::Var kd = ag::mean(ag::relu(ag::add_scalar(ag::scale(kd_raw, -1.0), w.margin)));
  const ag::Var kn = ag::mean(ag::kl_pairs(z, pn, kKlEps));
  out.similar = ks.item();
  out.dissimilar = kd.item();
  out.neighbor = kn.item();
  out.kl_dissimilar.assign(kd_raw.value().storage().begin(), kd_raw.value().storage().end());

  std::optional<ag::Var> total;
  auto accumulate = [&](double weight, const ag::Var& term) {
    if (weight == 0.0) return;
    ag::Var t = ag::scale(term, weight);
    total = total ? ag::add(*total, t) : t;
  };
  accumulate(w.alpha, ks);
  accumulate(w.beta, kd);
  accumulate(w.gamma, kn);
  out.total = *total;
  return out;
}

void to_json(nlohmann::json& j, const LossDiagnostics& d) {
  j = {{"loss", d.total},
       {"supervised", d.supervised},
       {"unsupervised", d.unsupervised},
       {"similar", d.similar},
       {"dissimilar", d.dissimilar},
       {"neighbor", d.neighbor},
       {"mask_fraction", d.mask_fraction},
       {"contributing", d.contributing},
       {"anchors", d.anchors},
       {"pool", d.pool},
       {"no_supervision", d.no_supervision}};
}

LossOutput total_loss(const ForwardResult& fwd, const std::vector<uint8_t>& labels, const std::vector<uint8_t>& mask,
                      const LossWeights& w, const SamplingConfig& sampling, uint64_t seed, const AnchorSet* fixed) {
  const Tensor& pv = fwd.probs.value();
  if (pv.rank() != 4 || pv.dim(0) != 1) throw std::invalid_argument("total_loss: probabilities must be [1, K, H, W]");
  const int64_t H = pv.dim(2), W = pv.dim(3);
  LossOutput out;
  auto& diag = out.diag;

  int64_t ones = 0;
  for (uint8_t m : mask) ones += m == 1;
  diag.mask_fraction = mask.empty() ? 0.0 : static_cast<double>(ones) / static_cast<double>(mask.size());

  ag::Var sl = supervised_loss(fwd.probs, labels, mask, &diag.contributing);
  diag.supervised = sl.item();
  diag.no_supervision = diag.contributing == 0;

  ag::Var usl = ag::constant(Tensor(Shape{}, 0.0));
  if (!w.unsupervised_off()) {
    const ag::Var z = feature_space(fwd.maps, H, W);
    if (fixed) {
      out.matches = *fixed;
    } else {
      out.matches = sample_anchors(H, W, sampling.anchors, sampling.pool, seed);
      find_matches(z.value(), out.matches);  // on a detached copy of Z
    }
    auto terms = unsupervised_terms(z, out.matches, w);
    usl = terms.total;
    diag.similar = terms.similar;
    diag.dissimilar = terms.dissimilar;
    diag.neighbor = terms.neighbor;
    diag.kl_dissimilar = std::move(terms.kl_dissimilar);
    diag.anchors = static_cast<int64_t>(out.matches.matches.size());
    diag.pool = static_cast<int64_t>(out.matches.pool.size());
  }
  diag.unsupervised = usl.item();

  out.loss = diag.no_supervision ? usl : ag::add(ag::scale(sl, w.supervised_weight), usl);
  diag.total = out.loss.item();
  return out;
}

// ---------------------------------------------------------------------------

void Adam::step(const std::vector<std::pair<std::string, ag::Var>>& params, double lr) {
  if (m_.empty()) {
    for (const auto& [name, p] : params) {
      m_.emplace_back(p.value().shape(), 0.0);
      v_.emplace_back(p.value().shape(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw std::logic_error("Adam: parameter list changed");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    ag::Var p = params[i].second;
    const Tensor& g = p.grad();
    if (g.numel() != p.value().numel()) continue;  // never reached by backward
    Tensor& x = p.mutable_value();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (int64_t k = 0; k < x.numel(); ++k) {
      m[k] = b1_ * m[k] + (1.0 - b1_) * g[k];
      v[k] = b2_ * v[k] + (1.0 - b2_) * g[k] * g[k];
      x[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

void TrainSchedule::validate() const {
  if (epochs < 0) throw ConfigError("schedule: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
  if (!(lr > 0.0) || !(lr_late > 0.0)) throw ConfigError("schedule: learning rates must be positive");
  if (checkpoint_every < 0) throw ConfigError("schedule: checkpoint_every must be >= 0");
  if (sampling.anchors < 1 || sampling.pool < 1) throw ConfigError("schedule: anchors and pool must be >= 1");
}

double TrainSchedule::lr_at(int epoch) const {
  const int decay = decay_epoch < 0 ? epochs / 2 : decay_epoch;
  return epoch < decay ? lr : lr_late;
}

void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = {{"epochs", s.epochs},
       {"batch_size", s.batch_size},
       {"lr", s.lr},
       {"lr_late", s.lr_late},
       {"decay_epoch", s.decay_epoch},
       {"seed", s.seed},
       {"checkpoint_every", s.checkpoint_every},
       {"sampling", s.sampling}};
}

void from_json(const nlohmann::json& j, TrainSchedule& s) {
  const TrainSchedule d;
  s.epochs = j.value("epochs", d.epochs);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.lr = j.value("lr", d.lr);
  s.lr_late = j.value("lr_late", d.lr_late);
  s.decay_epoch = j.value("decay_epoch", d.decay_epoch);
  s.seed = j.value("seed", d.seed);
  s.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  if (j.contains("sampling")) s.sampling = j.at("sampling").get<SamplingConfig>();
  s.validate();
}

namespace {

void check_dataset(const std::vector<PatchSample>& dataset, const ModelConfig& cfg) {
  if (dataset.empty()) throw DataError("train: dataset is empty");
  for (const auto& p : dataset) {
    p.cube.validate();
    cfg.check_input(p.cube.T(), p.cube.C(), p.cube.H(), p.cube.W());
    const auto n = static_cast<size_t>(p.rows() * p.cols());
    if (p.labels.size() != n || p.quality_mask.size() != n) throw DataError("train: label/mask size does not match patch");
  }
}

std::string epoch_name(int epoch) {
  std::ostringstream os;
  os << "epoch_" << std::setw(4) << std::setfill('0') << epoch << ".ckpt";
  return os.str();
}

TrainResult run_training(UTAE model, const std::vector<PatchSample>& dataset, const LossWeights& w,
                         const TrainSchedule& schedule, const TrainOptions& options, const std::string& mode) {
  w.validate();
  schedule.validate();
  check_dataset(dataset, model.config());

  const bool files = !options.out_dir.empty();
  std::ofstream log;
  if (files) {
    std::filesystem::create_directories(options.out_dir);
    log.open(options.out_dir / "train_log.ndjson", std::ios::trunc);
    if (!log) throw DataError("train: cannot open log in " + options.out_dir.string());
  }
  auto emit = [&](const nlohmann::json& rec) {
    if (log) log << rec.dump() << '\n' << std::flush;
  };
  auto metadata = [&](int epochs_done) {
    nlohmann::json m = options.metadata;
    m["mode"] = mode;
    m["epochs_completed"] = epochs_done;
    m["loss_weights"] = w;
    m["schedule"] = schedule;
    return m;
  };

  TrainResult result{std::move(model), {}, {}, {}, {}};
  UTAE& net = result.model;
  Adam adam;
  Checkpoint last_good = make_checkpoint(net, options.normalization, metadata(0));
  std::mt19937_64 shuffler(mix_seed(schedule.seed, 0x5348554646ULL));
  int64_t step = 0;
  const auto N = static_cast<int64_t>(dataset.size());

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = schedule.lr_at(epoch);
    std::vector<int64_t> order = sample_without_replacement(N, N, shuffler);
    double epoch_sum = 0.0;
    for (int64_t b0 = 0; b0 < N; b0 += schedule.batch_size) {
      const int64_t b1 = std::min<int64_t>(N, b0 + schedule.batch_size);
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      net.zero_grad();
      double batch_sum = 0.0;
      LossDiagnostics agg;
      for (int64_t i = b0; i < b1; ++i) {
        const auto idx = order[static_cast<size_t>(i)];
        const PatchSample& patch = dataset[static_cast<size_t>(idx)];
        const ForwardResult fwd = net.forward(patch.cube);
        const uint64_t anchor_seed = mix_seed(mix_seed(schedule.seed, static_cast<uint64_t>(step)), static_cast<uint64_t>(idx));
        LossOutput out = total_loss(fwd, patch.labels, patch.quality_mask, w, schedule.sampling, anchor_seed);
        const double v = out.diag.total;
        if (!std::isfinite(v)) {
          std::filesystem::path saved;
          if (files) {
            saved = options.out_dir / "last_good.ckpt";
            save_checkpoint(saved, last_good);
          }
          emit({{"type", "diverged"}, {"epoch", epoch}, {"step", step}, {"loss", nullptr}});
          throw TrainingDiverged("training diverged at step " + std::to_string(step) + " (non-finite loss)", saved);
        }
        ag::backward(ag::scale(out.loss, inv));
        batch_sum += v;
        agg.supervised += out.diag.supervised * inv;
        agg.unsupervised += out.diag.unsupervised * inv;
        agg.similar += out.diag.similar * inv;
        agg.dissimilar += out.diag.dissimilar * inv;
        agg.neighbor += out.diag.neighbor * inv;
        agg.mask_fraction += out.diag.mask_fraction * inv;
        agg.contributing += out.diag.contributing;
        agg.anchors += out.diag.anchors;
      }
      adam.step(net.parameters(), lr);
      const double batch_loss = batch_sum * inv;
      result.step_losses.push_back(batch_loss);
      epoch_sum += batch_sum;
      emit({{"type", "step"},
            {"epoch", epoch},
            {"step", step},
            {"lr", lr},
            {"patches", b1 - b0},
            {"loss", batch_loss},
            {"supervised", agg.supervised},
            {"unsupervised", agg.unsupervised},
            {"similar", agg.similar},
            {"dissimilar", agg.dissimilar},
            {"neighbor", agg.neighbor},
            {"mask_fraction", agg.mask_fraction},
            {"contributing", agg.contributing},
            {"anchors", agg.anchors}});
      ++step;
    }
    net.zero_grad();
    const double epoch_loss = epoch_sum / static_cast<double>(N);
    result.epoch_losses.push_back(epoch_loss);
    nlohmann::json rec{{"type", "epoch"}, {"epoch", epoch}, {"lr", lr}, {"mean_loss", epoch_loss}};
    if (options.validator) {
      nlohmann::json val = options.validator(net, epoch);
      rec["validation"] = val;
      result.validation.push_back(std::move(val));
    }
    emit(rec);
    last_good = make_checkpoint(net, options.normalization, metadata(epoch + 1));
    if (files && schedule.checkpoint_every > 0 && (epoch + 1) % schedule.checkpoint_every == 0)
      save_checkpoint(options.out_dir / epoch_name(epoch + 1), last_good);
  }

  if (files) {
    result.checkpoint = options.out_dir / "model.ckpt";
    save_checkpoint(result.checkpoint, last_good);
  }
  return result;
}

}  // namespace

TrainResult train(const std::vector<PatchSample>& dataset, const ModelConfig& cfg, const LossWeights& w,
                  const TrainSchedule& schedule, const TrainOptions& options) {
  cfg.validate();
  UTAE model(cfg, mix_seed(schedule.seed, 0x494E4954ULL));
  return run_training(std::move(model), dataset, w, schedule, options, "train");
}

TrainResult continue_train(const Checkpoint& ckpt, const std::vector<PatchSample>& dataset, const LossWeights& w,
                           const TrainSchedule& schedule, TrainOptions options) {
  UTAE model = model_from_checkpoint(ckpt);
  if (options.normalization.empty()) options.normalization = ckpt.normalization;
  if (ckpt.metadata.is_object()) options.metadata["resumed_from"] = ckpt.metadata;
  return run_training(std::move(model), dataset, w, schedule, options, "continue");
}

}  // namespace croplandws
