#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "croplandws/autograd.hpp"
#include "croplandws/sits_pipeline.hpp"
#include "croplandws/utae_model.hpp"
#include "json.hpp"

namespace croplandws {

struct LossWeights {
  double alpha = 1.0;   // similar-pair KL
  double beta = 1.0;    // hinged dissimilar-pair KL
  double gamma = 1.0;   // neighbour KL
  double margin = 1.0;  // nats
  double supervised_weight = 1.0;

  void validate() const;
  bool unsupervised_off() const { return alpha == 0.0 && beta == 0.0 && gamma == 0.0; }
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

inline constexpr double kKlEps = 1e-8;

// Z: decoder maps bilinearly upsampled to H x W, concatenated along
// channels, then softmax per pixel. [1, D, H, W].
ag::Var feature_space(const DecoderMaps& maps, int64_t H, int64_t W);

// Mean -log P(label) over pixels with mask 1 and a real label.
// probs [1, K, H, W].
ag::Var supervised_loss(const ag::Var& probs, const std::vector<uint8_t>& labels, const std::vector<uint8_t>& mask,
                        int64_t* contributing = nullptr);

double dice_similarity(std::span<const double> a, std::span<const double> b);

struct AnchorMatch {
  int64_t n = 0, s = 0, d = 0, sn = 0;
};

struct AnchorSet {
  std::vector<int64_t> anchors;
  std::vector<int64_t> pool;
  std::vector<AnchorMatch> matches;  // one per anchor that found a candidate
};

// Seeded uniform sampling without replacement of K anchors and an
// independent pool of M pixels out of H*W (counts are capped at H*W).
AnchorSet sample_anchors(int64_t H, int64_t W, int64_t K, int64_t M, uint64_t seed);

// Fills matches for every anchor: s / d = most / least Dice-similar pool
// pixel other than n itself, sn = most similar in-image 8-neighbour. Ties
// go to the lowest linear index. z is [1, D, H, W] (values only).
void find_matches(const Tensor& z, AnchorSet& set);

struct UnsupervisedTerms {
  ag::Var total;
  double similar = 0.0;     // mean KL(n || s)
  double dissimilar = 0.0;  // mean hinge(margin - KL(n || d))
  double neighbor = 0.0;    // mean KL(n || sn)
  std::vector<double> kl_dissimilar;  // per match, before hinging
};

UnsupervisedTerms unsupervised_terms(const ag::Var& z, const AnchorSet& set, const LossWeights& w);
inline ag::Var unsupervised_loss(const ag::Var& z, const AnchorSet& set, const LossWeights& w) {
  return unsupervised_terms(z, set, w).total;
}

struct SamplingConfig {
  int64_t anchors = 256;
  int64_t pool = 2048;
};

void to_json(nlohmann::json& j, const SamplingConfig& s);
void from_json(const nlohmann::json& j, SamplingConfig& s);

struct LossDiagnostics {
  double total = 0.0;
  double supervised = 0.0;    // unweighted
  double unsupervised = 0.0;  // already weighted by alpha/beta/gamma
  double similar = 0.0, dissimilar = 0.0, neighbor = 0.0;
  double mask_fraction = 0.0;
  int64_t contributing = 0;
  int64_t anchors = 0;
  int64_t pool = 0;
  bool no_supervision = false;
  std::vector<double> kl_dissimilar;
};

void to_json(nlohmann::json& j, const LossDiagnostics& d);

struct LossOutput {
  ag::Var loss;
  LossDiagnostics diag;
  AnchorSet matches;
};

// Loss_WS for one patch's forward outputs. Anchors are drawn from `seed`
// unless `fixed` supplies a precomputed match set.
LossOutput total_loss(const ForwardResult& fwd, const std::vector<uint8_t>& labels, const std::vector<uint8_t>& mask,
                      const LossWeights& w, const SamplingConfig& sampling, uint64_t seed,
                      const AnchorSet* fixed = nullptr);

class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}
  // One update from the gradients currently stored on the parameters.
  void step(const std::vector<std::pair<std::string, ag::Var>>& params, double lr);
  int64_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct TrainSchedule {
  int epochs = 100;
  int batch_size = 8;
  double lr = 1e-3;
  double lr_late = 1e-4;
  int decay_epoch = -1;  // first epoch at lr_late; -1 = epochs / 2
  uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 = final checkpoint only
  SamplingConfig sampling;

  void validate() const;
  double lr_at(int epoch) const;
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
void from_json(const nlohmann::json& j, TrainSchedule& s);

// Called after every epoch; the returned object is logged as "validation".
using EpochValidator = std::function<nlohmann::json(const UTAE& model, int epoch)>;

struct TrainOptions {
  std::filesystem::path out_dir;  // empty = no files written
  NormStats normalization;        // stored in checkpoints
  EpochValidator validator;
  nlohmann::json metadata = nlohmann::json::object();
};

struct TrainResult {
  UTAE model;
  std::vector<double> step_losses;   // mean patch loss per optimizer step
  std::vector<double> epoch_losses;  // mean patch loss per epoch
  std::vector<nlohmann::json> validation;
  std::filesystem::path checkpoint;  // final checkpoint, if written
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::filesystem::path last_good)
      : std::runtime_error(what), last_good_checkpoint(std::move(last_good)) {}
  std::filesystem::path last_good_checkpoint;
};

// Patches must already be normalized. Deterministic for a fixed schedule
// seed.
TrainResult train(const std::vector<PatchSample>& dataset, const ModelConfig& cfg, const LossWeights& w,
                  const TrainSchedule& schedule, const TrainOptions& options = {});

// Starts from the checkpoint's parameters with a fresh optimizer.
TrainResult continue_train(const Checkpoint& ckpt, const std::vector<PatchSample>& dataset, const LossWeights& w,
                           const TrainSchedule& schedule, TrainOptions options = {});

// Deterministic 64-bit mixing used for derived seeds.
uint64_t mix_seed(uint64_t a, uint64_t b);

// min(k, n) distinct values of 0..n-1 from a seeded partial Fisher-Yates
// shuffle, in draw order.
std::vector<int64_t> seeded_sample(int64_t n, int64_t k, uint64_t seed);

}  // namespace croplandws
