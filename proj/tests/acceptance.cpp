// Acceptance runner: one PASS/FAIL line per criterion.
//   acceptance            run all criteria
//   acceptance 3 5 10     run a subset

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "croplandws/label_fusion.hpp"
#include "croplandws/mapping_eval.hpp"
#include "croplandws/metrics.hpp"
#include "croplandws/robustness_synth.hpp"
#include "croplandws/weak_supervision.hpp"
#include "mosaic_oracle.hpp"
#include "synthetic_experiment.hpp"
#include "ws_oracles.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

using namespace croplandws;
using namespace croplandws::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1: metric identities -------------------------------------------------

// Confusion matrix consistent with the published per-class PA/UA (percent).
// TP is fixed, FN and FP follow from the crop pair, and TN is the mean of the
// two values implied by the non-crop pair.
ConfusionMatrix from_pa_ua(double crop_pa, double crop_ua, double non_pa, double non_ua) {
  const double tp = 1e8;
  const double fn = tp * (100.0 - crop_pa) / crop_pa;
  const double fp = tp * (100.0 - crop_ua) / crop_ua;
  const double tn = 0.5 * (non_pa * fp / (100.0 - non_pa) + non_ua * fn / (100.0 - non_ua));
  ConfusionMatrix cm;
  cm.counts[1][1] = std::llround(tp);
  cm.counts[1][0] = std::llround(fn);
  cm.counts[0][1] = std::llround(fp);
  cm.counts[0][0] = std::llround(tn);
  return cm;
}

Outcome criterion1() {
  struct Row {
    const char* area;
    double crop_pa, crop_ua, non_pa, non_ua;
    double crop_f1, non_f1, avg_f1;
  };
  const Row rows[] = {
      {"Hunan", 68.82, 60.38, 90.09, 92.94, 64.32, 91.49, 77.91},
      {"Southwest France", 80.63, 86.44, 81.40, 74.09, 83.44, 77.57, 80.50},
      {"Kansas", 83.72, 91.56, 92.81, 85.95, 87.47, 89.25, 88.36},
  };
  bool ok = true;
  std::ostringstream d;
  for (const Row& r : rows) {
    const EvalReport e = metrics(from_pa_ua(r.crop_pa, r.crop_ua, r.non_pa, r.non_ua));
    const double dc = std::abs(e.crop.f1 - r.crop_f1), dn = std::abs(e.noncrop.f1 - r.non_f1),
                 da = std::abs(e.avg_f1 - r.avg_f1);
    ok = ok && dc <= 0.05 && dn <= 0.05 && da <= 0.05;
    d << fmt("%s crop F1 %.3f (table %.2f) non-crop %.3f (%.2f) avg %.3f (%.2f); ", r.area, e.crop.f1, r.crop_f1,
             e.noncrop.f1, r.non_f1, e.avg_f1, r.avg_f1);
  }
  return {ok, d.str()};
}

// ---- 2: fusion oracle -----------------------------------------------------

Outcome criterion2() {
  std::mt19937_64 rng(2);
  int64_t mismatches = 0, agreed = 0;
  const RasterGrid g = [] {
    RasterGrid x;
    x.width = x.height = 32;
    x.pixel_size = 10;
    x.crs_id = "EPSG:32650";
    return x;
  }();
  for (int s = 0; s < 100; ++s) {
    // per-stack crop share and nodata rate, so agreement is neither rare nor certain
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double crop = u(rng), nodata = 0.1 * u(rng);
    ProductStack stack;
    stack.grid = g;
    for (int m = 0; m < 3; ++m) {
      BinaryLayer b{g, std::vector<uint8_t>(1024)};
      for (auto& v : b.values) v = u(rng) < nodata ? kNoLabel : static_cast<uint8_t>(u(rng) < crop);
      stack.add("p" + std::to_string(m), b);
    }
    const FusionResult f = rate_quality(stack);
    for (size_t p = 0; p < 1024; ++p) {
      const uint8_t a = stack.layers[0][p], b = stack.layers[1][p], c = stack.layers[2][p];
      const bool all_equal = a == b && b == c && a != kNoLabel;
      const uint8_t label = all_equal ? a : kNoLabel;
      mismatches += f.mask.mask[p] != static_cast<uint8_t>(all_equal) || f.labels.labels[p] != label;
      agreed += all_equal;
    }
  }
  return {mismatches == 0, fmt("%lld mismatches over 102400 pixels (%lld high-quality)", (long long)mismatches,
                               (long long)agreed)};
}

// ---- 3: loss oracles --------------------------------------------------------

Outcome criterion3() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> side(4, 12), dim(2, 8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_sup = 0.0, worst_dice = 0.0, worst_unsup = 0.0;
  int match_mismatch = 0, instances = 0;
  for (int i = 0; i < 50; ++i) {
    const int64_t H = side(rng), W = side(rng), D = dim(rng), K = std::min<int64_t>(8, H * W);
    const int64_t M = std::min<int64_t>(64, H * W);

    // supervised
    const Tensor probs = random_distributions(2, H, W, rng, 4.0);
    std::vector<uint8_t> labels(static_cast<size_t>(H * W)), mask(static_cast<size_t>(H * W));
    for (size_t p = 0; p < labels.size(); ++p) {
      mask[p] = u(rng) < 0.6;
      labels[p] = mask[p] ? static_cast<uint8_t>(u(rng) < 0.5) : 255;
    }
    const double sup = supervised_loss(ag::constant(probs), labels, mask).item();
    worst_sup = std::max(worst_sup, std::abs(sup - oracle_supervised(probs, labels, mask)));

    // dice on raw vectors
    std::vector<double> a(static_cast<size_t>(D)), b(static_cast<size_t>(D));
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    worst_dice = std::max(worst_dice, std::abs(dice_similarity(a, b) - oracle_dice(a, b)));

    // matches and unsupervised loss
    const Tensor z = random_distributions(D, H, W, rng);
    AnchorSet set = sample_anchors(H, W, K, M, 300 + i);
    find_matches(z, set);
    const auto ref = oracle_matches(z, set.anchors, set.pool);
    if (ref.size() != set.matches.size()) {
      ++match_mismatch;
    } else {
      for (size_t k = 0; k < ref.size(); ++k)
        match_mismatch += ref[k].n != set.matches[k].n || ref[k].s != set.matches[k].s ||
                          ref[k].d != set.matches[k].d || ref[k].sn != set.matches[k].sn;
    }
    LossWeights w;
    w.alpha = u(rng) * 2;
    w.beta = u(rng) * 2;
    w.gamma = u(rng) * 2;
    w.margin = 0.5 + u(rng) * 3;
    const double us = unsupervised_loss(ag::constant(z), set, w).item();
    worst_unsup = std::max(worst_unsup, std::abs(us - oracle_unsupervised(z, set.matches, w)));
    ++instances;
  }
  const bool ok = worst_sup < 1e-6 && worst_dice < 1e-6 && worst_unsup < 1e-6 && match_mismatch == 0;
  return {ok, fmt("%d instances; max |diff| supervised %.2e, dice %.2e, unsupervised %.2e; match mismatches %d",
                  instances, worst_sup, worst_dice, worst_unsup, match_mismatch)};
}

// ---- 4: gradient check ----------------------------------------------------

Outcome criterion4() {
  const LossGradCheck r = loss_ws_gradcheck(4, 120, 16);
  const bool ok = r.checked >= 100 && r.failed == 0 && r.max_rel_err < 1e-3;
  return {ok, fmt("%d parameters checked, %d above 1e-3, max relative error %.2e, %d anchors skipped near the hinge",
                  r.checked, r.failed, r.max_rel_err, r.hinge_skipped)};
}

// ---- 5: normalization invariants ------------------------------------------

Outcome criterion5() {
  std::mt19937_64 rng(5);
  double worst_attn = 0.0, worst_prob = 0.0, worst_mosaic = 0.0, masked_weight = 0.0;
  const ModelConfig cfg = tiny_model_config(12);
  for (int i = 0; i < 6; ++i) {
    UTAE model(cfg, 50 + i);
    PatchSample patch = random_patch(cfg, 32, 32, rng, 0.5, 0.2);
    const SITSCube cube = corrupt_cube(patch.cube, std::fmod(0.1 * i, 0.5), (i + 1) / 12.0, 500 + i);
    const ForwardResult r = model.forward(cube);
    const int64_t T = cube.T();
    for (size_t l = 0; l < r.attention.weights.size(); ++l) {
      const Tensor& w = r.attention.weights[l].value();
      const int64_t h = w.dim(2), wd = w.dim(3), f = 32 / h;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < wd; ++x) {
          double s = 0.0, off = 0.0;
          bool any = false;
          for (int64_t t = 0; t < T; ++t) {
            bool valid = false;  // frame valid somewhere under this coarse pixel
            for (int64_t dy = 0; dy < f; ++dy)
              for (int64_t dx = 0; dx < f; ++dx)
                valid = valid || cube.validity[static_cast<size_t>(t * 1024 + (y * f + dy) * 32 + x * f + dx)];
            any = any || valid;
            const double v = w.at(t, 0, y, x);
            s += v;
            if (!valid) off = std::max(off, std::abs(v));
          }
          worst_attn = std::max(worst_attn, std::abs(s - 1.0));
          if (any) masked_weight = std::max(masked_weight, off);
        }
    }
    const Tensor& p = r.probs.value();
    for (int64_t k = 0; k < 1024; ++k) worst_prob = std::max(worst_prob, std::abs(p[k] + p[1024 + k] - 1.0));

    // mosaic of overlapping tiles on a 40x40 region
    SITSCube region;
    region.frames = Tensor({12, 3, 40, 40});
    for (int64_t j = 0; j < region.frames.numel(); ++j) region.frames[j] = std::normal_distribution<double>()(rng);
    region.period_labels = cube.period_labels;
    region.validity.assign(12 * 1600, 1);
    region = corrupt_cube(region, 0.2, 0.25, 900 + i);
    RasterGrid g;
    g.width = g.height = 40;
    g.pixel_size = 10;
    g.crs_id = "EPSG:32650";
    const RegionMap m = map_region(region, g, 16, 12, model_predictor(model));
    for (int64_t k = 0; k < 1600; ++k) worst_mosaic = std::max(worst_mosaic, std::abs(m.probs[k] + m.probs[1600 + k] - 1.0));
  }
  const bool ok = worst_attn < 1e-5 && masked_weight == 0.0 && worst_prob < 1e-6 && worst_mosaic < 1e-6;
  return {ok, fmt("max |sum-1|: attention %.2e (weight on dropped frames %.1e), probabilities %.2e, mosaic %.2e",
                  worst_attn, masked_weight, worst_prob, worst_mosaic)};
}

// ---- 6: synthetic end to end ----------------------------------------------

WorldConfig noisy_world(uint64_t seed, double rate) {
  WorldConfig c;
  c.size = 256;
  c.T = 12;
  c.products = 3;
  c.noise = {ProductNoise{rate, rate, 0.0}};
  c.seed = seed;
  return c;
}

Outcome criterion6() {
  int wins = 0;
  std::ostringstream d;
  for (int s = 0; s < 5; ++s) {
    const Experiment e = make_experiment(noisy_world(6000 + s, 0.1));
    const double best = best_product_f1(e);
    const Checkpoint ck = train_checkpoint(e, desk_model_config(), LossWeights{}, desk_schedule(s, 30));
    const double f1 = model_f1(ck, e);
    wins += f1 > best;
    d << fmt("seed %d model %.2f vs best product %.2f; ", s, f1, best);
  }
  return {wins >= 4, fmt("%d/5 seeds beat the best product. ", wins) + d.str()};
}

// ---- 7: weak-supervision ablation ------------------------------------------

constexpr int kAblationEpochs = 30;  // same schedule as criterion 6

Outcome criterion7() {
  LossWeights full, sup;
  sup.alpha = sup.beta = sup.gamma = 0.0;
  std::ostringstream d;
  bool within = true;
  int greater = 0;
  for (double rate : {0.1, 0.2}) {
    d << fmt("noise %.0f%%:", rate * 100);
    for (int s = 0; s < 5; ++s) {
      const Experiment e = make_experiment(noisy_world(7000 + s, rate));
      const TrainSchedule sched = desk_schedule(s, kAblationEpochs);
      const double ff = model_f1(train_checkpoint(e, desk_model_config(), full, sched), e);
      const double fs = model_f1(train_checkpoint(e, desk_model_config(), sup, sched), e);
      if (rate == 0.1) within = within && ff >= fs - 0.5;
      else greater += ff > fs;
      d << fmt(" seed %d full %.2f sup %.2f;", s, ff, fs);
    }
    d << ' ';
  }
  return {within && greater >= 3,
          fmt("10%%: full >= sup - 0.5 in every seed: %s; 20%%: full > sup in %d/5. ", within ? "yes" : "no", greater) +
              d.str()};
}

// ---- 8: robustness grid -----------------------------------------------------

Outcome criterion8() {
  const Experiment e = make_experiment(noisy_world(8000, 0.1));
  const Checkpoint ck = train_checkpoint(e, desk_model_config(), LossWeights{}, desk_schedule(8, 10));
  CorruptionConfig cc;
  cc.seed = 8;
  const RobustnessGrid g = robustness_grid(ck, e.target, cc);
  const EvalReport clean = evaluate_checkpoint(ck, e.target);
  bool shape = g.cells.size() == 55 && g.spatial_rates.size() == 5 && g.temporal_rates.size() == 11;
  const bool identity = g.at(0, 0).report.cm == clean.cm && g.at(0, 0).report.avg_f1 == clean.avg_f1;
  int frame_errors = 0, spatial_errors = 0;
  double worst_frac = 0.0;
  const int64_t T = e.target.cube.T(), HW = e.target.grid.pixels();
  for (const GridCell& c : g.cells) {
    // regenerate the cell's cube and count independently of the log
    const SITSCube cube = corrupt_cube(e.target.cube, c.spatial_rate, c.temporal_rate, c.seed);
    const auto want = std::llround(c.temporal_rate * static_cast<double>(T));
    int64_t dropped = 0;
    for (int64_t t = 0; t < T; ++t) {
      int64_t invalid = 0, was_invalid = 0;
      for (int64_t p = 0; p < HW; ++p) {
        invalid += !cube.validity[static_cast<size_t>(t * HW + p)];
        was_invalid += !e.target.cube.validity[static_cast<size_t>(t * HW + p)];
      }
      if (invalid == HW) {
        ++dropped;
        continue;
      }
      const double frac = static_cast<double>(invalid - was_invalid) / static_cast<double>(HW);
      worst_frac = std::max(worst_frac, std::abs(frac - c.spatial_rate));
      spatial_errors += std::abs(frac - c.spatial_rate) > 0.005;
    }
    frame_errors += dropped != want || static_cast<int64_t>(c.corruption.dropped_frames.size()) != want;
  }
  double f1_first = 0.0, f1_last = 0.0;
  for (size_t s = 0; s < 5; ++s) {
    f1_first += g.at(s, 0).report.avg_f1 / 5;
    f1_last += g.at(s, 10).report.avg_f1 / 5;
  }
  const bool ok = shape && identity && frame_errors == 0 && spatial_errors == 0;
  return {ok, fmt("%zu cells; (0,0) equals clean evaluation: %s (avg F1 %.2f); frame-count errors %d; spatial "
                  "fraction errors %d (max deviation %.4f); mean avg F1 at temporal 0 %.2f vs 83.33%% %.2f",
                  g.cells.size(), identity ? "yes" : "no", clean.avg_f1, frame_errors, spatial_errors, worst_frac,
                  f1_first, f1_last)};
}

// ---- 9: continue training ---------------------------------------------------

constexpr int kTransferEpochs = 15;

Outcome criterion9() {
  int wins = 0;
  std::ostringstream d;
  for (int s = 0; s < 5; ++s) {
    const Experiment before = make_experiment(noisy_world(9000 + s, 0.1));
    const Checkpoint ck = train_checkpoint(before, desk_model_config(), LossWeights{}, desk_schedule(s, kTransferEpochs));

    WorldConfig shifted_cfg = noisy_world(9000 + s, 0.1);
    shifted_cfg.phase_shift = 2.0;
    Experiment after = make_experiment(shifted_cfg);
    // the continued model keeps the original normalization
    for (auto& p : after.patches) {
      p.cube = tile_cube(after.world.cube, p.tile);
      normalize(p.cube, ck.normalization);
    }
    const double dt = model_f1(ck, after);
    TrainOptions opt;
    const TrainResult r = continue_train(ck, after.patches, LossWeights{}, desk_schedule(100 + s, 5), opt);
    const double ct = model_f1(make_checkpoint(r.model, ck.normalization), after);
    wins += ct - dt > 1.0;
    d << fmt("seed %d DT %.2f CT %.2f; ", s, dt, ct);
  }
  return {wins >= 4, fmt("CT beats DT by > 1 point in %d/5 seeds. ", wins) + d.str()};
}

// ---- 10: mosaicking oracle ----------------------------------------------------

Outcome criterion10() {
  struct Case {
    int64_t W, H, tile, stride;
  };
  const Case cases[] = {{40, 40, 16, 12}, {100, 90, 32, 24}, {64, 64, 32, 32}, {70, 45, 32, 8}, {20, 12, 16, 16}};
  int64_t mismatches = 0, pixels = 0;
  for (const Case& c : cases) {
    RasterGrid g;
    g.width = c.W;
    g.height = c.H;
    g.pixel_size = 10;
    g.crs_id = "EPSG:32650";
    const BruteMosaic ref = brute_mosaic(g, c.tile, c.stride);
    for (int jobs : {1, 3}) {
      const RegionMap m = map_region(blank_cube(2, 1, c.H, c.W), g, c.tile, c.stride, stub_predictor(), jobs);
      const int64_t n = c.W * c.H;
      for (int64_t p = 0; p < n; ++p) {
        mismatches += m.probs[n + p] != ref.p_crop[static_cast<size_t>(p)] ||
                      m.probs[p] != ref.p_noncrop[static_cast<size_t>(p)] ||
                      m.binary[static_cast<size_t>(p)] != ref.binary[static_cast<size_t>(p)];
        ++pixels;
      }
    }
  }
  return {mismatches == 0, fmt("%lld mismatches over %lld pixels (5 layouts, 1 and 3 workers)", (long long)mismatches,
                               (long long)pixels)};
}

struct Entry {
  int id;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);  // see tools/croplandws_main.cpp
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  const std::vector<Entry> all = {
      {1, 1, criterion1},      {2, 5, criterion2},       {3, 30, criterion3},   {4, 300, criterion4},
      {5, 60, criterion5},     {6, 1800, criterion6},    {7, 3600, criterion7}, {8, 600, criterion8},
      {9, 3600, criterion9},   {10, 60, criterion10},
  };
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  int failed = 0;
  for (const Entry& e : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), e.id) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = e.run();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < e.budget_s;
    const bool pass = o.pass && in_time;
    std::printf("criterion %d: %s (%.1fs of %.0fs budget%s) %s\n", e.id, pass ? "PASS" : "FAIL", secs, e.budget_s,
                in_time ? "" : ", over budget", o.detail.c_str());
    std::fflush(stdout);
    failed += !pass;
  }
  return failed == 0 ? 0 : 1;
}
