#include "croplandws/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "croplandws/errors.hpp"

namespace croplandws {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& o) {
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) counts[r][c] += o.counts[r][c];
  return *this;
}

ConfusionMatrix confusion(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref,
                          const std::vector<uint8_t>& valid) {
  if (pred.size() != ref.size() || (!valid.empty() && valid.size() != ref.size()))
    throw DataError("confusion: prediction, reference and validity sizes differ");
  ConfusionMatrix cm;
  for (size_t i = 0; i < ref.size(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    if (pred[i] > 1 || ref[i] > 1) continue;
    ++cm.counts[ref[i]][pred[i]];
  }
  if (cm.total() == 0) throw DataError("confusion: no valid pixels to evaluate");
  return cm;
}

namespace {

ClassScores class_scores(const ConfusionMatrix& cm, int k) {
  const auto tp = static_cast<double>(cm.counts[k][k]);
  const auto fn = static_cast<double>(cm.counts[k][1 - k]);
  const auto fp = static_cast<double>(cm.counts[1 - k][k]);
  ClassScores s;
  if (tp + fn + fp == 0) {
    s.pa = s.ua = s.f1 = s.iou = 100.0;
    s.absent = true;
    return s;
  }
  s.pa = tp + fn > 0 ? 100.0 * tp / (tp + fn) : 0.0;
  s.ua = tp + fp > 0 ? 100.0 * tp / (tp + fp) : 0.0;
  s.iou = 100.0 * tp / (tp + fp + fn);
  if (s.pa + s.ua == 0.0) {
    s.degenerate = true;
    s.f1 = 0.0;
  } else {
    s.f1 = 2.0 * s.pa * s.ua / (s.pa + s.ua);
  }
  return s;
}

}  // namespace

EvalReport metrics(const ConfusionMatrix& cm) {
  if (cm.total() <= 0) throw DataError("metrics: empty confusion matrix");
  EvalReport r;
  r.cm = cm;
  r.oa = 100.0 * static_cast<double>(cm.counts[0][0] + cm.counts[1][1]) / static_cast<double>(cm.total());
  r.noncrop = class_scores(cm, 0);
  r.crop = class_scores(cm, 1);
  r.miou = (r.crop.iou + r.noncrop.iou) / 2.0;
  r.avg_f1 = (r.crop.f1 + r.noncrop.f1) / 2.0;
  return r;
}

double round_half_up(double v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  // The nudge keeps decimal ties such as 64.325 (stored just below) rounding up.
  const double scaled = v * scale;
  return std::floor(scaled + 0.5 + 1e-9 * std::max(1.0, std::abs(scaled))) / scale;
}

}  // namespace croplandws
