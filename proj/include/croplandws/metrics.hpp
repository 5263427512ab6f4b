#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace croplandws {

// Binary confusion matrix. counts[ref][pred], class 0 = non-crop, 1 = crop.
struct ConfusionMatrix {
  std::array<std::array<int64_t, 2>, 2> counts{};

  int64_t total() const { return counts[0][0] + counts[0][1] + counts[1][0] + counts[1][1]; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o);
  bool operator==(const ConfusionMatrix&) const = default;
};

// Tallies pixels where valid != 0 (an empty valid vector means all) and both
// pred and ref are 0 or 1. Throws DataError when nothing is counted.
ConfusionMatrix confusion(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& ref,
                          const std::vector<uint8_t>& valid = {});

struct ClassScores {
  double pa = 0.0;   // recall, percent
  double ua = 0.0;   // precision, percent
  double f1 = 0.0;   // percent
  double iou = 0.0;  // percent
  // PA + UA == 0: F1 reported as 0.
  bool degenerate = false;
  // Class absent from both reference and prediction: scores are vacuously 100.
  bool absent = false;
};

// All values are unrounded percentages.
struct EvalReport {
  ConfusionMatrix cm;
  double oa = 0.0;
  double miou = 0.0;
  double avg_f1 = 0.0;
  ClassScores crop;
  ClassScores noncrop;
};

EvalReport metrics(const ConfusionMatrix& cm);

// Half-up rounding to `decimals` places, used only when serializing.
double round_half_up(double v, int decimals = 2);

}  // namespace croplandws
