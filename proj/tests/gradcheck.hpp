#pragma once

// Central finite-difference gradient checker used by the unit tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "croplandws/autograd.hpp"

namespace croplandws::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

// Compares d f / d inputs against central differences for every entry of
// every input. Relative error uses max(|a|, |n|, floor) as the denominator.
inline GradCheckResult grad_check(const std::function<ag::Var(const std::vector<ag::Var>&)>& f,
                                  std::vector<Tensor> inputs, double h = 1e-6, double floor = 1e-6) {
  std::vector<ag::Var> params;
  for (auto& t : inputs) params.push_back(ag::parameter(t));
  ag::Var out = f(params);
  ag::backward(out);
  GradCheckResult res;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t j = 0; j < inputs[i].numel(); ++j) {
      auto eval = [&](double delta) {
        std::vector<ag::Var> ps;
        for (size_t k = 0; k < inputs.size(); ++k) {
          Tensor t = inputs[k];
          if (k == i) t[j] += delta;
          ps.push_back(ag::constant(t));
        }
        return f(ps).item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = params[i].grad().numel() ? params[i].grad()[j] : 0.0;
      const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
      res.max_rel_err = std::max(res.max_rel_err, std::abs(numeric - analytic) / denom);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace croplandws::testing
