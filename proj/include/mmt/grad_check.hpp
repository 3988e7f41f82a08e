// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/errors.hpp"
#include "mmt/weights.hpp"

namespace mmt {

// Builds a scalar loss inside the binder's graph. Must be deterministic for
// fixed weights.
using LossBuilder = std::function<Var(ParamBinder&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_coordinate;  // "key[index]"
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Gradient magnitudes below this are compared absolutely.
inline constexpr double kGradCheckFloor = 1e-6;

inline double loss_value(const LossBuilder& f, const ModelWeights& w) {
  Graph g;
  ParamBinder bind(g, w);
  return f(bind).value()[0];
}

inline Gradients loss_gradients(const LossBuilder& f, const ModelWeights& w, double* loss = nullptr) {
  Graph g;
  ParamBinder bind(g, w);
  Var root = f(bind);
  if (loss) *loss = root.value()[0];
  g.backward(root);
  Gradients grads;
  bind.accumulate_grads(grads);
  return grads;
}

// Compares autodiff gradients with central differences (f(w+h) - f(w-h)) / 2h
// on `samples` coordinates, drawn round-robin across parameter tensors with a
// uniformly random entry inside each. Returns the worst relative error
// |a - n| / max(|a|, |n|, kGradCheckFloor).
inline GradCheckResult grad_check(const LossBuilder& f, ModelWeights w, std::size_t samples,
                                  double h, std::uint64_t seed) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw ConfigError("grad_check: step must lie in [1e-6, 1e-4]");
  double base = 0.0;
  const Gradients analytic = loss_gradients(f, w, &base);
  if (!std::isfinite(base)) throw NumericError("grad_check: loss is not finite at the base point");

  std::vector<std::string> names;
  for (const auto& [k, t] : w.params())
    if (t.size() > 0) names.push_back(k);
  if (names.empty()) throw ConfigError("grad_check: no parameters");

  std::mt19937_64 rng(seed);
  GradCheckResult res;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::string& key = names[s % names.size()];
    Tensor& t = w.at(key);
    std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
    const std::size_t idx = pick(rng);
    const double orig = t[idx];
    t[idx] = orig + h;
    const double up = loss_value(f, w);
    t[idx] = orig - h;
    const double down = loss_value(f, w);
    t[idx] = orig;
    const std::string coord = key + "[" + std::to_string(idx) + "]";
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("grad_check: non-finite loss when perturbing " + coord);
    const double numeric = (up - down) / (2.0 * h);
    auto it = analytic.find(key);
    const double a = it == analytic.end() ? 0.0 : it->second[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
    const double rel = std::abs(a - numeric) / denom;
    ++res.checked;
    if (rel > res.max_rel_error || res.worst_coordinate.empty()) {
      res.max_rel_error = rel;
      res.worst_coordinate = coord;
      res.worst_analytic = a;
      res.worst_numeric = numeric;
    }
  }
  return res;
}

}  // namespace mmt
