// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>

#include "mmt/autodiff.hpp"
#include "mmt/config.hpp"
#include "mmt/errors.hpp"
#include "mmt/weights.hpp"

namespace mmt {

// Warmup then inverse square root decay:
//   lr(step) = scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)
struct LrSchedule {
  double scale = 1.0;
  std::size_t warmup_steps = 4000;
  std::size_t model_dim = 512;

  static LrSchedule from(const ModelConfig& c) { return {c.lr_scale, c.warmup_steps, c.model_dim}; }

  double at(std::size_t step) const {
    if (step == 0) throw ConfigError("learning rate schedule: steps start at 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup_steps);
    return scale / std::sqrt(static_cast<double>(model_dim)) * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
  }

  double peak() const { return at(warmup_steps); }
};

inline double lr_at(const LrSchedule& schedule, std::size_t step) { return schedule.at(step); }

// Adam with bias correction. Parameters without a gradient entry are left
// untouched (their moments are not advanced).
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  static Adam from(const ModelConfig& c) { return Adam(c.adam_beta1, c.adam_beta2, c.adam_eps); }

  void step(ModelWeights& weights, const Gradients& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [key, g] : grads) {
      Tensor& p = weights.at(key);
      auto& st = state_[key];
      if (st.m.shape() != p.shape()) {
        st.m = Tensor(p.shape());
        st.v = Tensor(p.shape());
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g[i];
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mh = st.m[i] / c1;
        const double vh = st.v[i] / c2;
        p[i] -= lr * mh / (std::sqrt(vh) + eps_);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  struct Moments {
    Tensor m, v;
  };
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

inline double global_norm(const Gradients& grads) {
  double s = 0.0;
  for (const auto& [k, g] : grads)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

// Rescales all gradients so their global L2 norm is at most max_norm.
inline void clip_gradients(Gradients& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  const double n = global_norm(grads);
  if (n <= max_norm) return;
  const double s = max_norm / n;
  for (auto& [k, g] : grads)
    for (double& v : g.storage()) v *= s;
}

// Builds one example's scalar loss in the binder's graph.
using ExampleLoss = std::function<Var(ParamBinder&, std::size_t item)>;

// Forward/backward for every item, gradients averaged in item order, one Adam
// update. Returns the mean loss over the items.
inline double train_batch(ModelWeights& weights, Adam& opt, double lr, std::span<const std::size_t> items,
                          const ExampleLoss& loss_fn, double grad_clip = 0.0) {
  if (items.empty()) return 0.0;
  Gradients total;
  double loss_sum = 0.0;
  for (std::size_t item : items) {
    Graph g;
    ParamBinder bind(g, weights);
    Var loss = loss_fn(bind, item);
    const double v = loss.value()[0];
    if (!std::isfinite(v)) throw NumericError("non-finite loss at item " + std::to_string(item));
    loss_sum += v;
    g.backward(loss);
    bind.accumulate_grads(total);
  }
  const double inv = 1.0 / static_cast<double>(items.size());
  for (auto& [k, g] : total)
    for (double& v : g.storage()) v *= inv;
  clip_gradients(total, grad_clip);
  opt.step(weights, total, lr);
  return loss_sum * inv;
}

}  // namespace mmt
