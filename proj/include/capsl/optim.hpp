#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "capsl/encoder.hpp"
#include "capsl/error.hpp"

namespace capsl {

// Linear warmup to lr_peak over `warmup` steps, then half-cosine decay to 0
// at `total_steps`.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup, double lr_peak) {
  if (warmup >= total_steps) throw ConfigError("warmup steps must be < total steps");
  if (step > total_steps) throw ConfigError("step beyond total steps");
  if (step < warmup) return lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

// Decoupled weight decay: params are first scaled by (1 - lr * wd), then the
// bias-corrected Adam step is applied.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

  void step(ParamSet<T>& params, double lr) {
    const std::size_t n = params.total_size();
    if (m_.size() != n) {
      m_.assign(n, 0.0);
      v_.assign(n, 0.0);
    }
    const auto& g = params.grads();
    for (std::size_t i = 0; i < params.count(); ++i) {
      const auto& e = params.entries()[i];
      for (std::size_t k = e.offset; k < e.offset + e.size; ++k)
        if (!std::isfinite(static_cast<double>(g[k]))) throw ValidationError("non-finite gradient in parameter '" + e.name + "'");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - lr * cfg_.weight_decay;
    auto& p = params.values();
    for (std::size_t k = 0; k < n; ++k) {
      const double gk = static_cast<double>(g[k]);
      m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * gk;
      v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * gk * gk;
      const double update = (m_[k] / bc1) / (std::sqrt(v_[k] / bc2) + cfg_.eps);
      p[k] = static_cast<T>(static_cast<double>(p[k]) * decay);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - lr * update);
    }
    params.touch();
  }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace capsl
