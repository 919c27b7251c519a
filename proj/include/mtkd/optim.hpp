#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mtkd/error.hpp"

namespace mtkd {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Per-parameter moment buffers of AdamW. Buffers are allocated lazily on the
/// first step and indexed by the order in which parameters are presented.
struct OptimizerState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One decoupled-weight-decay Adam step for a single parameter buffer.
/// `slot` selects the moment buffers; call advance() once per optimizer step
/// before updating the parameters of that step.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, OptimizerState& state,
                  std::size_t slot, double lr) {
  if (lr < 0.0) throw Error("adamw: negative learning rate " + std::to_string(lr));
  if (param.size() != grad.size()) {
    throw ShapeError("adamw: parameter has " + std::to_string(param.size()) +
                     " values, gradient " + std::to_string(grad.size()));
  }
  if (state.step == 0) throw Error("adamw: call advance() before updating parameters");
  if (state.m.size() <= slot) {
    state.m.resize(slot + 1);
    state.v.resize(slot + 1);
  }
  auto& m = state.m[slot];
  auto& v = state.v[slot];
  if (m.empty()) {
    m.assign(param.size(), 0.0);
    v.assign(param.size(), 0.0);
  } else if (m.size() != param.size()) {
    throw ShapeError("adamw: moment buffer " + std::to_string(slot) + " has " +
                     std::to_string(m.size()) + " values, parameter " +
                     std::to_string(param.size()));
  }
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    const double p = static_cast<double>(param[i]);
    param[i] = static_cast<T>(p - lr * (m_hat / (std::sqrt(v_hat) + c.eps) + c.weight_decay * p));
  }
}

inline void advance(OptimizerState& state) { ++state.step; }

/// Single-buffer convenience form: advances the step counter and updates.
template <typename T>
void adamw_step(std::span<T> param, std::span<const T> grad, OptimizerState& state, double lr) {
  if (lr < 0.0) throw Error("adamw: negative learning rate " + std::to_string(lr));
  advance(state);
  adamw_update(param, grad, state, 0, lr);
}

enum class LrKind { linear, cosine };

inline std::string to_string(LrKind kind) { return kind == LrKind::linear ? "linear" : "cosine"; }

inline LrKind parse_lr_kind(const std::string& s) {
  if (s == "linear") return LrKind::linear;
  if (s == "cosine") return LrKind::cosine;
  throw ConfigError("unknown lr schedule '" + s + "' (expected linear or cosine)");
}

/// Linear warmup from warmup_start_lr to initial_lr, then linear or cosine
/// decay reaching 0 at max_iters. warmup_iters = 0 starts decaying at once.
struct LrSchedule {
  LrKind kind = LrKind::linear;
  std::size_t warmup_iters = 1000;
  std::size_t max_iters = 200000;
  double warmup_start_lr = 1e-6;
  double initial_lr = 1e-4;

  void validate() const {
    if (warmup_iters >= max_iters) {
      throw ConfigError("lr schedule needs warmup_iters < max_iters, got warmup " +
                        std::to_string(warmup_iters) + ", max " + std::to_string(max_iters));
    }
    if (warmup_start_lr < 0.0 || initial_lr < 0.0) {
      throw ConfigError("lr schedule rates must be nonnegative");
    }
  }
};

inline double lr_at(const LrSchedule& s, std::size_t iter) {
  s.validate();
  if (iter > s.max_iters) {
    throw Error("lr_at: iteration " + std::to_string(iter) + " exceeds max_iters " +
                std::to_string(s.max_iters));
  }
  if (s.warmup_iters > 0 && iter <= s.warmup_iters) {
    const double f = static_cast<double>(iter) / static_cast<double>(s.warmup_iters);
    return s.warmup_start_lr + (s.initial_lr - s.warmup_start_lr) * f;
  }
  const double progress = static_cast<double>(iter - s.warmup_iters) /
                          static_cast<double>(s.max_iters - s.warmup_iters);
  if (s.kind == LrKind::linear) return s.initial_lr * (1.0 - progress);
  return s.initial_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mtkd
