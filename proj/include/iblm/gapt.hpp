#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>

#include "iblm/error.hpp"
#include "iblm/ops.hpp"

// Gated phase transition controller: alternates between a memorization phase
// (cross-entropy only) and a compression phase (cross-entropy plus weighted
// per-layer matrix-based entropy), gated by patience counters.
namespace iblm::gapt {

enum class Phase { memorization = 1, compression = 2 };
enum class Reason { mem_patience, comp_patience, ce_degraded };

inline const char* to_string(Phase p) { return p == Phase::memorization ? "mem" : "comp"; }

inline const char* to_string(Reason r) {
  switch (r) {
    case Reason::mem_patience: return "mem-patience";
    case Reason::comp_patience: return "comp-patience";
    case Reason::ce_degraded: return "ce-degraded";
  }
  return "?";
}

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct Config {
  double delta = 1e-3;   // improvement threshold, shared by the CE and MBE tests
  double tau = 0.02;     // relative CE degradation tolerated during compression
  int patience_mem = 50;
  int patience_comp = 25;
  double lambda_mbe = 0.05;
  std::set<int> regularized_layers;
  double ce_ema = 0.0;   // 0 disables smoothing; otherwise weight of the previous EMA value

  void validate() const {
    if (!(delta > 0.0)) throw ConfigError("gapt: delta must be > 0");
    if (!(tau > 0.0)) throw ConfigError("gapt: tau must be > 0");
    if (patience_mem < 1 || patience_comp < 1) throw ConfigError("gapt: patience values must be >= 1");
    if (!(lambda_mbe >= 0.0)) throw ConfigError("gapt: lambda_mbe must be >= 0");
    if (!(ce_ema >= 0.0 && ce_ema < 1.0)) throw ConfigError("gapt: ce_ema must lie in [0, 1)");
  }
};

struct State {
  Phase phase = Phase::memorization;
  int stall_mem = 0;
  int stall_comp = 0;
  double ce_min = kInf;
  std::map<int, double> mbe_min;  // absent entries read as +inf
  long step_count = 0;
  std::optional<double> ce_smoothed;

  double tracked_mbe_min(int layer) const {
    auto it = mbe_min.find(layer);
    return it == mbe_min.end() ? kInf : it->second;
  }

  friend bool operator==(const State&, const State&) = default;
};

struct Transition {
  Phase from;
  Phase to;
  Reason reason;
  friend bool operator==(const Transition&, const Transition&) = default;
};

struct Directive {
  Phase phase = Phase::memorization;
  double ce_weight = 1.0;
  std::map<int, double> mbe_weights;
  std::optional<Transition> transition;
  friend bool operator==(const Directive&, const Directive&) = default;
};

inline Directive directive_for(Phase phase, const Config& config) {
  Directive d;
  d.phase = phase;
  for (int layer : config.regularized_layers) {
    d.mbe_weights[layer] = phase == Phase::compression ? config.lambda_mbe : 0.0;
  }
  return d;
}

// Pure transition function; returns the next state and the directive for the
// phase after the update.
inline std::pair<State, Directive> step(State state, double ce_loss, const std::map<int, double>& mbe,
                                        const Config& config) {
  if (!std::isfinite(ce_loss)) throw DomainError("gapt-step: non-finite cross-entropy");
  for (int layer : config.regularized_layers) {
    auto it = mbe.find(layer);
    if (it == mbe.end()) throw DomainError("gapt-step: no MBE reported for layer " + std::to_string(layer));
    if (!std::isfinite(it->second)) throw DomainError("gapt-step: non-finite MBE for layer " + std::to_string(layer));
  }
  ++state.step_count;

  double loss = ce_loss;
  if (config.ce_ema > 0.0) {
    loss = state.ce_smoothed ? config.ce_ema * *state.ce_smoothed + (1.0 - config.ce_ema) * ce_loss : ce_loss;
    state.ce_smoothed = loss;
  }

  const double gain = state.ce_min - loss;
  state.ce_min = std::min(state.ce_min, loss);

  std::optional<Transition> transition;
  if (state.phase == Phase::memorization) {
    state.stall_mem = gain > config.delta ? 0 : state.stall_mem + 1;
    if (state.stall_mem >= config.patience_mem) {
      state.phase = Phase::compression;
      state.stall_comp = 0;
      state.stall_mem = 0;  // not read until memorization resumes, where it restarts at 0
      state.ce_min = kInf;
      state.mbe_min.clear();
      transition = Transition{Phase::memorization, Phase::compression, Reason::mem_patience};
    }
  } else if (loss > state.ce_min * (1.0 + config.tau)) {
    state.phase = Phase::memorization;
    state.stall_mem = 0;
    state.stall_comp = 0;
    transition = Transition{Phase::compression, Phase::memorization, Reason::ce_degraded};
  } else {
    double best_drop = -kInf;
    for (int layer : config.regularized_layers) {
      const double current = mbe.at(layer);
      const double tracked = state.tracked_mbe_min(layer);
      best_drop = std::max(best_drop, tracked - current);
      state.mbe_min[layer] = std::min(tracked, current);
    }
    state.stall_comp = best_drop > config.delta ? 0 : state.stall_comp + 1;
    if (state.stall_comp >= config.patience_comp) {
      state.phase = Phase::memorization;
      state.stall_mem = 0;
      state.stall_comp = 0;
      transition = Transition{Phase::compression, Phase::memorization, Reason::comp_patience};
    }
  }

  Directive d = directive_for(state.phase, config);
  d.transition = transition;
  return {std::move(state), std::move(d)};
}

// Fixed-weight baseline: CE + lambda * MBE on the regularized layers, forever.
inline Directive lagrangian_directive(const Config& config) {
  if (!(config.lambda_mbe >= 0.0)) throw ConfigError("lagrangian: lambda_mbe must be >= 0");
  return directive_for(config.lambda_mbe > 0.0 ? Phase::compression : Phase::memorization, config);
}

inline Directive ce_only_directive(const Config& config) { return directive_for(Phase::memorization, config); }

// ce_weight * ce + sum_l w_l * mbe_l.
inline Var composite_loss(Var ce, const std::map<int, Var>& mbe, const Directive& directive) {
  if (ce.value().size() != 1) throw ShapeError("composite-loss", ce.shape(), "cross-entropy must be a scalar");
  Var total = directive.ce_weight == 1.0 ? ce : scale(ce, directive.ce_weight);
  for (const auto& [layer, weight] : directive.mbe_weights) {
    auto it = mbe.find(layer);
    if (it == mbe.end()) throw DomainError("composite-loss: no MBE term for layer " + std::to_string(layer));
    if (it->second.value().size() != 1) throw ShapeError("composite-loss", it->second.shape(), "MBE must be a scalar");
    if (weight == 0.0) continue;
    total = add(total, scale(it->second, weight));
  }
  return total;
}

// Stateful convenience wrapper for training loops.
class Controller {
 public:
  explicit Controller(Config config) : config_(std::move(config)) { config_.validate(); }

  Directive update(double ce_loss, const std::map<int, double>& mbe) {
    auto [next, directive] = gapt::step(state_, ce_loss, mbe, config_);
    state_ = std::move(next);
    return directive;
  }

  const State& state() const noexcept { return state_; }
  const Config& config() const noexcept { return config_; }

 private:
  Config config_;
  State state_;
};

}  // namespace iblm::gapt
