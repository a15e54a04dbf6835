#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "iblm/error.hpp"
#include "iblm/nets.hpp"

namespace iblm {

struct OptimizerConfig {
  std::string kind = "adam";  // "adam" or "sgd"
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled for adam, L2 for sgd

  void validate() const {
    if (kind != "adam" && kind != "sgd") throw ConfigError("optimizer: kind must be 'adam' or 'sgd', got '" + kind + "'");
    if (!(learning_rate > 0.0)) throw ConfigError("optimizer: learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer: betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("optimizer: epsilon must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be >= 0");
  }
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig config, const ParameterSet& params) : config_(std::move(config)) {
    config_.validate();
    if (config_.kind == "adam") {
      m_ = params.zeros_like();
      v_ = params.zeros_like();
    }
  }

  // Applies one update in place. `grads` must share the layout of `params`.
  void step(ParameterSet& params, const ParameterSet& grads) {
    if (!params.same_layout(grads)) throw ShapeError("optimizer-step", Shape{params.size()}, Shape{grads.size()});
    ++t_;
    const double lr = config_.learning_rate;
    if (config_.kind == "sgd") {
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params.entries()[i].value;
        const auto& g = grads.entries()[i].value;
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * (g[j] + config_.weight_decay * p[j]);
      }
      return;
    }
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params.entries()[i].value;
      const auto& g = grads.entries()[i].value;
      auto& m = m_.entries()[i].value;
      auto& v = v_.entries()[i].value;
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        p[j] -= lr * ((m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon) + config_.weight_decay * p[j]);
      }
    }
  }

  long steps() const noexcept { return t_; }
  const OptimizerConfig& config() const noexcept { return config_; }

 private:
  OptimizerConfig config_;
  ParameterSet m_;
  ParameterSet v_;
  long t_ = 0;
};

}  // namespace iblm
