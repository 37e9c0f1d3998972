// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "packtrain/error.hpp"
#include "packtrain/graph.hpp"
#include "packtrain/tensor.hpp"

namespace packtrain {

enum class OptimizerKind { adam, sgd, adagrad, momentum };

inline constexpr double kMomentum = 0.9;
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;
inline constexpr double kAdagradEpsilon = 1e-10;

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adagrad: return "adagrad";
    case OptimizerKind::momentum: return "momentum";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adagrad") return OptimizerKind::adagrad;
  if (s == "momentum") return OptimizerKind::momentum;
  throw ConfigError("optimizer", "unknown optimizer '" + std::string(s) + "'");
}

// Number of auxiliary tensors kept per parameter.
inline std::size_t aux_slots(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return 0;
    case OptimizerKind::momentum: return 1;
    case OptimizerKind::adagrad: return 1;
    case OptimizerKind::adam: return 2;
  }
  return 0;
}

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.01;
  std::map<std::string, std::vector<Tensor>> aux;  // momentum buffer | accumulator | (m, v)
  std::uint64_t step = 0;

  OptimizerState() = default;
  OptimizerState(OptimizerKind k, double lr) : kind(k), learning_rate(lr) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning_rate", "must be positive and finite");
  }

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

// One optimizer update over every parameter. All gradients are checked before
// any parameter is touched.
inline void apply_update(OptimizerState& state, TensorMap& parameters, const TensorMap& gradients) {
  for (const auto& [name, p] : parameters) {
    const auto g = gradients.find(name);
    if (g == gradients.end()) throw NumericError(name, "missing gradient");
    if (g->second.shape != p.shape)
      throw ShapeError(name, "gradient shape " + shape_str(g->second.shape) + " vs parameter " + shape_str(p.shape));
    if (!g->second.all_finite()) throw NumericError(name, "non-finite gradient");
  }

  const std::uint64_t t = state.step + 1;
  const double lr = state.learning_rate;
  for (auto& [name, p] : parameters) {
    const Tensor& g = gradients.at(name);
    auto& aux = state.aux[name];
    if (aux.size() != aux_slots(state.kind)) aux.assign(aux_slots(state.kind), Tensor::zeros(p.shape));
    switch (state.kind) {
      case OptimizerKind::sgd:
        for (std::size_t i = 0; i < p.size(); ++i) p.data[i] -= lr * g.data[i];
        break;
      case OptimizerKind::momentum: {
        auto& v = aux[0].data;
        for (std::size_t i = 0; i < p.size(); ++i) {
          v[i] = kMomentum * v[i] + g.data[i];
          p.data[i] -= lr * v[i];
        }
        break;
      }
      case OptimizerKind::adagrad: {
        auto& acc = aux[0].data;
        for (std::size_t i = 0; i < p.size(); ++i) {
          acc[i] += g.data[i] * g.data[i];
          p.data[i] -= lr * g.data[i] / (std::sqrt(acc[i]) + kAdagradEpsilon);
        }
        break;
      }
      case OptimizerKind::adam: {
        auto& m = aux[0].data;
        auto& v = aux[1].data;
        const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t));
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g.data[i];
          v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g.data[i] * g.data[i];
          p.data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEpsilon);
        }
        break;
      }
    }
    if (!p.all_finite()) throw NumericError(name, "update produced a non-finite value");
  }
  state.step = t;
}

}  // namespace packtrain
