// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "packtrain/packtrain.hpp"

namespace packtrain {

inline void PrintTo(OptimizerKind k, std::ostream* os) { *os << to_string(k); }

}  // namespace packtrain

namespace packtrain::testing {

inline double max_param_diff(const TensorMap& a, const TensorMap& b) {
  double m = 0.0;
  for (const auto& [name, t] : a) m = std::max(m, max_abs_diff(t, b.at(name)));
  return m;
}

inline ComputationGraph seeded_mlp(const std::string& id, const Dataset& ds, std::vector<std::size_t> hidden,
                                   Activation act, std::uint64_t seed) {
  ComputationGraph g = make_mlp(id, {ds.width(), std::move(hidden), ds.class_count, act}, ds.id);
  g.parameters = init_parameters(g, seed);
  return g;
}

inline ModelHandle seeded_handle(const std::string& id, const Dataset& ds, std::size_t batch, std::uint64_t steps,
                                 OptimizerKind kind = OptimizerKind::sgd, double lr = 0.05, std::uint64_t seed = 1,
                                 std::vector<std::size_t> hidden = {6}, Activation act = Activation::tanh) {
  return make_handle(seeded_mlp(id, ds, std::move(hidden), act, seed), OptimizerState(kind, lr), batch, steps, ds);
}

// One packed step, first rolling exhausted members into their next epoch.
inline PackedStepResult step_packed(PackedModel& p, BatchProvider& provider) {
  bool stalled = true;
  for (const auto& h : p.members) stalled = stalled && (h.finished() || !h.has_epoch_data());
  if (stalled) advance_epochs(p);
  return packed_step(p, provider);
}

inline std::string source_dir() { return PACKTRAIN_SOURCE_DIR; }

inline std::string profile_path(const std::string& name) { return source_dir() + "/profiles/" + name + ".profile"; }

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("packtrain-test-" + name);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace packtrain::testing
