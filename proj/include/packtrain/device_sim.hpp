// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-device memory accounting and an additive step-time cost model.
//
// Sequential step of one model with batch b:
//   t_fix + b * (t_tx + t_pre) + b * compute
// Packed step:
//   t_fix + sum over input groups of B * (t_tx + t_pre) + c * sum_m b_m * compute_m
// where B is the driver (largest) batch of the pack: every physical input
// tensor is padded to it. A single member packed alone costs exactly its
// sequential step.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "packtrain/data.hpp"
#include "packtrain/error.hpp"
#include "packtrain/optimizer.hpp"

namespace packtrain {

using Micros = std::int64_t;

struct DeviceProfile {
  std::string name = "device";
  std::uint64_t memory_capacity = 16ULL << 30;  // bytes
  std::uint64_t context_bytes = 0;              // per resident model
  double fixed_step_overhead = 0.0;             // ms per step
  double transfer_cost = 0.0;                   // ms per sample
  double preprocess_cost = 0.0;                 // ms per sample
  double contention_factor = 1.0;
  double switch_overhead = 0.0;                 // ms per model swap

  void validate() const {
    if (memory_capacity == 0) throw ConfigError("memory_capacity", "must be > 0");
    if (!(fixed_step_overhead >= 0) || !(transfer_cost >= 0) || !(preprocess_cost >= 0) || !(switch_overhead >= 0))
      throw ConfigError("device", "cost coefficients must be non-negative");
    if (!(contention_factor >= 1.0)) throw ConfigError("contention_factor", "must be >= 1");
  }
};

struct ModelProfile {
  std::string name = "model";
  std::uint64_t parameter_bytes = 0;
  std::uint64_t activation_bytes_per_sample = 0;
  double compute_ms_per_sample = 0.0;
  double optimizer_state_multiplier = 1.0;

  void validate() const {
    if (!(compute_ms_per_sample >= 0) || !(optimizer_state_multiplier >= 0))
      throw ConfigError("model", "profile coefficients must be non-negative");
  }
};

// Parameter copies held per optimizer: the weights plus auxiliary state.
inline double optimizer_multiplier(OptimizerKind k) { return 1.0 + static_cast<double>(aux_slots(k)); }

inline ModelProfile with_optimizer(ModelProfile p, OptimizerKind k) {
  p.optimizer_state_multiplier = optimizer_multiplier(k);
  return p;
}

inline std::uint64_t estimate_memory(const ModelProfile& model, std::size_t batch_size, std::uint64_t context_bytes) {
  if (batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
  const auto state = static_cast<std::uint64_t>(std::llround(static_cast<double>(model.parameter_bytes) * model.optimizer_state_multiplier));
  return state + model.activation_bytes_per_sample * batch_size + context_bytes;
}

inline std::uint64_t estimate_memory(const ModelProfile& model, std::size_t batch_size, const DeviceProfile& device) {
  return estimate_memory(model, batch_size, device.context_bytes);
}

// Footprint of an engine graph: f64 parameters, values plus gradients for
// every node per sample.
inline ModelProfile profile_from_graph(const ComputationGraph& g, OptimizerKind kind) {
  ModelProfile p;
  p.name = g.model_id;
  p.parameter_bytes = 8 * g.parameter_count();
  std::uint64_t per_sample = 0;
  double flops = 0.0;
  for (const Node& n : g.nodes) {
    per_sample += 2 * 8 * std::max<std::size_t>(n.width, 1);
    if (n.op == OpKind::affine) flops += 6.0 * static_cast<double>(g.parameters.at(n.weight).size());
  }
  p.activation_bytes_per_sample = per_sample;
  p.compute_ms_per_sample = flops * 1e-6;
  p.optimizer_state_multiplier = optimizer_multiplier(kind);
  return p;
}

struct FitResult {
  bool ok = true;
  std::uint64_t total = 0;
  std::uint64_t deficit = 0;
};

inline FitResult check_fit(std::span<const std::uint64_t> demands, std::uint64_t capacity) {
  FitResult r;
  for (std::uint64_t d : demands) r.total += d;
  r.ok = r.total <= capacity;
  r.deficit = r.ok ? 0 : r.total - capacity;
  return r;
}

inline void require_fit(std::span<const std::uint64_t> demands, std::uint64_t capacity, const std::string& what) {
  const FitResult r = check_fit(demands, capacity);
  if (!r.ok)
    throw OomError(r.total, capacity, "out of memory: " + what + " needs " + std::to_string(r.total) + " B, capacity " +
                                          std::to_string(capacity) + " B, deficit " + std::to_string(r.deficit) + " B");
}

// One member of a simulated pack. Members sharing `input_group` read one
// physical input stream (same dataset, same cursor, same batch size).
struct SimMember {
  ModelProfile model;
  std::size_t batch = 1;
  int input_group = 0;
  bool preprocess = true;
};

inline std::uint64_t pack_memory(std::span<const SimMember> members, const DeviceProfile& device) {
  std::uint64_t total = 0;
  for (const auto& m : members) total += estimate_memory(m.model, m.batch, device);
  return total;
}

inline FitResult check_fit(std::span<const SimMember> members, const DeviceProfile& device) {
  std::vector<std::uint64_t> demands;
  for (const auto& m : members) demands.push_back(estimate_memory(m.model, m.batch, device));
  return check_fit(demands, device.memory_capacity);
}

inline double improvement(double t_seq, double t_pack) { return (t_seq - t_pack) / t_seq; }

struct StepTimeReport {
  double t_seq = 0.0;   // ms
  double t_pack = 0.0;  // ms
  double impv = 0.0;
};

inline double single_step_time(const DeviceProfile& d, const SimMember& m) {
  const double b = static_cast<double>(m.batch);
  return d.fixed_step_overhead + b * (d.transfer_cost + (m.preprocess ? d.preprocess_cost : 0.0)) + b * m.model.compute_ms_per_sample;
}

inline StepTimeReport estimate_step_time(const DeviceProfile& d, std::span<const SimMember> members) {
  if (members.empty()) throw ConfigError("members", "a step needs at least one member");
  StepTimeReport r;
  for (const auto& m : members) r.t_seq += single_step_time(d, m);
  if (members.size() == 1) {
    r.t_pack = r.t_seq;
  } else {
    std::size_t driver = 0;
    for (const auto& m : members) driver = std::max(driver, m.batch);
    std::map<int, bool> groups;  // group -> any member preprocesses
    double compute = 0.0;
    for (const auto& m : members) {
      groups[m.input_group] = groups[m.input_group] || m.preprocess;
      compute += static_cast<double>(m.batch) * m.model.compute_ms_per_sample;
    }
    double io = 0.0;
    for (const auto& [_, pre] : groups) io += static_cast<double>(driver) * (d.transfer_cost + (pre ? d.preprocess_cost : 0.0));
    r.t_pack = d.fixed_step_overhead + io + d.contention_factor * compute;
  }
  r.impv = improvement(r.t_seq, r.t_pack);
  return r;
}

inline std::size_t steps_per_epoch(std::size_t dataset_size, std::size_t batch) { return (dataset_size + batch - 1) / batch; }

// One synchronized epoch of a pack: every member consumes the whole dataset
// once. Phases run at the largest batch among members that still have data;
// members sharing an input group must share a batch size.
inline double packed_epoch_time(const DeviceProfile& d, std::span<const SimMember> members, std::size_t dataset_size) {
  std::vector<std::size_t> steps;
  for (const auto& m : members) steps.push_back(steps_per_epoch(dataset_size, m.batch));
  std::vector<std::size_t> bounds = steps;
  std::sort(bounds.begin(), bounds.end());
  bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());
  double total = 0.0;
  std::size_t done = 0;
  for (std::size_t bound : bounds) {
    std::vector<SimMember> active;
    for (std::size_t i = 0; i < members.size(); ++i)
      if (steps[i] > done) active.push_back(members[i]);
    total += static_cast<double>(bound - done) * estimate_step_time(d, active).t_pack;
    done = bound;
  }
  return total;
}

inline double sequential_epoch_time(const DeviceProfile& d, const SimMember& m, std::size_t dataset_size) {
  return static_cast<double>(steps_per_epoch(dataset_size, m.batch)) * single_step_time(d, m);
}

inline Micros to_micros(double ms) { return static_cast<Micros>(std::llround(ms * 1000.0)); }

struct SwitchReport {
  Micros te_seq = 0;         // n models back to back, including swaps
  Micros te_models_sum = 0;  // sum of individually measured epoch times
  Micros swoh = 0;
};

// SwOH(n) = T_e(Seq) - sum_m T_e(model m); the simulated sequential run pays
// one swap between consecutive models.
inline SwitchReport switching_overhead(std::size_t n, std::span<const Micros> epoch_times, const DeviceProfile& d) {
  if (n == 0) throw ConfigError("n_models", "must be >= 1");
  if (epoch_times.size() != n) throw ConfigError("epoch_times", "need one epoch time per model");
  SwitchReport r;
  for (Micros t : epoch_times) r.te_models_sum += t;
  r.te_seq = r.te_models_sum + static_cast<Micros>(n - 1) * to_micros(d.switch_overhead);
  r.swoh = r.te_seq - r.te_models_sum;
  return r;
}

// ---------------------------------------------------------------------------
// Profile files: `key = value` lines, `#` comments. Device and model keys may
// share one file.

struct ProfileBundle {
  std::optional<DeviceProfile> device;
  std::optional<ModelProfile> model;
  bool calibrated = false;
};

inline ProfileBundle parse_profile(const std::string& text) {
  ProfileBundle b;
  DeviceProfile d;
  ModelProfile m;
  bool any_device = false, any_model = false;
  std::istringstream in(text);
  std::string line;
  std::uint64_t line_no = 0;
  std::set<std::string> seen;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto z = s.find_last_not_of(" \t\r");
    return s.substr(a, z - a + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("expected key = value", line_no, "line");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw FormatError("duplicate key '" + key + "'", line_no, "line");
    auto num = [&]() {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        throw FormatError("key '" + key + "' needs a number", line_no, "line");
      }
      if (used != value.size() || !std::isfinite(v) || v < 0) throw FormatError("key '" + key + "' needs a non-negative number", line_no, "line");
      return v;
    };
    auto bytes = [&]() { return static_cast<std::uint64_t>(std::llround(num())); };
    if (key == "device_name") { d.name = value; any_device = true; }
    else if (key == "memory_capacity") { d.memory_capacity = bytes(); any_device = true; }
    else if (key == "context_bytes") { d.context_bytes = bytes(); any_device = true; }
    else if (key == "fixed_step_overhead") { d.fixed_step_overhead = num(); any_device = true; }
    else if (key == "transfer_cost") { d.transfer_cost = num(); any_device = true; }
    else if (key == "preprocess_cost") { d.preprocess_cost = num(); any_device = true; }
    else if (key == "contention_factor") { d.contention_factor = num(); any_device = true; }
    else if (key == "switch_overhead") { d.switch_overhead = num(); any_device = true; }
    else if (key == "name") { m.name = value; any_model = true; }
    else if (key == "parameter_bytes") { m.parameter_bytes = bytes(); any_model = true; }
    else if (key == "activation_bytes_per_sample") { m.activation_bytes_per_sample = bytes(); any_model = true; }
    else if (key == "compute_ms_per_sample") { m.compute_ms_per_sample = num(); any_model = true; }
    else if (key == "optimizer_state_multiplier") { m.optimizer_state_multiplier = num(); any_model = true; }
    else if (key == "calibrated") {
      if (value != "true" && value != "false") throw FormatError("calibrated must be true or false", line_no, "line");
      b.calibrated = value == "true";
    } else {
      throw FormatError("unknown key '" + key + "'", line_no, "line");
    }
  }
  if (any_device) {
    d.validate();
    b.device = d;
  }
  if (any_model) {
    m.validate();
    b.model = m;
  }
  return b;
}

inline ProfileBundle load_profile(const std::string& path) {
  const auto bytes = detail::read_file(path);
  try {
    return parse_profile(std::string(bytes.begin(), bytes.end()));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.detail(), e.position(), "line");
  }
}

inline std::string format_profile(const DeviceProfile& d, const ModelProfile& m, bool calibrated) {
  std::ostringstream os;
  os.precision(17);
  os << "calibrated = " << (calibrated ? "true" : "false") << "\n"
     << "device_name = " << d.name << "\n"
     << "memory_capacity = " << d.memory_capacity << "\n"
     << "context_bytes = " << d.context_bytes << "\n"
     << "fixed_step_overhead = " << d.fixed_step_overhead << "\n"
     << "transfer_cost = " << d.transfer_cost << "\n"
     << "preprocess_cost = " << d.preprocess_cost << "\n"
     << "contention_factor = " << d.contention_factor << "\n"
     << "switch_overhead = " << d.switch_overhead << "\n"
     << "name = " << m.name << "\n"
     << "parameter_bytes = " << m.parameter_bytes << "\n"
     << "activation_bytes_per_sample = " << m.activation_bytes_per_sample << "\n"
     << "compute_ms_per_sample = " << m.compute_ms_per_sample << "\n"
     << "optimizer_state_multiplier = " << m.optimizer_state_multiplier << "\n";
  return os.str();
}

// Memory ledger for one device. Registration is all-or-nothing.
class Device {
 public:
  Device() = default;
  explicit Device(DeviceProfile profile) : profile_(std::move(profile)) { profile_.validate(); }

  const DeviceProfile& profile() const noexcept { return profile_; }
  std::uint64_t used() const noexcept { return used_; }
  std::uint64_t available() const noexcept { return profile_.memory_capacity - used_; }
  bool holds(const std::string& id) const { return resident_.count(id) != 0; }
  std::size_t resident_count() const noexcept { return resident_.size(); }

  void reserve(const std::string& id, std::uint64_t bytes) {
    if (holds(id)) throw Error("model '" + id + "' is already resident on " + profile_.name);
    const std::uint64_t demands[] = {used_, bytes};
    require_fit(demands, profile_.memory_capacity, "loading '" + id + "' on " + profile_.name);
    resident_[id] = bytes;
    used_ += bytes;
  }

  std::uint64_t release(const std::string& id) {
    const auto it = resident_.find(id);
    if (it == resident_.end()) throw Error("model '" + id + "' is not resident on " + profile_.name);
    const std::uint64_t bytes = it->second;
    used_ -= bytes;
    resident_.erase(it);
    return bytes;
  }

 private:
  DeviceProfile profile_;
  std::map<std::string, std::uint64_t> resident_;
  std::uint64_t used_ = 0;
};

}  // namespace packtrain
