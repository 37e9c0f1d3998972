// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// Packing: fuse several models into one graph and train them in lockstep.
//
// The fused graph holds every member's nodes and parameters under a
// "<model_id>/" prefix; its outputs are the concatenation of the member
// outputs, and its loss is the sum of the member loss heads, so the gradient
// of one member's loss never reaches another member's parameters.
//
// Misaligned batch sizes are handled with pad/slice: every physical input
// tensor of a step has the driver batch's row count (zero padded), and each
// member slices its own rows back out before its first layer. A member's rows
// come from its own cursor in the dataset's canonical epoch order, so each
// member sees exactly the sample sequence it would see when trained alone.
// Members that share (dataset, epoch, cursor, batch size) form an input group;
// after dedup_inputs() a group reads one physical tensor.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "packtrain/checkpoint.hpp"
#include "packtrain/device_sim.hpp"
#include "packtrain/error.hpp"
#include "packtrain/graph.hpp"
#include "packtrain/optimizer.hpp"
#include "packtrain/train.hpp"

namespace packtrain {

// Rows of the padded driver batch a member keeps.
struct SliceSpec {
  std::size_t offset = 0;
  std::size_t length = 0;
  friend bool operator==(const SliceSpec&, const SliceSpec&) = default;
};

struct InputGroup {
  std::string dataset;
  std::uint64_t epoch = 0;
  std::uint64_t position = 0;
  std::size_t batch = 0;
  std::vector<std::size_t> members;  // indices into PackedModel::members
};

struct EpochPhase {
  std::string driver;
  std::size_t driver_batch = 0;
  std::uint64_t steps = 0;
};

struct PackedStepResult {
  std::map<std::string, double> losses;  // per participating member
  std::size_t driver_rows = 0;
  std::size_t physical_inputs = 0;  // feature tensors fed this step
  bool replan_needed = false;       // the driver changes for the next step
};

namespace detail {

inline std::string member_prefix(const std::string& model_id) { return model_id + "/"; }

struct FusedMember {
  const ModelHandle* handle = nullptr;
  std::size_t rows = 0;   // slice length
  int group = -1;         // shared input group, -1 when the member reads its own tensor
};

inline std::string physical_port(const FusedMember& m, const std::string& port) {
  return m.group >= 0 ? "shared" + std::to_string(m.group) + "/" + port : member_prefix(m.handle->model_id()) + port;
}

inline ComputationGraph build_fused_graph(const std::vector<FusedMember>& members, const std::string& name) {
  ComputationGraph fused(name);
  std::map<std::string, int> physical;  // port -> node
  for (const FusedMember& m : members) {
    const ComputationGraph& g = m.handle->graph;
    const std::string prefix = member_prefix(g.model_id);
    std::vector<int> remap(g.nodes.size(), -1);
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
      const Node& n = g.nodes[i];
      switch (n.op) {
        case OpKind::input: {
          const std::string port = physical_port(m, n.port);
          auto it = physical.find(port);
          if (it == physical.end()) {
            const InputPort* src = g.find_port(n.port);
            it = physical.emplace(port, fused.add_input(port, src->width, src->dataset)).first;
          }
          remap[i] = fused.add_slice(it->second, 0, m.rows, prefix + n.port + ".slice");
          break;
        }
        case OpKind::slice_rows:
          remap[i] = fused.add_slice(remap[static_cast<std::size_t>(n.source)], n.offset, n.length, prefix + n.name);
          break;
        case OpKind::affine: {
          Node copy = n;
          copy.name = prefix + n.name;
          copy.source = remap[static_cast<std::size_t>(n.source)];
          copy.weight = prefix + n.weight;
          copy.bias = prefix + n.bias;
          fused.parameters[copy.weight] = g.parameters.at(n.weight);
          fused.parameters[copy.bias] = g.parameters.at(n.bias);
          fused.nodes.push_back(std::move(copy));
          remap[i] = static_cast<int>(fused.nodes.size() - 1);
          break;
        }
        case OpKind::activation:
          remap[i] = fused.add_activation(remap[static_cast<std::size_t>(n.source)], n.activation, prefix + n.name);
          break;
      }
    }
    for (const OutputPort& o : g.output_ports)
      fused.add_output(prefix + o.name, remap[static_cast<std::size_t>(o.node)], o.labels >= 0 ? remap[static_cast<std::size_t>(o.labels)] : -1);
  }
  fused.validate();
  return fused;
}

}  // namespace detail

class PackedModel {
 public:
  std::vector<ModelHandle> members;
  ComputationGraph fused_graph;
  std::vector<InputGroup> input_groups;
  std::vector<SliceSpec> pad_slice_plan;  // per member
  std::size_t driver_batch = 0;           // max batch among unfinished members
  bool deduplicated = false;

  std::size_t index_of(const std::string& model_id) const {
    for (std::size_t i = 0; i < members.size(); ++i)
      if (members[i].model_id() == model_id) return i;
    throw Error("no member named '" + model_id + "' in the pack");
  }
  const ModelHandle& member(const std::string& model_id) const { return members[index_of(model_id)]; }
  ModelHandle& member(const std::string& model_id) { return members[index_of(model_id)]; }

  bool all_finished() const {
    return std::all_of(members.begin(), members.end(), [](const ModelHandle& h) { return h.finished(); });
  }

  // Group index per member; -1 for members that read their own tensor.
  std::vector<int> shared_group_of() const {
    std::vector<int> out(members.size(), -1);
    if (!deduplicated) return out;
    for (std::size_t g = 0; g < input_groups.size(); ++g)
      if (input_groups[g].members.size() > 1)
        for (std::size_t m : input_groups[g].members) out[m] = static_cast<int>(g);
    return out;
  }

  // Recomputes input groups, the pad/slice plan, the driver batch and the
  // fused graph from the members' current state.
  void refresh() {
    if (members.empty()) {
      input_groups.clear();
      pad_slice_plan.clear();
      driver_batch = 0;
      fused_graph = ComputationGraph("pack()");
      return;
    }
    std::map<std::tuple<std::string, std::uint64_t, std::uint64_t, std::size_t>, std::size_t> key_to_group;
    input_groups.clear();
    for (std::size_t i = 0; i < members.size(); ++i) {
      const ModelHandle& h = members[i];
      const auto key = std::make_tuple(h.dataset_binding, h.progress.epoch_index, h.progress.position, h.batch_size);
      auto it = key_to_group.find(key);
      if (it == key_to_group.end()) {
        it = key_to_group.emplace(key, input_groups.size()).first;
        input_groups.push_back({h.dataset_binding, h.progress.epoch_index, h.progress.position, h.batch_size, {}});
      }
      input_groups[it->second].members.push_back(i);
    }
    driver_batch = 0;
    pad_slice_plan.clear();
    for (const ModelHandle& h : members) {
      pad_slice_plan.push_back({0, h.batch_size});
      if (!h.finished()) driver_batch = std::max(driver_batch, h.batch_size);
    }
    const std::vector<int> groups = shared_group_of();
    std::vector<detail::FusedMember> fm;
    std::string name = "pack(";
    for (std::size_t i = 0; i < members.size(); ++i) {
      fm.push_back({&members[i], members[i].batch_size, groups[i]});
      name += (i ? "," : "") + members[i].model_id();
    }
    fused_graph = detail::build_fused_graph(fm, name + ")");
  }
};

// Fuses the handles into one packed model. Input groups are computed, but each
// member keeps its own input port until dedup_inputs() rewrites the graph.
inline PackedModel pack_models(std::vector<ModelHandle> handles) {
  if (handles.empty()) throw ConfigError("members", "pack needs at least one model");
  std::set<std::string> ids;
  for (const ModelHandle& h : handles) {
    h.graph.validate();
    h.validate();
    feature_label_ports(h.graph);
    if (!ids.insert(h.model_id()).second) throw ConfigError("model_id", "duplicate model_id '" + h.model_id() + "' in pack");
  }
  PackedModel p;
  p.members = std::move(handles);
  p.refresh();
  return p;
}

// Points every member of a shared input group at one physical input port.
// Changes no computed value.
inline PackedModel dedup_inputs(PackedModel packed) {
  packed.deduplicated = true;
  packed.refresh();
  return packed;
}

// Adds a model to a running pack (e.g. to take the place of a freed member).
inline void pack_in(PackedModel& packed, ModelHandle handle) {
  handle.graph.validate();
  handle.validate();
  feature_label_ports(handle.graph);
  for (const ModelHandle& h : packed.members)
    if (h.model_id() == handle.model_id()) throw ConfigError("model_id", "duplicate model_id '" + handle.model_id() + "' in pack");
  packed.members.push_back(std::move(handle));
  packed.refresh();
}

namespace detail {

inline std::vector<std::size_t> participants(const PackedModel& p) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < p.members.size(); ++i)
    if (!p.members[i].finished() && p.members[i].has_epoch_data()) out.push_back(i);
  return out;
}

inline std::size_t step_driver(const PackedModel& p) {
  std::size_t d = 0;
  for (std::size_t i : participants(p)) d = std::max(d, p.members[i].next_count());
  return d;
}

}  // namespace detail

// One synchronized step: every member that still has steps and epoch data
// takes exactly one optimizer update on its own next batch. Throws
// ReplanNeeded when no member can step although some are unfinished (their
// epochs are exhausted; call advance_epochs()).
inline PackedStepResult packed_step(PackedModel& packed, BatchProvider& provider) {
  const std::vector<std::size_t> active = detail::participants(packed);
  if (active.empty()) {
    if (packed.all_finished()) throw Error("every packed member already reached its target steps");
    throw ReplanNeeded("driver exhausted its epoch data; advance the epoch before the next step");
  }

  PackedStepResult result;
  std::vector<std::size_t> counts(packed.members.size(), 0);
  for (std::size_t i : active) {
    counts[i] = packed.members[i].next_count();
    result.driver_rows = std::max(result.driver_rows, counts[i]);
  }

  const std::vector<int> shared = packed.shared_group_of();
  std::vector<detail::FusedMember> fm;
  for (std::size_t i : active) fm.push_back({&packed.members[i], counts[i], shared[i]});
  const ComputationGraph graph = detail::build_fused_graph(fm, packed.fused_graph.model_id);

  // One fetch per physical feature stream; members of a shared group reuse it.
  TensorMap inputs;
  std::map<std::size_t, std::vector<std::uint32_t>> indices;
  std::map<int, const std::vector<std::uint32_t>*> group_indices;
  std::map<int, std::vector<std::uint32_t>> group_fetch;
  for (const detail::FusedMember& m : fm) {
    const ModelHandle& h = *m.handle;
    const std::size_t idx = static_cast<std::size_t>(&h - packed.members.data());
    const auto [xp, yp] = feature_label_ports(h.graph);
    const std::string xport = detail::physical_port(m, xp);
    if (m.group >= 0 && group_fetch.count(m.group)) {
      indices[idx] = group_fetch[m.group];
      continue;
    }
    Batch b = provider.fetch(h.dataset_binding, h.progress.epoch_index, h.progress.position, m.rows);
    ++result.physical_inputs;
    inputs[xport] = b.features.pad_rows(result.driver_rows);
    inputs[detail::physical_port(m, yp)] = b.labels.pad_rows(result.driver_rows);
    indices[idx] = b.indices;
    if (m.group >= 0) group_fetch[m.group] = std::move(b.indices);
  }

  const GradientResult r = value_and_grad(graph, inputs);

  for (std::size_t i : active) {
    ModelHandle& h = packed.members[i];
    const std::string prefix = detail::member_prefix(h.model_id());
    TensorMap grads;
    for (const auto& [name, _] : h.graph.parameters) grads[name] = r.gradients.at(prefix + name);
    apply_update(h.optimizer, h.graph.parameters, grads);
    mark_consumed(h.progress, indices.at(i));
    double loss = 0.0;
    for (const auto& o : h.graph.output_ports)
      if (o.labels >= 0) loss += r.losses.at(prefix + o.name);
    result.losses[h.model_id()] = loss;
  }

  const std::size_t next = detail::step_driver(packed);
  result.replan_needed = next != result.driver_rows;
  packed.refresh();
  return result;
}

// Starts the next epoch for every unfinished member whose epoch is exhausted.
inline std::size_t advance_epochs(PackedModel& packed) {
  std::size_t advanced = 0;
  for (ModelHandle& h : packed.members) {
    if (!h.finished() && !h.has_epoch_data()) {
      advance_epoch(h);
      ++advanced;
    }
  }
  packed.refresh();
  return advanced;
}

// Steps until every member reaches its target, with epochs synchronized:
// members whose epoch is exhausted wait for the rest before rolling over.
inline std::uint64_t run_to_completion(PackedModel& packed, BatchProvider& provider) {
  std::uint64_t steps = 0;
  while (!packed.all_finished()) {
    if (detail::participants(packed).empty()) {
      advance_epochs(packed);
      continue;
    }
    packed_step(packed, provider);
    ++steps;
  }
  return steps;
}

// Phases that finish the current epoch of every member: each phase runs at
// the largest batch among members that still have data (ties by model_id)
// until that driver exhausts its epoch or reaches its target.
inline std::vector<EpochPhase> make_epoch_plan(std::span<const ModelHandle> members) {
  if (members.empty()) throw ConfigError("members", "epoch plan needs at least one member");
  struct Sim {
    const ModelHandle* h;
    std::uint64_t position;
    std::uint64_t steps_done;
  };
  std::vector<Sim> sims;
  for (const ModelHandle& h : members) sims.push_back({&h, h.progress.position, h.progress.steps_done});
  auto active = [](const Sim& s) { return s.steps_done < s.h->target_steps && s.position < s.h->dataset_size; };
  auto steps_left = [](const Sim& s) {
    const std::uint64_t data_steps = (s.h->dataset_size - s.position + s.h->batch_size - 1) / s.h->batch_size;
    return std::min<std::uint64_t>(data_steps, s.h->target_steps - s.steps_done);
  };

  std::vector<EpochPhase> plan;
  while (true) {
    const Sim* driver = nullptr;
    for (const Sim& s : sims) {
      if (!active(s)) continue;
      if (!driver || s.h->batch_size > driver->h->batch_size ||
          (s.h->batch_size == driver->h->batch_size && s.h->model_id() < driver->h->model_id()))
        driver = &s;
    }
    if (!driver) break;
    const std::uint64_t steps = steps_left(*driver);
    plan.push_back({driver->h->model_id(), driver->h->batch_size, steps});
    for (Sim& s : sims) {
      if (!active(s)) continue;
      const std::uint64_t n = std::min(steps, steps_left(s));
      s.position = std::min<std::uint64_t>(s.h->dataset_size, s.position + n * s.h->batch_size);
      s.steps_done += n;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// load / free

inline std::uint64_t device_footprint(const ModelHandle& h, const DeviceProfile& d) {
  return estimate_memory(profile_from_graph(h.graph, h.optimizer.kind), h.batch_size, d);
}

// Places a model on the device; throws OomError without registering anything
// when it does not fit.
inline ModelHandle load_model(ModelHandle handle, Device& device) {
  handle.graph.validate();
  handle.validate();
  device.reserve(handle.model_id(), device_footprint(handle, device.profile()));
  return handle;
}

inline ModelHandle load_model(const Checkpoint& checkpoint, Device& device) {
  return load_model(handle_from_checkpoint(checkpoint), device);
}

// Removes a member, returning its checkpoint; releases its device memory when
// a device is given. The rest of the pack is replanned.
inline Checkpoint free_member(PackedModel& packed, const std::string& model_id, Device* device = nullptr) {
  const std::size_t i = packed.index_of(model_id);
  Checkpoint c = make_checkpoint(packed.members[i]);
  if (device && device->holds(model_id)) device->release(model_id);
  packed.members.erase(packed.members.begin() + static_cast<std::ptrdiff_t>(i));
  packed.refresh();
  return c;
}

inline std::pair<Checkpoint, PackedModel> free_model(PackedModel packed, const std::string& model_id, Device* device = nullptr) {
  Checkpoint c = free_member(packed, model_id, device);
  return {std::move(c), std::move(packed)};
}

}  // namespace packtrain
