// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// Standalone training of one model: handles, per-model progress cursors and
// the batch provider shared by standalone and packed execution.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "packtrain/data.hpp"
#include "packtrain/error.hpp"
#include "packtrain/graph.hpp"
#include "packtrain/optimizer.hpp"

namespace packtrain {

// Where a model stands inside its own epoch order.
struct ProgressCursor {
  std::uint64_t steps_done = 0;
  std::uint64_t epoch_index = 0;
  std::uint64_t position = 0;                          // samples consumed this epoch
  std::vector<std::uint32_t> samples_used_this_epoch;  // use count per sample index

  std::uint64_t remaining(std::size_t dataset_size) const { return position >= dataset_size ? 0 : dataset_size - position; }

  // Every sample used exactly once.
  bool epoch_covered() const {
    for (std::uint32_t c : samples_used_this_epoch)
      if (c != 1) return false;
    return !samples_used_this_epoch.empty();
  }

  friend bool operator==(const ProgressCursor&, const ProgressCursor&) = default;
};

struct ModelHandle {
  ComputationGraph graph;  // owns the parameters
  OptimizerState optimizer;
  std::size_t batch_size = 1;
  std::uint64_t target_steps = 1;
  std::string dataset_binding;
  std::size_t dataset_size = 0;
  ProgressCursor progress;

  const std::string& model_id() const noexcept { return graph.model_id; }
  bool finished() const noexcept { return progress.steps_done >= target_steps; }
  bool has_epoch_data() const noexcept { return progress.position < dataset_size; }
  // Samples the next step will read.
  std::size_t next_count() const noexcept {
    return static_cast<std::size_t>(std::min<std::uint64_t>(batch_size, progress.remaining(dataset_size)));
  }

  void validate() const {
    if (graph.model_id.empty()) throw ConfigError("model_id", "must not be empty");
    if (batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
    if (batch_size > dataset_size)
      throw ConfigError("batch_size", std::to_string(batch_size) + " exceeds dataset size " + std::to_string(dataset_size));
    if (target_steps == 0) throw ConfigError("target_steps", "must be >= 1");
    if (progress.steps_done > target_steps) throw ConfigError("progress", "steps_done exceeds target_steps");
    if (progress.samples_used_this_epoch.size() != dataset_size) throw ConfigError("progress", "cursor does not match dataset size");
  }
};

inline ModelHandle make_handle(ComputationGraph graph, OptimizerState optimizer, std::size_t batch_size, std::uint64_t target_steps,
                               const Dataset& dataset) {
  ModelHandle h;
  h.graph = std::move(graph);
  h.optimizer = std::move(optimizer);
  h.batch_size = batch_size;
  h.target_steps = target_steps;
  h.dataset_binding = dataset.id;
  h.dataset_size = dataset.size();
  h.progress.samples_used_this_epoch.assign(dataset.size(), 0);
  h.graph.validate();
  h.validate();
  return h;
}

// Moves a cursor whose epoch is fully consumed to the start of the next one.
inline void advance_epoch(ModelHandle& h) {
  if (h.has_epoch_data()) throw Error("model '" + h.model_id() + "' still has data in epoch " + std::to_string(h.progress.epoch_index));
  if (!h.progress.epoch_covered()) throw Error("model '" + h.model_id() + "' did not use every sample exactly once");
  ++h.progress.epoch_index;
  h.progress.position = 0;
  std::fill(h.progress.samples_used_this_epoch.begin(), h.progress.samples_used_this_epoch.end(), 0u);
}

// Serves batches in each dataset's canonical epoch order, applying the
// dataset's preprocessing through the shared memo.
class BatchProvider {
 public:
  explicit BatchProvider(PreprocessCache* cache = nullptr) : cache_(cache) {}

  void add(Dataset dataset, PreprocessSpec spec = {}) {
    const std::string id = dataset.id;
    entries_[id] = Entry{std::move(dataset), std::move(spec), {}};
  }

  const Dataset& dataset(const std::string& id) const { return entry(id).dataset; }

  Batch fetch(const std::string& dataset_id, std::uint64_t epoch, std::size_t position, std::size_t count) {
    Entry& e = entry(dataset_id);
    auto it = e.permutations.find(epoch);
    if (it == e.permutations.end()) {
      if (e.permutations.size() > 4) e.permutations.clear();
      it = e.permutations.emplace(epoch, epoch_permutation(dataset_id, e.dataset.size(), epoch)).first;
    }
    Batch b = batch_at(e.dataset, it->second, position, count);
    b.features = preprocess(e.spec, dataset_id, b.features, b.indices, cache_);
    ++fetches_;
    return b;
  }

  std::uint64_t fetches() const noexcept { return fetches_; }
  PreprocessCache* cache() const noexcept { return cache_; }

 private:
  struct Entry {
    Dataset dataset;
    PreprocessSpec spec;
    std::map<std::uint64_t, EpochPermutation> permutations;
  };

  Entry& entry(const std::string& id) {
    const auto it = entries_.find(id);
    if (it == entries_.end()) throw Error("no dataset bound with id '" + id + "'");
    return it->second;
  }
  const Entry& entry(const std::string& id) const {
    const auto it = entries_.find(id);
    if (it == entries_.end()) throw Error("no dataset bound with id '" + id + "'");
    return it->second;
  }

  PreprocessCache* cache_;
  std::map<std::string, Entry> entries_;
  std::uint64_t fetches_ = 0;
};

// Input ports of an MLP-style graph: the first rank-2 port carries features,
// the first rank-1 port carries labels.
inline std::pair<std::string, std::string> feature_label_ports(const ComputationGraph& g) {
  std::string x, y;
  for (const auto& p : g.input_ports) {
    if (p.width > 0 && x.empty()) x = p.name;
    if (p.width == 0 && y.empty()) y = p.name;
  }
  if (x.empty() || y.empty()) throw GraphError("graph '" + g.model_id + "' needs a feature port and a label port");
  return {x, y};
}

inline void mark_consumed(ProgressCursor& c, std::span<const std::uint32_t> indices) {
  for (std::uint32_t i : indices) ++c.samples_used_this_epoch[i];
  c.position += indices.size();
  ++c.steps_done;
}

// One optimizer step on the model's next batch; rolls into the next epoch
// when the current one is exhausted. Returns the batch loss.
inline double train_step(ModelHandle& h, BatchProvider& provider) {
  if (h.finished()) throw Error("model '" + h.model_id() + "' already reached its target steps");
  if (!h.has_epoch_data()) advance_epoch(h);
  const std::size_t count = h.next_count();
  const Batch batch = provider.fetch(h.dataset_binding, h.progress.epoch_index, h.progress.position, count);
  const auto [xp, yp] = feature_label_ports(h.graph);
  const TensorMap inputs{{xp, batch.features}, {yp, batch.labels}};
  GradientResult r = value_and_grad(h.graph, inputs);
  apply_update(h.optimizer, h.graph.parameters, r.gradients);
  mark_consumed(h.progress, batch.indices);
  double loss = 0.0;
  for (const auto& [_, l] : r.losses) loss += l;
  return loss;
}

inline std::vector<double> train_standalone(ModelHandle& h, BatchProvider& provider, std::uint64_t steps) {
  std::vector<double> losses;
  for (std::uint64_t s = 0; s < steps && !h.finished(); ++s) losses.push_back(train_step(h, provider));
  return losses;
}

inline std::vector<double> train_to_target(ModelHandle& h, BatchProvider& provider) {
  return train_standalone(h, provider, h.target_steps - h.progress.steps_done);
}

// Mean cross-entropy of the graph's loss heads over a whole dataset.
inline double evaluate_loss(const ComputationGraph& g, const Dataset& ds, const PreprocessSpec& spec = {}) {
  const auto [xp, yp] = feature_label_ports(g);
  std::vector<std::uint32_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::uint32_t>(i);
  std::vector<double> labels(ds.labels.begin(), ds.labels.end());
  const TensorMap inputs{{xp, preprocess(spec, ds.id, ds.features, idx)}, {yp, Tensor({ds.size()}, std::move(labels))}};
  const ForwardResult r = forward(g, inputs);
  double loss = 0.0;
  for (const auto& [_, l] : r.losses) loss += l;
  return loss;
}

inline double accuracy(const ComputationGraph& g, const Dataset& ds) {
  const auto [xp, yp] = feature_label_ports(g);
  std::vector<double> labels(ds.labels.begin(), ds.labels.end());
  const ForwardResult r = forward(g, {{xp, ds.features}, {yp, Tensor({ds.size()}, std::move(labels))}});
  const Tensor& logits = r.outputs.begin()->second;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double* z = &logits.data[i * logits.cols()];
    const auto arg = static_cast<std::size_t>(std::max_element(z, z + logits.cols()) - z);
    correct += arg == ds.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace packtrain
