// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// Hyperband and its pack-aware variant. Sampling and halving are shared; the
// strategies differ only in how each rung's survivors are grouped for
// execution, so for fixed per-config losses every strategy selects the same
// survivors and the same final config.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "packtrain/data.hpp"
#include "packtrain/device_sim.hpp"
#include "packtrain/error.hpp"
#include "packtrain/graph.hpp"
#include "packtrain/optimizer.hpp"
#include "packtrain/pack.hpp"
#include "packtrain/random.hpp"
#include "packtrain/train.hpp"

namespace packtrain {

// ---------------------------------------------------------------------------
// search space

struct HyperparamConfig {
  std::size_t config_id = 0;
  std::size_t batch_index = 0;
  std::size_t optimizer_index = 0;
  std::size_t lr_index = 0;
  std::size_t activation_index = 0;
  std::size_t batch_size = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double learning_rate = 0.0;
  Activation activation = Activation::relu;

  friend bool operator==(const HyperparamConfig& a, const HyperparamConfig& b) { return a.config_id == b.config_id; }
};

struct ConfigSpace {
  std::vector<std::size_t> batch_sizes{20, 25, 30, 35, 40, 45, 50, 55, 60, 65, 70};
  std::vector<OptimizerKind> optimizers{OptimizerKind::adam, OptimizerKind::sgd, OptimizerKind::adagrad, OptimizerKind::momentum};
  std::vector<double> learning_rates{1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
  std::vector<Activation> activations{Activation::sigmoid, Activation::leaky_relu, Activation::tanh, Activation::relu};

  std::size_t size() const noexcept {
    return batch_sizes.size() * optimizers.size() * learning_rates.size() * activations.size();
  }

  void validate() const {
    if (batch_sizes.empty()) throw ConfigError("space.batch_sizes", "must not be empty");
    if (optimizers.empty()) throw ConfigError("space.optimizers", "must not be empty");
    if (learning_rates.empty()) throw ConfigError("space.learning_rates", "must not be empty");
    if (activations.empty()) throw ConfigError("space.activations", "must not be empty");
    for (std::size_t b : batch_sizes)
      if (b == 0) throw ConfigError("space.batch_sizes", "must be >= 1");
    for (double lr : learning_rates)
      if (!(lr > 0.0)) throw ConfigError("space.learning_rates", "must be > 0");
  }

  std::size_t id_of(std::size_t b, std::size_t o, std::size_t l, std::size_t a) const noexcept {
    return ((b * optimizers.size() + o) * learning_rates.size() + l) * activations.size() + a;
  }

  HyperparamConfig config(std::size_t id) const {
    if (id >= size()) throw ConfigError("config_id", std::to_string(id) + " outside a space of " + std::to_string(size()));
    HyperparamConfig c;
    c.config_id = id;
    c.activation_index = id % activations.size();
    id /= activations.size();
    c.lr_index = id % learning_rates.size();
    id /= learning_rates.size();
    c.optimizer_index = id % optimizers.size();
    c.batch_index = id / optimizers.size();
    c.batch_size = batch_sizes[c.batch_index];
    c.optimizer = optimizers[c.optimizer_index];
    c.learning_rate = learning_rates[c.lr_index];
    c.activation = activations[c.activation_index];
    return c;
  }

  HyperparamConfig config(std::size_t b, std::size_t o, std::size_t l, std::size_t a) const {
    if (b >= batch_sizes.size() || o >= optimizers.size() || l >= learning_rates.size() || a >= activations.size())
      throw ConfigError("config", "index outside the space");
    return config(id_of(b, o, l, a));
  }
};

inline std::string describe(const HyperparamConfig& c) {
  char lr[32];
  std::snprintf(lr, sizeof lr, "%g", c.learning_rate);
  return "[" + std::to_string(c.batch_size) + ", " + to_string(c.optimizer) + ", " + lr + ", " + to_string(c.activation) + "]";
}

// n distinct configs drawn without replacement (partial Fisher-Yates).
inline std::vector<HyperparamConfig> sample_configs(const ConfigSpace& space, std::size_t n, std::uint64_t seed) {
  space.validate();
  if (n > space.size())
    throw ConfigError("n", "cannot sample " + std::to_string(n) + " configs from a space of " + std::to_string(space.size()));
  std::vector<std::size_t> ids(space.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Rng rng(seed);
  std::vector<HyperparamConfig> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(ids.size() - i));
    std::swap(ids[i], ids[j]);
    out.push_back(space.config(ids[i]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// memory and distance

// Per-config device demand: a base model profile specialized by the
// config's optimizer and batch size.
struct MemoryModel {
  DeviceProfile device;
  ModelProfile base;

  SimMember member(const HyperparamConfig& c) const {
    return SimMember{with_optimizer(base, c.optimizer), c.batch_size, static_cast<int>(c.batch_index), true};
  }
  std::uint64_t demand(const HyperparamConfig& c) const { return estimate_memory(with_optimizer(base, c.optimizer), c.batch_size, device); }
  std::uint64_t demand(std::span<const HyperparamConfig> group) const {
    std::uint64_t total = 0;
    for (const auto& c : group) total += demand(c);
    return total;
  }
  bool fits(std::span<const HyperparamConfig> group) const {
    std::vector<std::uint64_t> demands;
    for (const auto& c : group) demands.push_back(demand(c));
    return check_fit(demands, device.memory_capacity).ok;
  }
  std::vector<SimMember> members(std::span<const HyperparamConfig> group) const {
    std::vector<SimMember> out;
    for (const auto& c : group) out.push_back(member(c));
    return out;
  }
};

enum class DistanceMetric { indexsum, euclid, traintime };

inline const char* to_string(DistanceMetric m) {
  switch (m) {
    case DistanceMetric::indexsum: return "indexsum";
    case DistanceMetric::euclid: return "euclid";
    case DistanceMetric::traintime: return "traintime";
  }
  return "?";
}

inline DistanceMetric parse_metric(std::string_view s) {
  if (s == "indexsum") return DistanceMetric::indexsum;
  if (s == "euclid") return DistanceMetric::euclid;
  if (s == "traintime") return DistanceMetric::traintime;
  throw ConfigError("metric", "unknown metric '" + std::string(s) + "'");
}

namespace detail {

inline double index_gap(std::size_t a, std::size_t b) { return a > b ? static_cast<double>(a - b) : static_cast<double>(b - a); }

inline std::array<double, 4> per_dimension(const HyperparamConfig& a, const HyperparamConfig& b) {
  return {index_gap(a.batch_index, b.batch_index), a.optimizer_index == b.optimizer_index ? 0.0 : 1.0,
          index_gap(a.lr_index, b.lr_index), a.activation_index == b.activation_index ? 0.0 : 1.0};
}

}  // namespace detail

// Batch size and learning rate are ordinal (index gap); optimizer and
// activation are categorical (0/1). The traintime metric is one minus the
// simulated improvement of packing the pair, and needs a memory model.
inline double config_distance(const HyperparamConfig& a, const HyperparamConfig& b, DistanceMetric metric = DistanceMetric::indexsum,
                              const MemoryModel* model = nullptr) {
  if (a.config_id == b.config_id) return 0.0;
  const auto d = detail::per_dimension(a, b);
  switch (metric) {
    case DistanceMetric::indexsum: return d[0] + d[1] + d[2] + d[3];
    case DistanceMetric::euclid: return std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + d[3] * d[3]);
    case DistanceMetric::traintime: {
      if (!model) throw ConfigError("metric", "traintime distance needs a device and model profile");
      const HyperparamConfig pair[] = {a, b};
      const auto members = model->members(pair);
      return 1.0 - estimate_step_time(model->device, members).impv;
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// grouping

enum class Strategy { original, batchsize, random, knn };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::original: return "original";
    case Strategy::batchsize: return "batchsize";
    case Strategy::random: return "random";
    case Strategy::knn: return "knn";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "original") return Strategy::original;
  if (s == "batchsize") return Strategy::batchsize;
  if (s == "random") return Strategy::random;
  if (s == "knn") return Strategy::knn;
  throw ConfigError("strategy", "unknown strategy '" + std::string(s) + "'");
}

struct PackGroup {
  std::vector<HyperparamConfig> members;
  std::uint64_t predicted_memory = 0;
  std::size_t centroid = 0;  // config_id
};

struct PackOptions {
  Strategy strategy = Strategy::knn;
  DistanceMetric metric = DistanceMetric::indexsum;
  double threshold = 6.0;
  std::size_t random_m = 5;
};

namespace detail {

inline void require_each_fits(std::span<const HyperparamConfig> configs, const MemoryModel& mem) {
  for (const auto& c : configs) {
    const std::uint64_t d = mem.demand(c);
    if (d > mem.device.memory_capacity)
      throw OomError(d, mem.device.memory_capacity,
                     "config " + std::to_string(c.config_id) + " " + describe(c) + " alone needs " + std::to_string(d) +
                         " B, capacity " + std::to_string(mem.device.memory_capacity) + " B");
  }
}

inline PackGroup make_group(std::vector<HyperparamConfig> members, const MemoryModel& mem) {
  PackGroup g;
  g.centroid = members.front().config_id;
  g.predicted_memory = mem.demand(members);
  g.members = std::move(members);
  return g;
}

// Fills groups in the given order, closing a group when it reaches `limit`
// members or the next config would not fit.
inline std::vector<PackGroup> greedy_fill(const std::vector<HyperparamConfig>& order, const MemoryModel& mem, std::size_t limit) {
  std::vector<PackGroup> out;
  std::vector<HyperparamConfig> cur;
  for (const auto& c : order) {
    cur.push_back(c);
    if (cur.size() > limit || !mem.fits(cur)) {
      cur.pop_back();
      out.push_back(make_group(std::move(cur), mem));
      cur = {c};
    }
  }
  if (!cur.empty()) out.push_back(make_group(std::move(cur), mem));
  return out;
}

}  // namespace detail

inline std::vector<PackGroup> pack_opt_singletons(std::span<const HyperparamConfig> configs, const MemoryModel& mem) {
  detail::require_each_fits(configs, mem);
  std::vector<PackGroup> out;
  for (const auto& c : configs) out.push_back(detail::make_group({c}, mem));
  return out;
}

// Pick a random unassigned centroid, then add its nearest unassigned configs
// (ties by config_id) while they are within the threshold and the group fits.
inline std::vector<PackGroup> pack_opt_knn(std::span<const HyperparamConfig> configs, const MemoryModel& mem, double threshold,
                                           std::uint64_t seed, DistanceMetric metric = DistanceMetric::indexsum) {
  detail::require_each_fits(configs, mem);
  std::vector<HyperparamConfig> pool(configs.begin(), configs.end());
  std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.config_id < b.config_id; });
  Rng rng(seed);
  std::vector<PackGroup> out;
  while (!pool.empty()) {
    const std::size_t ci = static_cast<std::size_t>(rng.below(pool.size()));
    const HyperparamConfig centroid = pool[ci];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(ci));
    std::vector<std::pair<double, HyperparamConfig>> near;
    for (const auto& c : pool) {
      const double d = config_distance(centroid, c, metric, &mem);
      if (d <= threshold) near.emplace_back(d, c);
    }
    std::stable_sort(near.begin(), near.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<HyperparamConfig> group{centroid};
    for (const auto& [_, c] : near) {
      group.push_back(c);
      if (!mem.fits(group)) {
        group.pop_back();
        break;
      }
    }
    for (std::size_t k = 1; k < group.size(); ++k)
      std::erase_if(pool, [&](const HyperparamConfig& c) { return c.config_id == group[k].config_id; });
    out.push_back(detail::make_group(std::move(group), mem));
  }
  return out;
}

// Random groups of at most m configs, each closed early if memory runs out.
inline std::vector<PackGroup> pack_opt_random(std::span<const HyperparamConfig> configs, std::size_t m, const MemoryModel& mem,
                                              std::uint64_t seed) {
  if (m == 0) throw ConfigError("random_m", "must be >= 1");
  detail::require_each_fits(configs, mem);
  std::vector<HyperparamConfig> order(configs.begin(), configs.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.config_id < b.config_id; });
  Rng rng(seed);
  rng.shuffle(order);
  return detail::greedy_fill(order, mem, m);
}

// Configs with equal batch size, packed until memory is full.
inline std::vector<PackGroup> pack_opt_batchsize(std::span<const HyperparamConfig> configs, const MemoryModel& mem) {
  detail::require_each_fits(configs, mem);
  std::map<std::size_t, std::vector<HyperparamConfig>> by_batch;
  for (const auto& c : configs) by_batch[c.batch_size].push_back(c);
  std::vector<PackGroup> out;
  for (auto& [_, list] : by_batch) {
    std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.config_id < b.config_id; });
    for (auto& g : detail::greedy_fill(list, mem, std::numeric_limits<std::size_t>::max())) out.push_back(std::move(g));
  }
  return out;
}

inline std::vector<PackGroup> pack_opt(const PackOptions& opt, std::span<const HyperparamConfig> configs, const MemoryModel& mem,
                                       std::uint64_t seed) {
  switch (opt.strategy) {
    case Strategy::original: return pack_opt_singletons(configs, mem);
    case Strategy::batchsize: return pack_opt_batchsize(configs, mem);
    case Strategy::random: return pack_opt_random(configs, opt.random_m, mem, seed);
    case Strategy::knn: return pack_opt_knn(configs, mem, opt.threshold, seed, opt.metric);
  }
  return {};
}

// ---------------------------------------------------------------------------
// executors

struct GroupOutcome {
  std::vector<double> losses;  // per member, in group order
  double ms = 0.0;             // simulated time of the group
};

// Trains a group of configs from scratch for a number of epochs and reports
// one validation loss per member. Throws OomError when the group does not fit.
class Executor {
 public:
  virtual ~Executor() = default;
  virtual const ConfigSpace& space() const = 0;
  virtual const MemoryModel& memory() const = 0;
  virtual GroupOutcome run(std::span<const HyperparamConfig> group, std::uint64_t epochs) = 0;
};

// Deterministic stand-in for a validation curve. The floor is smooth in the
// hyperparameters (an optimum near the upper-middle learning rate, adaptive
// optimizers and rectifiers ahead) plus per-config noise, so survivors of
// later rungs resemble each other the way real tuning runs do.
inline double stub_loss(const HyperparamConfig& c, std::uint64_t epochs, std::uint64_t seed, const ConfigSpace& space = {}) {
  const std::uint64_t h = mix_seed(seed, c.config_id);
  const double u1 = static_cast<double>(splitmix64(h) >> 11) * 0x1.0p-53;
  const double u2 = static_cast<double>(splitmix64(h ^ 0x5bd1e995ULL) >> 11) * 0x1.0p-53;
  const double lr_span = std::max<double>(1.0, static_cast<double>(space.learning_rates.size() - 1));
  const double lr_term = std::abs(static_cast<double>(c.lr_index) - 0.6 * lr_span) / lr_span;
  const double batch_term = static_cast<double>(c.batch_index) / std::max<double>(1.0, static_cast<double>(space.batch_sizes.size() - 1));
  double opt_term = 0.0, act_term = 0.0;
  switch (c.optimizer) {
    case OptimizerKind::adam: opt_term = 0.0; break;
    case OptimizerKind::momentum: opt_term = 0.1; break;
    case OptimizerKind::adagrad: opt_term = 0.2; break;
    case OptimizerKind::sgd: opt_term = 0.3; break;
  }
  switch (c.activation) {
    case Activation::relu: act_term = 0.0; break;
    case Activation::leaky_relu: act_term = 0.02; break;
    case Activation::tanh: act_term = 0.08; break;
    case Activation::sigmoid: act_term = 0.15; break;
  }
  const double floor = 0.05 + 0.5 * lr_term + opt_term + act_term + 0.1 * batch_term + 0.1 * u1;
  return floor + (0.5 + 0.5 * u2) / std::sqrt(static_cast<double>(epochs));
}

inline double simulated_group_ms(const MemoryModel& mem, std::span<const HyperparamConfig> group, std::uint64_t epochs,
                                 std::size_t dataset_size) {
  const auto members = mem.members(group);
  const double epoch = packed_epoch_time(mem.device, members, dataset_size);
  return static_cast<double>(epochs) * epoch + mem.device.switch_overhead;
}

// Losses from stub_loss, time from the cost model: every group pays one model
// switch plus its packed epoch time per epoch.
class SimExecutor final : public Executor {
 public:
  SimExecutor(MemoryModel mem, std::size_t dataset_size, std::uint64_t loss_seed, ConfigSpace space = {})
      : mem_(std::move(mem)), dataset_size_(dataset_size), loss_seed_(loss_seed), space_(std::move(space)) {
    mem_.device.validate();
    mem_.base.validate();
    space_.validate();
    if (dataset_size_ == 0) throw ConfigError("dataset_size", "must be >= 1");
  }

  const ConfigSpace& space() const override { return space_; }
  const MemoryModel& memory() const override { return mem_; }

  GroupOutcome run(std::span<const HyperparamConfig> group, std::uint64_t epochs) override {
    std::vector<std::uint64_t> demands;
    for (const auto& c : group) demands.push_back(mem_.demand(c));
    require_fit(demands, mem_.device.memory_capacity, "group of " + std::to_string(group.size()));
    GroupOutcome out;
    for (const auto& c : group) out.losses.push_back(stub_loss(c, epochs, loss_seed_, space_));
    out.ms = simulated_group_ms(mem_, group, epochs, dataset_size_);
    return out;
  }

 private:
  MemoryModel mem_;
  std::size_t dataset_size_;
  std::uint64_t loss_seed_;
  ConfigSpace space_;
};

struct EngineSetup {
  std::size_t samples = 400;
  std::size_t features = 4;
  std::uint32_t classes = 3;
  std::vector<std::size_t> hidden{8};
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;
};

// Trains real MLPs on a synthetic dataset. Groups of two or more run packed
// (with shared inputs deduplicated) unless `packed` is false, in which case
// every member trains alone. Time is simulated from the graph's footprint.
class EngineExecutor final : public Executor {
 public:
  EngineExecutor(EngineSetup setup, DeviceProfile device, ConfigSpace space, bool packed = true)
      : setup_(std::move(setup)), space_(std::move(space)), packed_(packed) {
    space_.validate();
    device.validate();
    const Dataset full = synth_dataset(setup_.samples, setup_.features, setup_.classes, setup_.seed);
    split_ = split_dataset(full, setup_.validation_fraction, setup_.seed);
    for (std::size_t b : space_.batch_sizes)
      if (b > split_.train.size()) throw ConfigError("space.batch_sizes", "batch " + std::to_string(b) + " exceeds the training split");
    mem_.device = std::move(device);
    mem_.base = profile_from_graph(graph_for(space_.config(0)), OptimizerKind::sgd);
  }

  const ConfigSpace& space() const override { return space_; }
  const MemoryModel& memory() const override { return mem_; }
  const Split& split() const noexcept { return split_; }

  ComputationGraph graph_for(const HyperparamConfig& c) const {
    MlpSpec spec{setup_.features, setup_.hidden, setup_.classes, c.activation};
    ComputationGraph g = make_mlp("cfg-" + std::to_string(c.config_id), spec, split_.train.id);
    g.parameters = init_parameters(g, mix_seed(setup_.seed, c.config_id));
    return g;
  }

  ModelHandle handle_for(const HyperparamConfig& c, std::uint64_t epochs) const {
    const std::uint64_t steps = epochs * steps_per_epoch(split_.train.size(), c.batch_size);
    return make_handle(graph_for(c), OptimizerState(c.optimizer, c.learning_rate), c.batch_size, steps, split_.train);
  }

  GroupOutcome run(std::span<const HyperparamConfig> group, std::uint64_t epochs) override {
    std::vector<std::uint64_t> demands;
    for (const auto& c : group) demands.push_back(mem_.demand(c));
    require_fit(demands, mem_.device.memory_capacity, "group of " + std::to_string(group.size()));
    BatchProvider provider;
    provider.add(split_.train);
    GroupOutcome out;
    std::vector<ModelHandle> handles;
    for (const auto& c : group) handles.push_back(handle_for(c, epochs));
    if (packed_ && handles.size() > 1) {
      PackedModel p = dedup_inputs(pack_models(std::move(handles)));
      run_to_completion(p, provider);
      for (const auto& h : p.members) out.losses.push_back(evaluate_loss(h.graph, split_.validation));
    } else {
      for (auto& h : handles) {
        train_to_target(h, provider);
        out.losses.push_back(evaluate_loss(h.graph, split_.validation));
      }
    }
    out.ms = simulated_group_ms(mem_, group, epochs, split_.train.size());
    return out;
  }

 private:
  EngineSetup setup_;
  ConfigSpace space_;
  bool packed_;
  Split split_;
  MemoryModel mem_;
};

// ---------------------------------------------------------------------------
// Hyperband

struct BracketPlan {
  std::size_t s = 0;
  std::size_t n = 0;  // configs sampled
  double r = 0.0;     // epochs at the first rung
};

inline std::size_t max_bracket(std::uint64_t R, std::uint64_t eta) {
  std::size_t s = 0;
  for (std::uint64_t p = eta; p <= R; p *= eta) ++s;
  return s;
}

inline double power(double base, std::size_t e) {
  double v = 1.0;
  for (std::size_t i = 0; i < e; ++i) v *= base;
  return v;
}

// Brackets s = s_max..0 with n = ceil((s_max+1) eta^s / (s+1)), r = R eta^-s.
inline std::vector<BracketPlan> hyperband_schedule(std::uint64_t R, std::uint64_t eta) {
  if (R < 1) throw ConfigError("R", "must be >= 1");
  if (eta < 2) throw ConfigError("eta", "must be >= 2");
  const std::size_t s_max = max_bracket(R, eta);
  std::vector<BracketPlan> out;
  for (std::size_t s = s_max + 1; s-- > 0;) {
    const std::uint64_t num = (s_max + 1) * static_cast<std::uint64_t>(power(static_cast<double>(eta), s));
    const std::size_t n = static_cast<std::size_t>((num + s) / (s + 1));
    out.push_back({s, n, static_cast<double>(R) / power(static_cast<double>(eta), s)});
  }
  return out;
}

// Configs trained at rung i of a bracket: floor(n / eta^i).
inline std::size_t rung_size(const BracketPlan& b, std::uint64_t eta, std::size_t i) {
  std::size_t n = b.n;
  for (std::size_t k = 0; k < i; ++k) n /= eta;
  return n;
}

// Whole epochs at rung i (at least one).
inline std::uint64_t rung_epochs(const BracketPlan& b, std::uint64_t eta, std::size_t i) {
  const double r = b.r * power(static_cast<double>(eta), i);
  return std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::floor(r + 1e-9)));
}

struct AuditRecord {
  std::size_t bracket = 0;
  std::size_t rung = 0;
  std::size_t group = 0;
  std::size_t config_id = 0;
  std::uint64_t epochs = 0;
  double loss = 0.0;
  double ms = 0.0;  // simulated time of the whole group
  bool fallback = false;  // ran as a singleton after its group hit OOM
};

struct TuneResult {
  Strategy strategy = Strategy::original;
  HyperparamConfig best;
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<AuditRecord> audit;
  double total_ms = 0.0;
  std::uint64_t total_epochs = 0;
  std::size_t groups = 0;
  std::size_t oom_fallbacks = 0;
};

// Runs every bracket of pack-aware Hyperband. Survivors of each rung are the
// floor(n_i / eta) lowest losses, ties by config_id.
inline TuneResult packed_hyperband(std::uint64_t R, std::uint64_t eta, const PackOptions& opt, Executor& exec, std::uint64_t seed) {
  TuneResult result;
  result.strategy = opt.strategy;
  const ConfigSpace& space = exec.space();
  const MemoryModel& mem = exec.memory();

  for (const BracketPlan& b : hyperband_schedule(R, eta)) {
    if (b.n > space.size())
      throw ConfigError("R", "bracket " + std::to_string(b.s) + " samples " + std::to_string(b.n) + " configs, space has " +
                                 std::to_string(space.size()));
    std::vector<HyperparamConfig> alive = sample_configs(space, b.n, mix_seed(seed, b.s));
    for (std::size_t i = 0; i <= b.s && !alive.empty(); ++i) {
      const std::uint64_t epochs = rung_epochs(b, eta, i);
      const std::vector<PackGroup> groups = pack_opt(opt, alive, mem, mix_seed(mix_seed(seed, b.s), i + 1));
      std::map<std::size_t, double> loss;
      std::size_t group_index = 0;
      for (const PackGroup& g : groups) {
        auto record = [&](const HyperparamConfig& c, double l, double ms, bool fallback) {
          result.audit.push_back({b.s, i, group_index, c.config_id, epochs, l, ms, fallback});
          loss[c.config_id] = l;
          result.total_epochs += epochs;
        };
        try {
          const GroupOutcome o = exec.run(g.members, epochs);
          for (std::size_t k = 0; k < g.members.size(); ++k) record(g.members[k], o.losses[k], o.ms, false);
          result.total_ms += o.ms;
          ++group_index;
        } catch (const OomError&) {
          if (g.members.size() == 1) throw;
          ++result.oom_fallbacks;
          for (const auto& c : g.members) {
            const HyperparamConfig one[] = {c};
            const GroupOutcome o = exec.run(one, epochs);
            record(c, o.losses[0], o.ms, true);
            result.total_ms += o.ms;
            ++group_index;
          }
        }
      }
      result.groups += group_index;

      std::sort(alive.begin(), alive.end(), [&](const HyperparamConfig& x, const HyperparamConfig& y) {
        const double lx = loss.at(x.config_id), ly = loss.at(y.config_id);
        return lx != ly ? lx < ly : x.config_id < y.config_id;
      });
      const HyperparamConfig& top = alive.front();
      const double top_loss = loss.at(top.config_id);
      if (top_loss < result.best_loss || (top_loss == result.best_loss && top.config_id < result.best.config_id)) {
        result.best_loss = top_loss;
        result.best = top;
      }
      alive.resize(alive.size() / eta);
    }
  }
  return result;
}

// Plain Hyperband: every config trains alone.
inline TuneResult hyperband(std::uint64_t R, std::uint64_t eta, Executor& exec, std::uint64_t seed) {
  PackOptions opt;
  opt.strategy = Strategy::original;
  return packed_hyperband(R, eta, opt, exec, seed);
}

}  // namespace packtrain
