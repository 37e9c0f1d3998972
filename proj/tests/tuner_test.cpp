// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace packtrain;
using namespace packtrain::testing;

namespace {

MemoryModel mlp_memory() {
  const ProfileBundle b = load_profile(profile_path("mlp3"));
  return {*b.device, *b.model};
}

// Losses fixed per config, independent of epochs and grouping.
class FixedLossExecutor final : public Executor {
 public:
  FixedLossExecutor(MemoryModel mem, std::uint64_t seed) : mem_(std::move(mem)), seed_(seed) {}
  const ConfigSpace& space() const override { return space_; }
  const MemoryModel& memory() const override { return mem_; }
  GroupOutcome run(std::span<const HyperparamConfig> group, std::uint64_t epochs) override {
    GroupOutcome o;
    for (const auto& c : group) o.losses.push_back(Rng(mix_seed(seed_, c.config_id)).uniform());
    o.ms = simulated_group_ms(mem_, group, epochs, 1000);
    return o;
  }

 private:
  ConfigSpace space_;
  MemoryModel mem_;
  std::uint64_t seed_;
};

std::set<std::size_t> ids_of(const std::vector<PackGroup>& groups) {
  std::set<std::size_t> ids;
  for (const auto& g : groups)
    for (const auto& c : g.members) EXPECT_TRUE(ids.insert(c.config_id).second) << "config in two groups";
  return ids;
}

}  // namespace

TEST(Space, EncodesAndDecodesIds) {
  const ConfigSpace space;
  EXPECT_EQ(space.size(), 1056u);
  for (std::size_t id = 0; id < space.size(); id += 7) {
    const HyperparamConfig c = space.config(id);
    EXPECT_EQ(space.id_of(c.batch_index, c.optimizer_index, c.lr_index, c.activation_index), id);
  }
  EXPECT_THROW(space.config(1056), ConfigError);
  EXPECT_EQ(describe(space.config(0, 1, 4, 3)), "[20, sgd, 0.01, relu]");
}

TEST(Space, SamplingIsDistinctAndSeeded) {
  const ConfigSpace space;
  const auto a = sample_configs(space, 81, 3), b = sample_configs(space, 81, 3), c = sample_configs(space, 81, 4);
  std::set<std::size_t> ids;
  for (const auto& x : a) ids.insert(x.config_id);
  EXPECT_EQ(ids.size(), 81u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].config_id, b[i].config_id);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs = differs || a[i].config_id != c[i].config_id;
  EXPECT_TRUE(differs);
  EXPECT_EQ(sample_configs(space, 1056, 1).size(), 1056u);
  EXPECT_THROW(sample_configs(space, 1057, 1), ConfigError);
}

TEST(Distance, WorkedPair) {
  const ConfigSpace space;
  const HyperparamConfig a = space.config(0, 1, 4, 3);  // [20, SGD, 0.01, ReLU]
  const HyperparamConfig b = space.config(4, 2, 4, 3);  // [40, Adagrad, 0.01, ReLU]
  ASSERT_EQ(b.batch_size, 40u);
  ASSERT_EQ(b.optimizer, OptimizerKind::adagrad);
  EXPECT_EQ(config_distance(a, b), 5.0);
  EXPECT_DOUBLE_EQ(config_distance(a, b, DistanceMetric::euclid), std::sqrt(17.0));
  EXPECT_THROW(config_distance(a, b, DistanceMetric::traintime), ConfigError);
  const MemoryModel mem = mlp_memory();
  EXPECT_GT(config_distance(a, b, DistanceMetric::traintime, &mem), 0.0);
}

TEST(Distance, MetricAxioms) {
  const ConfigSpace space;
  Rng rng(12);
  for (int t = 0; t < 10000; ++t) {
    const auto a = space.config(rng.below(space.size()));
    const auto b = space.config(rng.below(space.size()));
    const auto c = space.config(rng.below(space.size()));
    for (DistanceMetric m : {DistanceMetric::indexsum, DistanceMetric::euclid}) {
      EXPECT_EQ(config_distance(a, a, m), 0.0);
      EXPECT_EQ(config_distance(a, b, m), config_distance(b, a, m));
      EXPECT_GE(config_distance(a, b, m), 0.0);
      EXPECT_EQ(config_distance(a, b, m) == 0.0, a.config_id == b.config_id);
      EXPECT_LE(config_distance(a, c, m), config_distance(a, b, m) + config_distance(b, c, m) + 1e-12);
    }
  }
}

TEST(Schedule, HyperbandBrackets) {
  EXPECT_EQ(max_bracket(81, 3), 4u);
  const auto plan = hyperband_schedule(81, 3);
  const std::vector<std::pair<std::size_t, double>> expect{{81, 1}, {34, 3}, {15, 9}, {8, 27}, {5, 81}};
  ASSERT_EQ(plan.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(plan[k].s, 4 - k);
    EXPECT_EQ(plan[k].n, expect[k].first);
    EXPECT_DOUBLE_EQ(plan[k].r, expect[k].second);
  }
  std::vector<std::size_t> chain;
  for (std::size_t i = 0; i <= 4; ++i) chain.push_back(rung_size(plan[0], 3, i));
  EXPECT_EQ(chain, (std::vector<std::size_t>{81, 27, 9, 3, 1}));
  for (std::size_t i = 0; i <= 4; ++i) EXPECT_EQ(rung_epochs(plan[0], 3, i), static_cast<std::uint64_t>(power(3, i)));
  EXPECT_EQ(rung_epochs(plan[4], 3, 0), 81u);
  EXPECT_THROW(hyperband_schedule(81, 1), ConfigError);
}

TEST(Schedule, BudgetAccounting) {
  const MemoryModel mem = mlp_memory();
  SimExecutor exec(mem, 1000, 5);
  const TuneResult r = hyperband(81, 3, exec, 5);
  std::uint64_t expect = 0;
  for (const auto& b : hyperband_schedule(81, 3))
    for (std::size_t i = 0; i <= b.s; ++i) expect += rung_size(b, 3, i) * rung_epochs(b, 3, i);
  EXPECT_EQ(r.total_epochs, expect);
  std::size_t bracket4_rung0 = 0;
  for (const auto& a : r.audit) bracket4_rung0 += a.bracket == 4 && a.rung == 0;
  EXPECT_EQ(bracket4_rung0, 81u);
}

TEST(Grouping, KnnExamples) {
  const ConfigSpace space;
  const MemoryModel mem = mlp_memory();
  const auto configs = sample_configs(space, 30, 2);
  const auto singles = pack_opt_knn(configs, mem, 0.0, 1);
  EXPECT_EQ(singles.size(), 30u);

  std::vector<HyperparamConfig> lr_only;
  for (std::size_t l = 0; l < 4; ++l) lr_only.push_back(space.config(2, 0, l, 3));
  const auto one = pack_opt_knn(lr_only, mem, 6.0, 9);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].members.size(), 4u);
}

TEST(Grouping, EveryStrategyPartitionsAndFits) {
  const ConfigSpace space;
  MemoryModel mem = mlp_memory();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto configs = sample_configs(space, 40, seed);
    for (Strategy st : {Strategy::original, Strategy::batchsize, Strategy::random, Strategy::knn}) {
      PackOptions opt;
      opt.strategy = st;
      const auto groups = pack_opt(opt, configs, mem, seed);
      EXPECT_EQ(ids_of(groups).size(), configs.size());
      for (const auto& g : groups) {
        EXPECT_TRUE(mem.fits(g.members));
        EXPECT_EQ(g.predicted_memory, mem.demand(g.members));
        if (st == Strategy::original) {
          EXPECT_EQ(g.members.size(), 1u);
        }
        if (st == Strategy::random) {
          EXPECT_LE(g.members.size(), opt.random_m);
        }
        if (st == Strategy::batchsize) {
          for (const auto& c : g.members) EXPECT_EQ(c.batch_size, g.members[0].batch_size);
        }
        if (st == Strategy::knn) {
          const auto centroid = space.config(g.centroid);
          for (const auto& c : g.members) EXPECT_LE(config_distance(centroid, c), opt.threshold);
        }
      }
    }
  }
}

TEST(Grouping, MemoryLimitSplitsGroups) {
  const ConfigSpace space;
  MemoryModel mem = mlp_memory();
  mem.device.memory_capacity = 2 * mem.demand(space.config(10, 0, 0, 0)) + 1;
  std::vector<HyperparamConfig> same_batch;
  for (std::size_t l = 0; l < 6; ++l) same_batch.push_back(space.config(10, 0, l, 0));
  const auto groups = pack_opt_batchsize(same_batch, mem);
  EXPECT_EQ(groups.size(), 3u);
  mem.device.memory_capacity = mem.demand(space.config(10, 0, 0, 0)) - 1;
  EXPECT_THROW(pack_opt_knn(same_batch, mem, 6, 1), OomError);
}

TEST(Tuning, DeterministicAndSelectionInvariant) {
  const MemoryModel mem = mlp_memory();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::vector<std::size_t> best;
    for (Strategy st : {Strategy::original, Strategy::batchsize, Strategy::random, Strategy::knn}) {
      FixedLossExecutor exec(mem, seed);
      PackOptions opt;
      opt.strategy = st;
      best.push_back(packed_hyperband(27, 3, opt, exec, seed).best.config_id);
    }
    for (std::size_t b : best) EXPECT_EQ(b, best[0]) << "seed " << seed;
  }
  SimExecutor e1(mem, 1000, 4), e2(mem, 1000, 4);
  PackOptions opt;
  const TuneResult a = packed_hyperband(27, 3, opt, e1, 4), b = packed_hyperband(27, 3, opt, e2, 4);
  EXPECT_EQ(a.total_ms, b.total_ms);
  EXPECT_EQ(a.best.config_id, b.best.config_id);
  ASSERT_EQ(a.audit.size(), b.audit.size());
  for (std::size_t i = 0; i < a.audit.size(); ++i) EXPECT_EQ(a.audit[i].loss, b.audit[i].loss);
}

TEST(Tuning, OomGroupFallsBackToSingletons) {
  const ConfigSpace space;
  MemoryModel mem = mlp_memory();
  class TightExecutor final : public Executor {
   public:
    explicit TightExecutor(MemoryModel m) : inner_(std::move(m), 1000, 1) {}
    const ConfigSpace& space() const override { return inner_.space(); }
    const MemoryModel& memory() const override { return inner_.memory(); }
    GroupOutcome run(std::span<const HyperparamConfig> g, std::uint64_t e) override {
      if (g.size() > 2) throw OomError(3, 2, "runtime footprint above estimate");
      return inner_.run(g, e);
    }

   private:
    SimExecutor inner_;
  } exec(mem);
  PackOptions opt;
  opt.strategy = Strategy::random;
  const TuneResult r = packed_hyperband(9, 3, opt, exec, 3);
  EXPECT_GT(r.oom_fallbacks, 0u);
  std::size_t fallback_rows = 0;
  for (const auto& a : r.audit) fallback_rows += a.fallback;
  EXPECT_GT(fallback_rows, 0u);

  MemoryModel tiny = mem;
  tiny.device.memory_capacity = 1;
  SimExecutor none(tiny, 1000, 1);
  EXPECT_THROW(hyperband(9, 3, none, 1), OomError);
}

TEST(Tuning, EngineExecutorPackedMatchesSequential) {
  ConfigSpace space;
  space.batch_sizes = {20, 25, 30};
  space.learning_rates = {1e-3, 1e-2, 1e-1};
  DeviceProfile device = *load_profile(profile_path("mlp3")).device;
  EngineSetup setup;
  setup.samples = 200;
  EngineExecutor packed(setup, device, space, true), seq(setup, device, space, false);
  const std::vector<HyperparamConfig> group{space.config(0, 0, 1, 3), space.config(0, 1, 2, 2), space.config(2, 3, 0, 1)};
  const GroupOutcome a = packed.run(group, 2), b = seq.run(group, 2);
  for (std::size_t k = 0; k < group.size(); ++k) EXPECT_LE(std::abs(a.losses[k] - b.losses[k]), 1e-9);
  EXPECT_EQ(a.ms, b.ms);
}
