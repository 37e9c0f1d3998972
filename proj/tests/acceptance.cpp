// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any
// line fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <tuple>

#include "packtrain/experiment.hpp"
#include "support.hpp"

using namespace packtrain;
using namespace packtrain::testing;

namespace {

struct Verdict {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1: gradients against central differences on random graphs

ComputationGraph random_graph(Rng& rng, std::size_t rows) {
  ComputationGraph g("rand");
  const std::size_t in = 1 + rng.below(4);
  int x = g.add_input("x", in);
  int y = g.add_input("y", 0);
  if (rng.below(2)) {
    const std::size_t keep = 1 + rng.below(rows);
    x = g.add_slice(x, 0, keep);
    y = g.add_slice(y, 0, keep);
  }
  const std::size_t classes = 2 + rng.below(3);
  const std::size_t depth = rng.below(3);
  const Activation acts[] = {Activation::sigmoid, Activation::leaky_relu, Activation::tanh, Activation::relu};
  int h = x;
  for (std::size_t l = 0; l < depth; ++l) {
    h = g.add_affine(h, 1 + rng.below(5), "l" + std::to_string(l), l);
    h = g.add_activation(h, acts[rng.below(4)]);
  }
  g.add_output("head0", g.add_affine(h, classes, "out0", depth), y);
  if (rng.below(2)) g.add_output("head1", g.add_affine(h, classes, "out1", depth + 1), y);
  g.parameters = init_parameters(g, rng.next_u64());
  for (auto& [_, t] : g.parameters)
    for (double& v : t.data) v += 0.1 * rng.normal();  // non-zero biases too
  g.validate();
  return g;
}

double total_loss(const ComputationGraph& g, const TensorMap& in) {
  double s = 0.0;
  for (const auto& [_, l] : forward(g, in).losses) s += l;
  return s;
}

Verdict gradient_oracle() {
  Verdict v;
  Rng rng(2024);
  double worst = 0.0;
  const int graphs = 120;
  for (int k = 0; k < graphs; ++k) {
    const std::size_t rows = 2 + rng.below(5);
    ComputationGraph g = random_graph(rng, rows);
    const std::size_t classes = g.parameters.at("out0.bias").size();
    const std::size_t width = g.input_ports[0].width;
    Tensor x = Tensor::zeros({rows, width});
    for (double& e : x.data) e = rng.normal();
    Tensor y = Tensor::zeros({rows});
    for (double& e : y.data) e = static_cast<double>(rng.below(classes));
    const TensorMap in{{"x", x}, {"y", y}};
    const TensorMap grads = backward(g, in);
    for (const auto& [name, t] : g.parameters) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double h = 1e-5;
        ComputationGraph p = g, m = g;
        p.parameters.at(name).data[i] += h;
        m.parameters.at(name).data[i] -= h;
        const double fd = (total_loss(p, in) - total_loss(m, in)) / (2 * h);
        const double a = grads.at(name).data[i];
        const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6});
        worst = std::max(worst, rel);
      }
    }
  }
  v.require(worst <= 1e-4, "max relative error " + fmt("%.3e", worst));
  if (v.ok) v.detail = std::to_string(graphs) + " graphs, max relative error " + fmt("%.3e", worst);
  return v;
}

// ---------------------------------------------------------------------------
// 2: packed training reproduces standalone training

double packed_vs_standalone(std::vector<ModelHandle> hs, const Dataset& ds) {
  BatchProvider pp;
  pp.add(ds);
  PackedModel packed = dedup_inputs(pack_models(hs));
  run_to_completion(packed, pp);
  double worst = 0.0;
  for (ModelHandle& h : hs) {
    BatchProvider sp;
    sp.add(ds);
    train_to_target(h, sp);
    worst = std::max(worst, max_param_diff(h.graph.parameters, packed.member(h.model_id()).graph.parameters));
  }
  return worst;
}

Verdict losslessness() {
  Verdict v;
  const Dataset ds = synth_dataset(1000, 6, 3, 5);
  std::string parts;
  for (OptimizerKind k : {OptimizerKind::adam, OptimizerKind::sgd, OptimizerKind::adagrad, OptimizerKind::momentum}) {
    const double diff = packed_vs_standalone(
        {seeded_handle("first", ds, 32, 50, k, 0.01, 11, {10}, Activation::relu), seeded_handle("second", ds, 32, 50, k, 0.01, 12, {10}, Activation::relu)},
        ds);
    v.require(diff <= 1e-9, std::string(to_string(k)) + " diff " + fmt("%.3e", diff));
    parts += std::string(parts.empty() ? "" : ", ") + to_string(k) + " " + fmt("%.1e", diff);
  }
  if (v.ok) v.detail = "max |dw| " + parts;
  return v;
}

// ---------------------------------------------------------------------------
// 3: misaligned batch sizes

Verdict misaligned() {
  Verdict v;
  const Dataset ds = synth_dataset(10000, 3, 2, 8);
  std::vector<ModelHandle> hs;
  const std::size_t batches[] = {20, 50, 100};
  for (std::size_t b : batches) {
    const std::size_t steps = steps_per_epoch(ds.size(), b);
    hs.push_back(seeded_handle("b" + std::to_string(b), ds, b, steps, OptimizerKind::sgd, 0.05, b, {4}));
  }
  v.require(hs[0].target_steps == 500 && hs[1].target_steps == 200 && hs[2].target_steps == 100, "standalone step counts");

  BatchProvider provider;
  provider.add(ds);
  PackedModel p = dedup_inputs(pack_models(hs));
  for (int s = 0; s < 100; ++s) packed_step(p, provider);
  const auto consumed = p.member("b50").progress.position;
  v.require(consumed == 5000, "member-50 consumed " + std::to_string(consumed));
  run_to_completion(p, provider);
  for (const auto& h : p.members) v.require(h.progress.epoch_covered(), h.model_id() + " did not cover its epoch exactly once");
  double worst = 0.0;
  for (ModelHandle h : hs) {
    BatchProvider sp;
    sp.add(ds);
    train_to_target(h, sp);
    worst = std::max(worst, max_param_diff(h.graph.parameters, p.member(h.model_id()).graph.parameters));
  }
  v.require(worst <= 1e-9, "weight diff " + fmt("%.3e", worst));
  if (v.ok) v.detail = "steps 500/200/100, member-50 at 5000 after 100 driver steps, max |dw| " + fmt("%.1e", worst);
  return v;
}

// ---------------------------------------------------------------------------
// 4: checkpoint semantics

Verdict checkpoints() {
  Verdict v;
  const Dataset ds = synth_dataset(600, 4, 3, 2);
  const ModelHandle a = seeded_handle("a", ds, 24, 90, OptimizerKind::adam, 0.01, 1, {6});
  const ModelHandle b = seeded_handle("b", ds, 40, 60, OptimizerKind::adagrad, 0.05, 2, {6});

  BatchProvider ref_p;
  ref_p.add(ds);
  PackedModel ref = pack_models({a, b});
  run_to_completion(ref, ref_p);

  DeviceProfile profile;
  profile.memory_capacity = 1ULL << 32;
  Device dev(profile);
  BatchProvider p;
  p.add(ds);
  PackedModel run = pack_models({load_model(a, dev), load_model(b, dev)});
  for (int s = 0; s < 31; ++s) step_packed(run, p);
  const auto path = (scratch_dir("acceptance") / "a.pkck").string();
  save_checkpoint(free_member(run, "a", &dev), path);
  for (int s = 0; s < 3; ++s) step_packed(run, p);  // the other member keeps going
  ModelHandle resumed = load_model(load_checkpoint(path), dev);
  BatchProvider solo;
  solo.add(ds);
  train_to_target(resumed, solo);
  run_to_completion(run, p);
  double worst = max_param_diff(ref.member("a").graph.parameters, resumed.graph.parameters);
  worst = std::max(worst, max_param_diff(ref.member("b").graph.parameters, run.member("b").graph.parameters));
  v.require(worst <= 1e-12, "resume diff " + fmt("%.3e", worst));

  // Three members; the one with 100 steps finishes first, is checkpointed and
  // a new model joins the remaining two.
  const Dataset big = synth_dataset(4000, 3, 2, 3);
  BatchProvider fp;
  fp.add(big);
  Device dev2(profile);
  PackedModel pack = dedup_inputs(pack_models({load_model(seeded_handle("m100", big, 40, 100, OptimizerKind::sgd, 0.05, 1), dev2),
                                              load_model(seeded_handle("m200", big, 20, 200, OptimizerKind::sgd, 0.05, 2), dev2),
                                              load_model(seeded_handle("m250", big, 16, 250, OptimizerKind::sgd, 0.05, 3), dev2)}));
  while (!pack.member("m100").finished()) step_packed(pack, fp);
  const Checkpoint done = free_member(pack, "m100", &dev2);
  v.require(done.progress.steps_done == 100, "freed member did not finish 100 steps");
  pack_in(pack, load_model(seeded_handle("new", big, 32, 120, OptimizerKind::sgd, 0.05, 4), dev2));
  run_to_completion(pack, fp);
  for (const auto& h : pack.members)
    v.require(h.progress.steps_done == h.target_steps, h.model_id() + " stopped at " + std::to_string(h.progress.steps_done));
  if (v.ok) v.detail = "resume max |dw| " + fmt("%.1e", worst) + ", replacement replay completed";
  return v;
}

// ---------------------------------------------------------------------------
// 5: IMPV and SwOH recomputed from report fields

Verdict metrics_algebra() {
  Verdict v;
  const ExperimentSpec s = load_experiment(source_dir() + "/experiments/profile_all.json");
  const Report r = run_profile(s);
  const auto rows = parse_csv(to_csv(r));
  const std::size_t seq = r.column("t_seq_ms"), pack = r.column("t_pack_ms"), impv = r.column("impv"), te = r.column("te_seq_us"),
                    tm = r.column("te_models_us"), sw = r.column("swoh_us"), oom = r.column("oom");
  std::size_t checked = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    v.require(std::stoll(row[sw]) == std::stoll(row[te]) - std::stoll(row[tm]), "swoh mismatch in " + row[0]);
    if (row[oom] == "1") continue;
    const double t_seq = std::stod(row[seq]), t_pack = std::stod(row[pack]);
    v.require(std::stod(row[impv]) == (t_seq - t_pack) / t_seq, "impv mismatch in " + row[0]);
    ++checked;
  }
  const DeviceProfile& d = s.device;
  const SimMember m{s.models[0].profile, 32, 0, true};
  for (std::size_t n = 1; n <= 8; ++n) {
    Micros first = 0;
    for (std::uint64_t epochs = 1; epochs <= 10; ++epochs) {
      const std::vector<Micros> times(n, static_cast<Micros>(epochs) * to_micros(sequential_epoch_time(d, m, s.dataset_size)));
      const Micros swoh = switching_overhead(n, times, d).swoh;
      if (epochs == 1) first = swoh;
      v.require(swoh == first, "swoh depends on epochs at n=" + std::to_string(n));
    }
  }
  if (v.ok) v.detail = std::to_string(checked) + " rows recomputed exactly, SwOH flat over 1-10 epochs";
  return v;
}

// ---------------------------------------------------------------------------
// 6: distance

Verdict distance() {
  Verdict v;
  const ConfigSpace space;
  const double d = config_distance(space.config(0, 1, 4, 3), space.config(4, 2, 4, 3));
  v.require(d == 5.0, "d(A, B) = " + fmt("%g", d));
  Rng rng(6);
  for (int t = 0; t < 10000; ++t) {
    const auto a = space.config(rng.below(space.size())), b = space.config(rng.below(space.size())),
               c = space.config(rng.below(space.size()));
    for (DistanceMetric m : {DistanceMetric::indexsum, DistanceMetric::euclid}) {
      const double ab = config_distance(a, b, m), ba = config_distance(b, a, m);
      v.require(config_distance(a, a, m) == 0.0, "identity");
      v.require(ab == ba, "symmetry");
      v.require(ab >= 0.0 && (ab == 0.0) == (a.config_id == b.config_id), "positivity");
      v.require(config_distance(a, c, m) <= ab + config_distance(b, c, m) + 1e-12, "triangle inequality");
    }
  }
  if (v.ok) v.detail = "d(A, B) = 5, axioms hold over 10000 triples";
  return v;
}

// ---------------------------------------------------------------------------
// 7: schedule and selection invariance

class OracleExecutor final : public Executor {
 public:
  OracleExecutor(MemoryModel mem, std::uint64_t seed) : mem_(std::move(mem)), seed_(seed) {}
  const ConfigSpace& space() const override { return space_; }
  const MemoryModel& memory() const override { return mem_; }
  GroupOutcome run(std::span<const HyperparamConfig> group, std::uint64_t epochs) override {
    GroupOutcome o;
    for (const auto& c : group) o.losses.push_back(stub_loss(c, epochs, seed_, space_));
    o.ms = simulated_group_ms(mem_, group, epochs, 10000);
    return o;
  }

 private:
  ConfigSpace space_;
  MemoryModel mem_;
  std::uint64_t seed_;
};

MemoryModel mlp_memory() {
  const ProfileBundle b = load_profile(profile_path("mlp3"));
  return {*b.device, *b.model};
}

Verdict schedule() {
  Verdict v;
  v.require(max_bracket(81, 3) == 4, "s_max");
  const auto plan = hyperband_schedule(81, 3);
  const std::size_t n[] = {81, 34, 15, 8, 5};
  const double r[] = {1, 3, 9, 27, 81};
  v.require(plan.size() == 5, "bracket count");
  for (std::size_t k = 0; k < plan.size() && k < 5; ++k) {
    // n = ceil((s_max + 1) eta^s / (s + 1)), r = R eta^-s
    const std::size_t s = 4 - k;
    const auto oracle_n = static_cast<std::size_t>(std::ceil(5.0 * std::pow(3.0, static_cast<double>(s)) / static_cast<double>(s + 1)));
    v.require(plan[k].s == s && plan[k].n == n[k] && plan[k].n == oracle_n && plan[k].r == r[k], "bracket " + std::to_string(s));
  }
  std::string chain;
  for (std::size_t i = 0; i <= 4; ++i) chain += (i ? "->" : "") + std::to_string(rung_size(plan[0], 3, i));
  v.require(chain == "81->27->9->3->1", "survivor chain " + chain);

  const MemoryModel mem = mlp_memory();
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::vector<std::size_t> best;
    for (Strategy st : {Strategy::original, Strategy::batchsize, Strategy::random, Strategy::knn}) {
      OracleExecutor exec(mem, seed);
      PackOptions opt;
      opt.strategy = st;
      best.push_back(packed_hyperband(81, 3, opt, exec, seed).best.config_id);
    }
    for (std::size_t b : best) v.require(b == best[0], "strategies disagree at seed " + std::to_string(seed));
  }
  if (v.ok) v.detail = "s_max 4, (n, r) = (81,1) (34,3) (15,9) (8,27) (5,81), chain " + chain + ", same best on 20 seeds";
  return v;
}

// ---------------------------------------------------------------------------
// 8: simulator with the shipped profiles

Verdict simulator() {
  Verdict v;
  std::map<std::string, ProfileBundle> p;
  for (const char* name : {"mlp3", "mobilenet", "resnet50", "densenet121"}) {
    p[name] = load_profile(profile_path(name));
    v.require(p[name].calibrated, std::string(name) + " is not marked calibrated");
  }
  auto same = [](const ProfileBundle& b, std::size_t n, std::size_t batch) {
    return std::vector<SimMember>(n, SimMember{*b.model, batch, 0, true});
  };
  const auto& dn = p["densenet121"];
  v.require(!check_fit(same(dn, 4, 32), *dn.device).ok, "4 densenet members fit");
  const auto& rn = p["resnet50"];
  v.require(!check_fit(same(rn, 2, 80), *rn.device).ok, "resnet pair fits at 80");
  std::string impvs;
  for (const auto& [name, b] : p) {
    const double impv = estimate_step_time(*b.device, same(b, 2, 32)).impv;
    v.require(impv > 0.0, name + " pair impv " + fmt("%.3f", impv));
    impvs += (impvs.empty() ? "" : ", ") + name + " " + fmt("%.2f", impv);
  }
  const auto& mlp = p["mlp3"];
  double prev = 0.0, at4 = 0.0;
  std::size_t n = 2;
  for (; check_fit(same(mlp, n, 32), *mlp.device).ok; ++n) {
    const double impv = estimate_step_time(*mlp.device, same(mlp, n, 32)).impv;
    v.require(impv > prev, "mlp impv not growing at " + std::to_string(n) + " members");
    if (n >= 4) v.require(impv >= 0.4, "mlp impv " + fmt("%.3f", impv) + " at " + std::to_string(n));
    if (n == 4) at4 = impv;
    prev = impv;
  }
  v.require(n > 4, "mlp memory limit below 4 members");
  const std::vector<SimMember> mismatch{{*mlp.model, 1, 0, true}, {*mlp.model, 100, 1, true}};
  const double neg = estimate_step_time(*mlp.device, mismatch).impv;
  v.require(neg < 0.0, "mismatch pair impv " + fmt("%.3f", neg));
  if (v.ok)
    v.detail = "densenet x4 OOM, resnet pair OOM at 80, pair impv " + impvs + "; mlp impv " + fmt("%.2f", at4) + " at 4 up to " +
               std::to_string(n - 1) + " members; mismatch pair " + fmt("%.3f", neg);
  return v;
}

// ---------------------------------------------------------------------------
// 9: end-to-end tuning order

Verdict tuning_order() {
  Verdict v;
  const auto start = std::chrono::steady_clock::now();
  const MemoryModel mem = mlp_memory();
  std::string detail;
  double min_speedup = 1e9;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::map<Strategy, double> ms;
    for (Strategy st : {Strategy::original, Strategy::batchsize, Strategy::random, Strategy::knn}) {
      SimExecutor exec(mem, 10000, seed);
      PackOptions opt;
      opt.strategy = st;
      ms[st] = packed_hyperband(81, 3, opt, exec, seed).total_ms;
    }
    const double o = ms[Strategy::original], b = ms[Strategy::batchsize], r = ms[Strategy::random], k = ms[Strategy::knn];
    v.require(k <= r && r <= b && b <= o, "order broken at seed " + std::to_string(seed) + ": knn " + fmt("%.0f", k) + " random " +
                                              fmt("%.0f", r) + " batchsize " + fmt("%.0f", b) + " original " + fmt("%.0f", o));
    v.require(o / k >= 1.5, "knn speedup " + fmt("%.3f", o / k) + " at seed " + std::to_string(seed));
    min_speedup = std::min(min_speedup, o / k);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  v.require(secs < 300, "took " + fmt("%.0f", secs) + " s");
  if (v.ok) v.detail = "seeds 1-5 ordered, min knn speedup " + fmt("%.3f", min_speedup) + "x, " + fmt("%.2f", secs) + " s";
  return v;
}

// ---------------------------------------------------------------------------
// 10: engine-backed micro-tuning

Verdict engine_tuning() {
  Verdict v;
  const ExperimentSpec s = load_experiment(source_dir() + "/experiments/tune_engine_micro.json");
  v.require(s.R == 4 && s.eta == 2 && s.executor == "engine", "micro spec changed");
  EngineSetup setup = s.engine;
  setup.seed = *s.seed;
  using Key = std::tuple<std::size_t, std::size_t, std::size_t>;
  std::map<Strategy, std::map<Key, double>> packed_losses, seq_losses;
  std::size_t packed_groups = 0;
  for (Strategy st : {Strategy::original, Strategy::knn}) {
    PackOptions opt = s.pack;
    opt.strategy = st;
    EngineExecutor packed(setup, s.device, s.space, true), seq(setup, s.device, s.space, false);
    const TuneResult a = packed_hyperband(s.R, s.eta, opt, packed, *s.seed);
    const TuneResult b = packed_hyperband(s.R, s.eta, opt, seq, *s.seed);
    for (const auto& r : a.audit) packed_losses[st][{r.bracket, r.rung, r.config_id}] = r.loss;
    for (const auto& r : b.audit) seq_losses[st][{r.bracket, r.rung, r.config_id}] = r.loss;
    if (st == Strategy::knn) packed_groups = a.audit.size() - a.groups;
  }
  double worst = 0.0;
  for (Strategy st : {Strategy::original, Strategy::knn}) {
    v.require(packed_losses[st].size() == seq_losses[st].size() && !packed_losses[st].empty(), "audit sizes differ");
    for (const auto& [k, l] : packed_losses[st]) {
      const auto it = seq_losses[st].find(k);
      v.require(it != seq_losses[st].end(), "config missing from sequential run");
      if (it != seq_losses[st].end()) worst = std::max(worst, std::abs(l - it->second));
    }
  }
  for (const auto& [k, l] : packed_losses[Strategy::knn]) {
    const auto it = packed_losses[Strategy::original].find(k);
    if (it != packed_losses[Strategy::original].end()) worst = std::max(worst, std::abs(l - it->second));
  }
  v.require(packed_groups > 0, "knn never packed two configs together");
  v.require(worst <= 1e-6, "loss diff " + fmt("%.3e", worst));
  if (v.ok) v.detail = "original and knn complete, max |loss diff| " + fmt("%.1e", worst);
  return v;
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Verdict()>> criteria[] = {
      {"gradient oracle", gradient_oracle},     {"packed losslessness", losslessness}, {"misaligned batches", misaligned},
      {"checkpoint semantics", checkpoints},    {"metrics algebra", metrics_algebra},  {"distance", distance},
      {"hyperband schedule", schedule},         {"simulator reproduction", simulator}, {"tuning order", tuning_order},
      {"engine micro-tuning", engine_tuning},
  };
  int failed = 0, index = 0;
  for (const auto& [name, check] : criteria) {
    ++index;
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v.ok = false;
      v.detail = std::string("exception: ") + e.what();
    }
    failed += !v.ok;
    std::printf("%s criterion %d (%s): %s\n", v.ok ? "PASS" : "FAIL", index, name, v.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
