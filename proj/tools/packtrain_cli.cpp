// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// packtrain: runs an experiment spec and writes its report.
// Exit codes: 0 ok, 1 runtime failure, 2 spec error, 3 a single model does
// not fit on the device.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "packtrain/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kSpecError = 2;
constexpr int kOomFatal = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"packed multi-model training: profiling, tuning and simulation"};
  std::string spec_path, device, out, strategy, metric;
  std::uint64_t seed = 0;
  double threshold = -1.0;
  app.add_option("--spec", spec_path, "experiment spec (JSON)")->required();
  auto* seed_opt = app.add_option("--seed", seed, "seed; overrides the spec");
  app.add_option("--device", device, "device profile; overrides the spec");
  app.add_option("--out", out, "report path; overrides the spec (stdout when neither is set)");
  app.add_option("--strategy", strategy, "run a single tuning strategy")->check(CLI::IsMember({"original", "batchsize", "random", "knn"}));
  app.add_option("--metric", metric, "kNN distance metric")->check(CLI::IsMember({"indexsum", "euclid", "traintime"}));
  auto* threshold_opt = app.add_option("--threshold", threshold, "kNN similarity threshold")->check(CLI::NonNegativeNumber);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kSpecError;
  }

  using namespace packtrain;
  try {
    ExperimentSpec spec = load_experiment(spec_path, device);
    if (*seed_opt) spec.seed = seed;
    if (!strategy.empty()) spec.strategies = {parse_strategy(strategy)};
    if (!metric.empty()) spec.pack.metric = parse_metric(metric);
    if (*threshold_opt) spec.pack.threshold = threshold;
    if (!out.empty()) spec.output = out;
    if (!spec.seed) throw ConfigError("seed", "an explicit seed is required (spec field or --seed)");

    std::string text;
    switch (spec.mode) {
      case Mode::profile: text = render(run_profile(spec), spec.format); break;
      case Mode::simulate: text = render(run_simulate(spec), spec.format); break;
      case Mode::tune: {
        TuneRun run = run_tune(spec);
        text = render(run.report, spec.format);
        if (!spec.audit.empty()) {
          std::string audit;
          for (const auto& r : run.results) audit += audit_ndjson(r);
          write_atomically(spec.audit, audit);
        }
        break;
      }
    }
    if (spec.output.empty()) std::cout << text;
    else write_atomically(spec.output, text);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "spec error: " << e.what() << "\n";
    return kSpecError;
  } catch (const FormatError& e) {
    std::cerr << "spec error: " << e.what() << "\n";
    return kSpecError;
  } catch (const OomError& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return kOomFatal;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
