// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// Declarative experiments: a JSON spec selects one of three modes and the
// result is a report of self-describing rows.
//
//   profile   pack vs sequential over member counts, batch sizes and the
//             two-model factor grid (model, data, preprocess, optimizer,
//             batch each same or different)
//   tune      Hyperband under each grouping strategy on one config stream
//   simulate  cost-model what-ifs over user-listed packing plans
//
// Needs nlohmann/json.

#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "packtrain/device_sim.hpp"
#include "packtrain/error.hpp"
#include "packtrain/tuner.hpp"

namespace packtrain {

// ---------------------------------------------------------------------------
// reports

struct Cell {
  std::string text;
  bool numeric = false;
};

inline Cell cell(std::string s) { return {std::move(s), false}; }
inline Cell cell(const char* s) { return {s, false}; }
inline Cell cell(bool b) { return {b ? "1" : "0", true}; }
inline Cell cell(std::int64_t v) { return {std::to_string(v), true}; }
inline Cell cell(std::uint64_t v) { return {std::to_string(v), true}; }
inline Cell cell(int v) { return {std::to_string(v), true}; }
// Shortest text that parses back to the same double.
inline Cell cell(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {std::string(buf, res.ptr), true};
}
inline Cell empty_cell() { return {"", false}; }

struct Report {
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add(std::vector<Cell> row) {
    if (row.size() != columns.size()) throw Error("report row has " + std::to_string(row.size()) + " cells, expected " + std::to_string(columns.size()));
    rows.push_back(std::move(row));
  }

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw Error("report has no column '" + name + "'");
  }
};

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

inline std::string to_csv(const Report& r) {
  std::string out;
  for (std::size_t i = 0; i < r.columns.size(); ++i) out += (i ? "," : "") + detail::csv_field(r.columns[i]);
  out += "\n";
  for (const auto& row : r.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + detail::csv_field(row[i].text);
    out += "\n";
  }
  return out;
}

inline std::string to_jsonl(const Report& r) {
  std::string out;
  for (const auto& row : r.rows) {
    out += "{";
    for (std::size_t i = 0; i < row.size(); ++i) {
      out += (i ? "," : "") + nlohmann::json(r.columns[i]).dump() + ":";
      if (row[i].numeric) out += row[i].text;
      else if (row[i].text.empty()) out += "null";
      else out += nlohmann::json(row[i].text).dump();
    }
    out += "}\n";
  }
  return out;
}

// Parses a CSV report written by to_csv (no quoted fields with newlines).
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      out.push_back(std::move(row));
      row.clear();
    } else {
      field += c;
    }
  }
  if (!field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    out.push_back(std::move(row));
  }
  return out;
}

// One audit record per line, keys in schema order.
inline std::string audit_ndjson(const TuneResult& r) {
  std::string out;
  for (const AuditRecord& a : r.audit) {
    nlohmann::ordered_json j;
    j["strategy"] = to_string(r.strategy);
    j["bracket"] = a.bracket;
    j["rung"] = a.rung;
    j["group"] = a.group;
    j["config_id"] = a.config_id;
    j["epochs"] = a.epochs;
    j["loss"] = a.loss;
    j["ms"] = a.ms;
    j["fallback"] = a.fallback;
    out += j.dump() + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// spec

enum class Mode { profile, tune, simulate };

struct ModelRef {
  std::string path;
  ModelProfile profile;
};

struct PlanMember {
  std::size_t model = 0;  // index into ExperimentSpec::models
  std::size_t batch = 1;
  int group = 0;
  bool preprocess = true;
};

struct Plan {
  std::string name;
  std::vector<PlanMember> members;
};

struct ExperimentSpec {
  Mode mode = Mode::profile;
  std::string device_path;
  DeviceProfile device;
  std::vector<ModelRef> models;
  std::optional<std::uint64_t> seed;
  std::size_t dataset_size = 10000;
  std::string format = "csv";
  std::string output;
  std::string audit;

  // profile
  std::vector<std::size_t> member_counts{1, 2};
  std::vector<std::size_t> batch_sizes{32};
  bool ablation = false;

  // tune
  std::uint64_t R = 81;
  std::uint64_t eta = 3;
  std::vector<Strategy> strategies{Strategy::original, Strategy::batchsize, Strategy::random, Strategy::knn};
  PackOptions pack;
  std::string executor = "sim";
  ConfigSpace space;
  EngineSetup engine;

  // simulate
  std::vector<Plan> plans;
};

namespace detail {

template <typename T>
T field(const nlohmann::json& j, const char* name, const std::string& path) {
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + name, e.what());
  }
}

template <typename T>
void optional_field(const nlohmann::json& j, const char* name, T& out, const std::string& path = {}) {
  if (j.contains(name)) out = field<T>(j, name, path);
}

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

inline ModelProfile load_model_profile(const std::string& path, const std::string& field_name) {
  if (!std::filesystem::exists(path)) throw ConfigError(field_name, "file not found: " + path);
  ProfileBundle b;
  try {
    b = load_profile(path);
  } catch (const FormatError& e) {
    throw ConfigError(field_name, e.what());
  }
  if (!b.model) throw ConfigError(field_name, path + " has no model keys");
  return *b.model;
}

inline DeviceProfile load_device_profile(const std::string& path, const std::string& field_name) {
  if (!std::filesystem::exists(path)) throw ConfigError(field_name, "file not found: " + path);
  ProfileBundle b;
  try {
    b = load_profile(path);
  } catch (const FormatError& e) {
    throw ConfigError(field_name, e.what());
  }
  if (!b.device) throw ConfigError(field_name, path + " has no device keys");
  return *b.device;
}

}  // namespace detail

// Parses a spec. Relative paths are resolved against `base_dir`; the device
// profile may be overridden by `device_override`.
inline ExperimentSpec parse_experiment(const std::string& text, const std::filesystem::path& base_dir = ".",
                                       const std::string& device_override = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("spec", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("spec", "top level must be an object");
  static const std::set<std::string> known{"mode", "device", "models", "seed", "dataset_size", "format", "output", "audit",
                                           "member_counts", "batch_sizes", "ablation", "R", "eta", "strategies", "threshold",
                                           "metric", "random_m", "executor", "space", "engine", "plans"};
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw ConfigError(k, "unknown spec field");

  ExperimentSpec s;
  const std::string mode = detail::field<std::string>(j, "mode", "");
  if (mode == "profile") s.mode = Mode::profile;
  else if (mode == "tune") s.mode = Mode::tune;
  else if (mode == "simulate") s.mode = Mode::simulate;
  else throw ConfigError("mode", "must be profile, tune or simulate");

  if (!device_override.empty()) {
    s.device_path = device_override;
  } else {
    s.device_path = detail::resolve(base_dir, detail::field<std::string>(j, "device", ""));
  }
  s.device = detail::load_device_profile(s.device_path, "device");
  try {
    s.device.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("device", e.what());
  }

  if (j.contains("models")) {
    const auto paths = detail::field<std::vector<std::string>>(j, "models", "");
    for (std::size_t i = 0; i < paths.size(); ++i) {
      const std::string p = detail::resolve(base_dir, paths[i]);
      s.models.push_back({p, detail::load_model_profile(p, "models[" + std::to_string(i) + "]")});
    }
  }
  if (j.contains("seed")) s.seed = detail::field<std::uint64_t>(j, "seed", "");
  detail::optional_field(j, "dataset_size", s.dataset_size);
  if (s.dataset_size == 0) throw ConfigError("dataset_size", "must be >= 1");
  detail::optional_field(j, "format", s.format);
  if (s.format != "csv" && s.format != "jsonl") throw ConfigError("format", "must be csv or jsonl");
  if (j.contains("output")) s.output = detail::resolve(base_dir, detail::field<std::string>(j, "output", ""));
  if (j.contains("audit")) s.audit = detail::resolve(base_dir, detail::field<std::string>(j, "audit", ""));

  detail::optional_field(j, "member_counts", s.member_counts);
  for (std::size_t n : s.member_counts)
    if (n == 0) throw ConfigError("member_counts", "counts must be >= 1");
  detail::optional_field(j, "batch_sizes", s.batch_sizes);
  for (std::size_t b : s.batch_sizes)
    if (b == 0) throw ConfigError("batch_sizes", "batch sizes must be >= 1");
  detail::optional_field(j, "ablation", s.ablation);

  detail::optional_field(j, "R", s.R);
  detail::optional_field(j, "eta", s.eta);
  if (s.R < 1) throw ConfigError("R", "must be >= 1");
  if (s.eta < 2) throw ConfigError("eta", "must be >= 2");
  if (j.contains("strategies")) {
    s.strategies.clear();
    for (const auto& name : detail::field<std::vector<std::string>>(j, "strategies", "")) {
      try {
        s.strategies.push_back(parse_strategy(name));
      } catch (const ConfigError& e) {
        throw ConfigError("strategies", e.what());
      }
    }
  }
  detail::optional_field(j, "threshold", s.pack.threshold);
  if (!(s.pack.threshold >= 0)) throw ConfigError("threshold", "must be >= 0");
  if (j.contains("metric")) s.pack.metric = parse_metric(detail::field<std::string>(j, "metric", ""));
  detail::optional_field(j, "random_m", s.pack.random_m);
  if (s.pack.random_m == 0) throw ConfigError("random_m", "must be >= 1");
  detail::optional_field(j, "executor", s.executor);
  if (s.executor != "sim" && s.executor != "engine") throw ConfigError("executor", "must be sim or engine");

  if (j.contains("space")) {
    const auto& sp = j.at("space");
    if (sp.contains("batch_sizes")) s.space.batch_sizes = detail::field<std::vector<std::size_t>>(sp, "batch_sizes", "space.");
    if (sp.contains("learning_rates")) s.space.learning_rates = detail::field<std::vector<double>>(sp, "learning_rates", "space.");
    if (sp.contains("optimizers")) {
      s.space.optimizers.clear();
      for (const auto& o : detail::field<std::vector<std::string>>(sp, "optimizers", "space.")) {
        try {
          s.space.optimizers.push_back(parse_optimizer(o));
        } catch (const Error& e) {
          throw ConfigError("space.optimizers", e.what());
        }
      }
    }
    if (sp.contains("activations")) {
      s.space.activations.clear();
      for (const auto& a : detail::field<std::vector<std::string>>(sp, "activations", "space.")) {
        if (a == "sigmoid") s.space.activations.push_back(Activation::sigmoid);
        else if (a == "leaky_relu") s.space.activations.push_back(Activation::leaky_relu);
        else if (a == "tanh") s.space.activations.push_back(Activation::tanh);
        else if (a == "relu") s.space.activations.push_back(Activation::relu);
        else throw ConfigError("space.activations", "unknown activation '" + a + "'");
      }
    }
    s.space.validate();
  }
  if (j.contains("engine")) {
    const auto& e = j.at("engine");
    detail::optional_field(e, "samples", s.engine.samples, "engine.");
    detail::optional_field(e, "features", s.engine.features, "engine.");
    detail::optional_field(e, "classes", s.engine.classes, "engine.");
    detail::optional_field(e, "hidden", s.engine.hidden, "engine.");
    detail::optional_field(e, "validation_fraction", s.engine.validation_fraction, "engine.");
    if (s.engine.samples < 2 || s.engine.features == 0 || s.engine.classes == 0) throw ConfigError("engine", "needs samples >= 2, features >= 1, classes >= 1");
    if (!(s.engine.validation_fraction > 0.0 && s.engine.validation_fraction < 1.0))
      throw ConfigError("engine.validation_fraction", "must be in (0, 1)");
  }

  if (j.contains("plans")) {
    const auto& plans = j.at("plans");
    if (!plans.is_array()) throw ConfigError("plans", "must be an array");
    for (std::size_t p = 0; p < plans.size(); ++p) {
      const std::string where = "plans[" + std::to_string(p) + "].";
      Plan plan;
      plan.name = plans[p].value("name", "plan" + std::to_string(p));
      if (!plans[p].contains("members") || !plans[p].at("members").is_array()) throw ConfigError(where + "members", "must be an array");
      const auto& members = plans[p].at("members");
      if (members.empty()) throw ConfigError(where + "members", "must not be empty");
      for (std::size_t m = 0; m < members.size(); ++m) {
        const std::string mw = where + "members[" + std::to_string(m) + "].";
        PlanMember pm;
        detail::optional_field(members[m], "model", pm.model, mw);
        detail::optional_field(members[m], "batch", pm.batch, mw);
        detail::optional_field(members[m], "group", pm.group, mw);
        detail::optional_field(members[m], "preprocess", pm.preprocess, mw);
        if (pm.model >= s.models.size()) throw ConfigError(mw + "model", "index outside the models list");
        if (pm.batch == 0) throw ConfigError(mw + "batch", "must be >= 1");
        plan.members.push_back(pm);
      }
      s.plans.push_back(std::move(plan));
    }
  }

  if ((s.mode == Mode::profile || s.mode == Mode::simulate || (s.mode == Mode::tune && s.executor == "sim")) && s.models.empty())
    throw ConfigError("models", "at least one model profile is required");
  return s;
}

inline ExperimentSpec load_experiment(const std::string& path, const std::string& device_override = {}) {
  if (!std::filesystem::exists(path)) throw ConfigError("spec", "file not found: " + path);
  std::ifstream in(path, std::ios::binary);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_experiment(text, std::filesystem::path(path).parent_path(), device_override);
}

// ---------------------------------------------------------------------------
// runs

namespace detail {

inline const std::vector<std::string>& case_columns() {
  static const std::vector<std::string> cols{"case",       "model",       "members",   "batch",       "model_same",
                                             "data_same",  "preprocess",  "optimizer_same", "batch_same", "t_seq_ms",
                                             "t_pack_ms",  "impv",        "memory_bytes",   "capacity_bytes", "te_seq_us",
                                             "te_models_us", "swoh_us",   "oom"};
  return cols;
}

// A row for one simulated pack. A single member that cannot fit is fatal.
inline std::vector<Cell> case_row(const std::string& name, const std::string& model, std::span<const SimMember> members,
                                  const DeviceProfile& d, std::size_t dataset_size, bool model_same, bool data_same,
                                  bool preprocess, bool optimizer_same, bool batch_same) {
  const FitResult fit = check_fit(members, d);
  if (!fit.ok && members.size() == 1)
    throw OomError(fit.total, d.memory_capacity, "case '" + name + "': a single " + members[0].model.name + " at batch " +
                                                     std::to_string(members[0].batch) + " needs " + std::to_string(fit.total) +
                                                     " B, capacity " + std::to_string(d.memory_capacity) + " B");
  const StepTimeReport st = estimate_step_time(d, members);
  std::vector<Micros> epochs;
  for (const auto& m : members) epochs.push_back(to_micros(sequential_epoch_time(d, m, dataset_size)));
  const SwitchReport sw = switching_overhead(members.size(), epochs, d);
  std::size_t batch = 0;
  for (const auto& m : members) batch = std::max(batch, m.batch);
  std::vector<Cell> row{cell(name), cell(model), cell(static_cast<std::uint64_t>(members.size())), cell(static_cast<std::uint64_t>(batch)),
                        cell(model_same), cell(data_same), cell(preprocess), cell(optimizer_same), cell(batch_same), cell(st.t_seq)};
  if (fit.ok) {
    row.push_back(cell(st.t_pack));
    row.push_back(cell(st.impv));
  } else {
    row.push_back(empty_cell());
    row.push_back(empty_cell());
  }
  row.push_back(cell(static_cast<std::uint64_t>(fit.total)));
  row.push_back(cell(d.memory_capacity));
  row.push_back(cell(static_cast<std::int64_t>(sw.te_seq)));
  row.push_back(cell(static_cast<std::int64_t>(sw.te_models_sum)));
  row.push_back(cell(static_cast<std::int64_t>(sw.swoh)));
  row.push_back(cell(!fit.ok));
  return row;
}

}  // namespace detail

inline Report run_profile(const ExperimentSpec& s) {
  Report r;
  r.columns = detail::case_columns();
  const DeviceProfile& d = s.device;
  for (const ModelRef& m : s.models) {
    for (std::size_t n : s.member_counts) {
      for (std::size_t b : s.batch_sizes) {
        const std::vector<SimMember> members(n, SimMember{m.profile, b, 0, true});
        const std::string name = m.profile.name + "-x" + std::to_string(n) + "-b" + std::to_string(b);
        r.add(detail::case_row(name, m.profile.name, members, d, s.dataset_size, true, true, true, true, true));
      }
    }
  }
  if (!s.ablation) return r;
  // Two-model factor grid around the first model; "different model" uses the
  // second profile when one is given.
  const ModelProfile& a = s.models[0].profile;
  const ModelProfile& other = s.models.size() > 1 ? s.models[1].profile : a;
  for (std::size_t b : s.batch_sizes) {
    for (int mask = 0; mask < 32; ++mask) {
      const bool model_same = !(mask & 1), data_same = !(mask & 2), preprocess = !(mask & 4), opt_same = !(mask & 8),
                 batch_same = !(mask & 16);
      SimMember first{with_optimizer(a, OptimizerKind::adam), b, 0, preprocess};
      SimMember second{with_optimizer(model_same ? a : other, opt_same ? OptimizerKind::adam : OptimizerKind::sgd),
                       batch_same ? b : 2 * b, data_same && batch_same ? 0 : 1, preprocess};
      const std::vector<SimMember> members{first, second};
      std::string name = "pair-b" + std::to_string(b);
      name += model_same ? "-Ms" : "-Md";
      name += data_same ? "-Ds" : "-Dd";
      name += preprocess ? "-Pon" : "-Poff";
      name += opt_same ? "-Os" : "-Od";
      name += batch_same ? "-Bs" : "-Bd";
      r.add(detail::case_row(name, first.model.name + "+" + second.model.name, members, d, s.dataset_size, model_same, data_same,
                             preprocess, opt_same, batch_same));
    }
  }
  return r;
}

inline Report run_simulate(const ExperimentSpec& s) {
  Report r;
  r.columns = detail::case_columns();
  for (const Plan& p : s.plans) {
    std::vector<SimMember> members;
    std::string model;
    for (const PlanMember& pm : p.members) {
      members.push_back({s.models[pm.model].profile, pm.batch, pm.group, pm.preprocess});
      model += (model.empty() ? "" : "+") + s.models[pm.model].profile.name;
    }
    bool model_same = true, data_same = true, pre = true, batch_same = true;
    for (const auto& m : members) {
      model_same = model_same && m.model.name == members[0].model.name;
      data_same = data_same && m.input_group == members[0].input_group;
      pre = pre && m.preprocess;
      batch_same = batch_same && m.batch == members[0].batch;
    }
    r.add(detail::case_row(p.name, model, members, s.device, s.dataset_size, model_same, data_same, pre, true, batch_same));
  }
  return r;
}

struct TuneRun {
  Report report;
  std::vector<TuneResult> results;
};

inline std::unique_ptr<Executor> make_executor(const ExperimentSpec& s, std::uint64_t seed) {
  if (s.executor == "engine") {
    EngineSetup e = s.engine;
    e.seed = seed;
    return std::make_unique<EngineExecutor>(e, s.device, s.space, true);
  }
  return std::make_unique<SimExecutor>(MemoryModel{s.device, s.models.at(0).profile}, s.dataset_size, seed, s.space);
}

// Every strategy gets a fresh executor over the same seed, so all of them
// see the same sampled configs. A failing strategy yields an error row.
inline TuneRun run_tune(const ExperimentSpec& s) {
  if (!s.seed) throw ConfigError("seed", "tuning needs an explicit seed");
  TuneRun out;
  out.report.columns = {"strategy", "total_ms", "speedup", "groups", "oom_fallbacks", "total_epochs", "best_config_id", "best_config",
                        "best_loss", "error"};
  double original_ms = 0.0;
  for (Strategy st : s.strategies) {
    PackOptions opt = s.pack;
    opt.strategy = st;
    try {
      auto exec = make_executor(s, *s.seed);
      TuneResult r = packed_hyperband(s.R, s.eta, opt, *exec, *s.seed);
      if (st == Strategy::original) original_ms = r.total_ms;
      out.report.add({cell(to_string(st)), cell(r.total_ms), original_ms > 0 ? cell(original_ms / r.total_ms) : empty_cell(),
                      cell(static_cast<std::uint64_t>(r.groups)), cell(static_cast<std::uint64_t>(r.oom_fallbacks)),
                      cell(r.total_epochs), cell(static_cast<std::uint64_t>(r.best.config_id)), cell(describe(r.best)),
                      cell(r.best_loss), empty_cell()});
      out.results.push_back(std::move(r));
    } catch (const OomError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      out.report.add({cell(to_string(st)), empty_cell(), empty_cell(), empty_cell(), empty_cell(), empty_cell(), empty_cell(),
                      empty_cell(), empty_cell(), cell(e.what())});
    }
  }
  return out;
}

// Writes `text` to `path` via "<path>.partial", renamed once complete.
inline void write_atomically(const std::string& path, const std::string& text) {
  const std::string partial = path + ".partial";
  {
    std::ofstream out(partial, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + partial);
    out << text;
    if (!out) throw Error("write failed: " + partial);
  }
  std::filesystem::rename(partial, path);
}

inline std::string render(const Report& r, const std::string& format) { return format == "jsonl" ? to_jsonl(r) : to_csv(r); }

}  // namespace packtrain
