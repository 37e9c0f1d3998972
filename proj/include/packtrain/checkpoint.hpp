// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint file layout (little-endian):
//   "PKCK" | u32 version | payload | u64 digest
// The digest is FNV-1a 64 over every preceding byte. The payload holds the
// model_id, training traits, the graph (structure and f64 parameters), the
// optimizer state and the progress cursor. Strings are u32-length prefixed;
// tensors are u32 rank, u64 dims, then f64 data.

#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "packtrain/data.hpp"
#include "packtrain/error.hpp"
#include "packtrain/graph.hpp"
#include "packtrain/optimizer.hpp"
#include "packtrain/train.hpp"

namespace packtrain {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string model_id;
  ComputationGraph graph;
  OptimizerState optimizer;
  ProgressCursor progress;
  std::size_t batch_size = 1;
  std::uint64_t target_steps = 1;
  std::string dataset_binding;
  std::size_t dataset_size = 0;
  std::uint64_t digest = 0;  // of the encoded bytes preceding it
};

namespace detail {

inline void put_tensor(ByteWriter& w, const Tensor& t) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) w.put<std::uint64_t>(d);
  for (double v : t.data) w.put<double>(v);
}

inline Tensor get_tensor(ByteReader& r) {
  const auto rank = r.get<std::uint32_t>("tensor rank");
  if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), r.position());
  Shape shape(rank);
  for (auto& d : shape) d = r.get<std::uint64_t>("tensor dim");
  const std::size_t n = shape_size(shape);
  if (n > r.remaining() / 8) throw FormatError("tensor larger than remaining bytes", r.position());
  std::vector<double> data(n);
  for (auto& v : data) v = r.get<double>("tensor data");
  return Tensor(std::move(shape), std::move(data));
}

inline void put_graph(ByteWriter& w, const ComputationGraph& g) {
  w.put_string(g.model_id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.input_ports.size()));
  for (const auto& p : g.input_ports) {
    w.put_string(p.name);
    w.put<std::uint64_t>(p.width);
    w.put_string(p.dataset);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.nodes.size()));
  for (const auto& n : g.nodes) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(n.op));
    w.put_string(n.name);
    w.put<std::int32_t>(n.source);
    w.put<std::uint64_t>(n.width);
    w.put_string(n.port);
    w.put<std::uint64_t>(n.offset);
    w.put<std::uint64_t>(n.length);
    w.put_string(n.weight);
    w.put_string(n.bias);
    w.put<std::uint64_t>(n.layer);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(n.activation));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.output_ports.size()));
  for (const auto& o : g.output_ports) {
    w.put_string(o.name);
    w.put<std::int32_t>(o.node);
    w.put<std::int32_t>(o.labels);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(g.parameters.size()));
  for (const auto& [name, t] : g.parameters) {
    w.put_string(name);
    put_tensor(w, t);
  }
}

inline ComputationGraph get_graph(ByteReader& r) {
  ComputationGraph g(r.get_string("model_id"));
  const auto ports = r.get<std::uint32_t>("port count");
  for (std::uint32_t i = 0; i < ports; ++i) {
    InputPort p;
    p.name = r.get_string("port name");
    p.width = r.get<std::uint64_t>("port width");
    p.dataset = r.get_string("port dataset");
    g.input_ports.push_back(std::move(p));
  }
  const auto nodes = r.get<std::uint32_t>("node count");
  for (std::uint32_t i = 0; i < nodes; ++i) {
    Node n;
    const auto op = r.get<std::uint8_t>("node op");
    if (op > static_cast<std::uint8_t>(OpKind::activation)) throw FormatError("unknown node op", r.position());
    n.op = static_cast<OpKind>(op);
    n.name = r.get_string("node name");
    n.source = r.get<std::int32_t>("node source");
    n.width = r.get<std::uint64_t>("node width");
    n.port = r.get_string("node port");
    n.offset = r.get<std::uint64_t>("node offset");
    n.length = r.get<std::uint64_t>("node length");
    n.weight = r.get_string("node weight");
    n.bias = r.get_string("node bias");
    n.layer = r.get<std::uint64_t>("node layer");
    const auto act = r.get<std::uint8_t>("node activation");
    if (act > static_cast<std::uint8_t>(Activation::relu)) throw FormatError("unknown activation", r.position());
    n.activation = static_cast<Activation>(act);
    g.nodes.push_back(std::move(n));
  }
  const auto outputs = r.get<std::uint32_t>("output count");
  for (std::uint32_t i = 0; i < outputs; ++i) {
    OutputPort o;
    o.name = r.get_string("output name");
    o.node = r.get<std::int32_t>("output node");
    o.labels = r.get<std::int32_t>("output labels");
    if (o.node < 0 || static_cast<std::size_t>(o.node) >= g.nodes.size() || o.labels >= static_cast<std::int32_t>(g.nodes.size()))
      throw FormatError("output references a missing node", r.position());
    g.output_ports.push_back(std::move(o));
  }
  const auto params = r.get<std::uint32_t>("parameter count");
  for (std::uint32_t i = 0; i < params; ++i) {
    std::string name = r.get_string("parameter name");
    g.parameters[std::move(name)] = get_tensor(r);
  }
  try {
    g.validate();
  } catch (const GraphError& e) {
    throw FormatError(std::string("invalid graph: ") + e.what(), r.position());
  }
  return g;
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.put_bytes("PKCK");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(c.model_id);
  w.put<std::uint64_t>(c.batch_size);
  w.put<std::uint64_t>(c.target_steps);
  w.put_string(c.dataset_binding);
  w.put<std::uint64_t>(c.dataset_size);
  detail::put_graph(w, c.graph);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.optimizer.kind));
  w.put<double>(c.optimizer.learning_rate);
  w.put<std::uint64_t>(c.optimizer.step);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.optimizer.aux.size()));
  for (const auto& [name, slots] : c.optimizer.aux) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(slots.size()));
    for (const auto& t : slots) detail::put_tensor(w, t);
  }
  w.put<std::uint64_t>(c.progress.steps_done);
  w.put<std::uint64_t>(c.progress.epoch_index);
  w.put<std::uint64_t>(c.progress.position);
  w.put<std::uint64_t>(c.progress.samples_used_this_epoch.size());
  for (std::uint32_t v : c.progress.samples_used_this_epoch) w.put<std::uint32_t>(v);
  const std::uint64_t digest = fnv1a64(w.bytes());
  w.put<std::uint64_t>(digest);
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 16) throw FormatError("checkpoint too short", 0);
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (fnv1a64(bytes.first(body)) != stored) throw FormatError("checkpoint digest mismatch", body);

  detail::ByteReader r(bytes.first(body));
  if (r.get_bytes(4, "magic") != "PKCK") throw FormatError("bad checkpoint magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint c;
  c.model_id = r.get_string("model_id");
  c.batch_size = r.get<std::uint64_t>("batch_size");
  c.target_steps = r.get<std::uint64_t>("target_steps");
  c.dataset_binding = r.get_string("dataset_binding");
  c.dataset_size = r.get<std::uint64_t>("dataset_size");
  c.graph = detail::get_graph(r);
  if (c.graph.model_id != c.model_id) throw FormatError("graph model_id disagrees with checkpoint", r.position());
  const auto kind = r.get<std::uint8_t>("optimizer kind");
  if (kind > static_cast<std::uint8_t>(OptimizerKind::momentum)) throw FormatError("unknown optimizer", r.position());
  c.optimizer.kind = static_cast<OptimizerKind>(kind);
  c.optimizer.learning_rate = r.get<double>("learning_rate");
  c.optimizer.step = r.get<std::uint64_t>("optimizer step");
  const auto aux = r.get<std::uint32_t>("aux count");
  for (std::uint32_t i = 0; i < aux; ++i) {
    std::string name = r.get_string("aux name");
    const auto slots = r.get<std::uint32_t>("aux slots");
    std::vector<Tensor> ts;
    for (std::uint32_t s = 0; s < slots; ++s) ts.push_back(detail::get_tensor(r));
    c.optimizer.aux[std::move(name)] = std::move(ts);
  }
  c.progress.steps_done = r.get<std::uint64_t>("steps_done");
  c.progress.epoch_index = r.get<std::uint64_t>("epoch_index");
  c.progress.position = r.get<std::uint64_t>("position");
  const auto n = r.get<std::uint64_t>("usage length");
  if (n != c.dataset_size || n > r.remaining() / 4) throw FormatError("usage vector disagrees with dataset size", r.position());
  c.progress.samples_used_this_epoch.resize(n);
  for (auto& v : c.progress.samples_used_this_epoch) v = r.get<std::uint32_t>("usage");
  if (r.remaining() != 0) throw FormatError("trailing bytes in checkpoint", r.position());
  c.digest = stored;
  return c;
}

inline Checkpoint make_checkpoint(const ModelHandle& h) {
  Checkpoint c;
  c.model_id = h.model_id();
  c.graph = h.graph;
  c.optimizer = h.optimizer;
  c.progress = h.progress;
  c.batch_size = h.batch_size;
  c.target_steps = h.target_steps;
  c.dataset_binding = h.dataset_binding;
  c.dataset_size = h.dataset_size;
  const auto bytes = encode_checkpoint(c);
  std::memcpy(&c.digest, bytes.data() + bytes.size() - 8, 8);
  return c;
}

inline ModelHandle handle_from_checkpoint(const Checkpoint& c) {
  ModelHandle h;
  h.graph = c.graph;
  h.optimizer = c.optimizer;
  h.batch_size = c.batch_size;
  h.target_steps = c.target_steps;
  h.dataset_binding = c.dataset_binding;
  h.dataset_size = c.dataset_size;
  h.progress = c.progress;
  h.validate();
  return h;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) { detail::write_file(path, encode_checkpoint(c)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace packtrain
