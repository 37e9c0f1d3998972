// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// A small reverse-mode differentiation engine over a static node list.
//
// Nodes are stored in topological order: a node may only consume the value of
// a node with a smaller index, so the list is a DAG by construction. Every
// value carries a batch (row) dimension; static widths are checked when the
// graph is validated and again when inputs are bound.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "packtrain/error.hpp"
#include "packtrain/random.hpp"
#include "packtrain/tensor.hpp"

namespace packtrain {

enum class Activation { sigmoid, leaky_relu, tanh, relu };

inline constexpr double kLeakyReluSlope = 0.01;

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::sigmoid: return "sigmoid";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

enum class OpKind { input, slice_rows, affine, activation };

struct Node {
  OpKind op = OpKind::input;
  std::string name;
  int source = -1;         // producer node, -1 for inputs
  std::size_t width = 0;   // static column count; 0 marks a rank-1 value (class labels)
  std::string port;        // input
  std::size_t offset = 0;  // slice_rows
  std::size_t length = 0;  // slice_rows
  std::string weight;      // affine, shape [in, out]
  std::string bias;        // affine, shape [out]
  std::size_t layer = 0;   // affine; feeds parameter initialization
  Activation activation = Activation::relu;
};

struct InputPort {
  std::string name;
  std::size_t width = 0;  // 0: class-index labels, shape [rows]
  std::string dataset;    // dataset binding, informational for the engine
};

// A named output. When `labels` is set the output is a loss head: mean softmax
// cross-entropy of the output's rows against the label node's class indices.
struct OutputPort {
  std::string name;
  int node = -1;
  int labels = -1;
};

using TensorMap = std::map<std::string, Tensor>;

class ComputationGraph {
 public:
  std::string model_id;
  std::vector<InputPort> input_ports;
  std::vector<Node> nodes;
  std::vector<OutputPort> output_ports;
  TensorMap parameters;

  ComputationGraph() = default;
  explicit ComputationGraph(std::string id) : model_id(std::move(id)) {}

  int add_input(const std::string& port, std::size_t width, const std::string& dataset = {}) {
    if (find_port(port)) throw GraphError("duplicate input port '" + port + "'");
    input_ports.push_back({port, width, dataset});
    Node n;
    n.op = OpKind::input;
    n.name = port;
    n.port = port;
    n.width = width;
    return push(std::move(n));
  }

  int add_slice(int source, std::size_t offset, std::size_t length, const std::string& name = {}) {
    Node n;
    n.op = OpKind::slice_rows;
    n.name = name.empty() ? "slice" + std::to_string(nodes.size()) : name;
    n.source = check_source(source);
    n.width = nodes[static_cast<std::size_t>(source)].width;
    n.offset = offset;
    n.length = length;
    return push(std::move(n));
  }

  // y = x W + b; registers zero-valued parameters `<prefix>.weight` and `<prefix>.bias`.
  int add_affine(int source, std::size_t out_width, const std::string& prefix, std::size_t layer) {
    const std::size_t in_width = nodes[static_cast<std::size_t>(check_source(source))].width;
    if (in_width == 0 || out_width == 0) throw GraphError("affine '" + prefix + "' needs non-zero widths");
    Node n;
    n.op = OpKind::affine;
    n.name = prefix;
    n.source = source;
    n.width = out_width;
    n.weight = prefix + ".weight";
    n.bias = prefix + ".bias";
    n.layer = layer;
    if (parameters.count(n.weight) || parameters.count(n.bias))
      throw GraphError("duplicate parameter prefix '" + prefix + "'");
    parameters[n.weight] = Tensor::zeros({in_width, out_width});
    parameters[n.bias] = Tensor::zeros({out_width});
    return push(std::move(n));
  }

  int add_activation(int source, Activation a, const std::string& name = {}) {
    Node n;
    n.op = OpKind::activation;
    n.name = name.empty() ? std::string(to_string(a)) + std::to_string(nodes.size()) : name;
    n.source = check_source(source);
    n.width = nodes[static_cast<std::size_t>(source)].width;
    n.activation = a;
    return push(std::move(n));
  }

  void add_output(const std::string& name, int node, int labels = -1) {
    for (const auto& o : output_ports)
      if (o.name == name) throw GraphError("duplicate output port '" + name + "'");
    check_source(node);
    if (labels >= 0) check_source(labels);
    output_ports.push_back({name, node, labels});
  }

  const InputPort* find_port(const std::string& name) const {
    for (const auto& p : input_ports)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : parameters) n += t.size();
    return n;
  }

  // Structural invariants: topological order, consistent static shapes,
  // loss heads over rank-2 logits with rank-1 labels, every parameter
  // reachable from an output.
  void validate() const {
    std::set<std::string> used_params;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const Node& n = nodes[i];
      if (n.op != OpKind::input && (n.source < 0 || static_cast<std::size_t>(n.source) >= i))
        throw GraphError("node '" + n.name + "' is not in topological order");
      switch (n.op) {
        case OpKind::input:
          if (!find_port(n.port)) throw GraphError("input node '" + n.name + "' has no port");
          break;
        case OpKind::slice_rows:
        case OpKind::activation:
          if (nodes[static_cast<std::size_t>(n.source)].width != n.width)
            throw GraphError("node '" + n.name + "' width disagrees with its source");
          break;
        case OpKind::affine: {
          const auto w = parameters.find(n.weight);
          const auto b = parameters.find(n.bias);
          if (w == parameters.end() || b == parameters.end())
            throw GraphError("affine '" + n.name + "' is missing parameters");
          const std::size_t in = nodes[static_cast<std::size_t>(n.source)].width;
          if (w->second.shape != Shape{in, n.width} || b->second.shape != Shape{n.width})
            throw GraphError("affine '" + n.name + "' parameter shapes disagree with widths");
          break;
        }
      }
    }
    std::vector<bool> live(nodes.size(), false);
    for (const auto& o : output_ports) {
      if (o.labels >= 0) {
        if (nodes[static_cast<std::size_t>(o.node)].width < 1 || nodes[static_cast<std::size_t>(o.labels)].width != 0)
          throw GraphError("loss head '" + o.name + "' needs rank-2 logits and rank-1 labels");
      }
      live[static_cast<std::size_t>(o.node)] = true;
    }
    for (std::size_t i = nodes.size(); i-- > 0;) {
      if (!live[i]) continue;
      const Node& n = nodes[i];
      if (n.source >= 0) live[static_cast<std::size_t>(n.source)] = true;
      if (n.op == OpKind::affine) {
        used_params.insert(n.weight);
        used_params.insert(n.bias);
      }
    }
    for (const auto& [name, _] : parameters)
      if (!used_params.count(name)) throw GraphError("parameter '" + name + "' is unreachable from every output");
  }

 private:
  int push(Node n) {
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size() - 1);
  }

  int check_source(int source) const {
    if (source < 0 || static_cast<std::size_t>(source) >= nodes.size())
      throw GraphError("node index " + std::to_string(source) + " out of range");
    return source;
  }
};

// Dense classifier: x -> [affine -> activation]* -> affine -> logits, with a
// cross-entropy head against port "y".
struct MlpSpec {
  std::size_t input_width = 1;
  std::vector<std::size_t> hidden;
  std::size_t classes = 2;
  Activation activation = Activation::relu;
};

inline ComputationGraph make_mlp(const std::string& model_id, const MlpSpec& spec, const std::string& dataset = {}) {
  ComputationGraph g(model_id);
  int x = g.add_input("x", spec.input_width, dataset);
  const int y = g.add_input("y", 0, dataset);
  std::size_t layer = 0;
  for (std::size_t width : spec.hidden) {
    x = g.add_affine(x, width, "layer" + std::to_string(layer), layer);
    x = g.add_activation(x, spec.activation);
    ++layer;
  }
  x = g.add_affine(x, spec.classes, "layer" + std::to_string(layer), layer);
  g.add_output("logits", x, y);
  g.validate();
  return g;
}

// Xavier-uniform weights, zero biases. Each layer's stream is seeded from
// (model_id, layer index, seed) only, so the values do not depend on creation
// order or on which pack the model later joins.
inline TensorMap init_parameters(const ComputationGraph& graph, std::uint64_t seed) {
  TensorMap params = graph.parameters;
  const std::uint64_t id_hash = fnv1a64(graph.model_id);
  for (const Node& n : graph.nodes) {
    if (n.op != OpKind::affine) continue;
    Tensor& w = params.at(n.weight);
    const double fan_in = static_cast<double>(w.shape[0]);
    const double fan_out = static_cast<double>(w.shape[1]);
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Rng rng(mix_seed(mix_seed(id_hash, n.layer), seed));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    std::fill(params.at(n.bias).data.begin(), params.at(n.bias).data.end(), 0.0);
  }
  return params;
}

struct ForwardResult {
  TensorMap outputs;
  std::map<std::string, double> losses;
};

struct GradientResult {
  std::map<std::string, double> losses;
  TensorMap gradients;
};

namespace detail {

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Activation::leaky_relu: return x > 0.0 ? x : kLeakyReluSlope * x;
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
  }
  return x;
}

// Derivative expressed through the input x and output y of the activation.
inline double activate_grad(Activation a, double x, double y) {
  switch (a) {
    case Activation::sigmoid: return y * (1.0 - y);
    case Activation::leaky_relu: return x > 0.0 ? 1.0 : kLeakyReluSlope;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

inline std::vector<Tensor> evaluate(const ComputationGraph& g, const TensorMap& inputs) {
  std::optional<std::size_t> batch;
  for (const InputPort& p : g.input_ports) {
    const auto it = inputs.find(p.name);
    if (it == inputs.end()) throw ShapeError(p.name, "no tensor bound");
    const Tensor& t = it->second;
    const Shape want = p.width == 0 ? Shape{t.rows()} : Shape{t.rows(), p.width};
    if (t.shape != want || t.rows() == 0)
      throw ShapeError(p.name, "expected " + (p.width == 0 ? std::string("[rows]") : "[rows," + std::to_string(p.width) + "]") +
                                   ", got " + shape_str(t.shape));
    if (batch && *batch != t.rows())
      throw ShapeError(p.name, "batch dimension " + std::to_string(t.rows()) + " differs from " + std::to_string(*batch));
    batch = t.rows();
  }

  std::vector<Tensor> values(g.nodes.size());
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const Node& n = g.nodes[i];
    switch (n.op) {
      case OpKind::input:
        values[i] = inputs.at(n.port);
        break;
      case OpKind::slice_rows: {
        const Tensor& src = values[static_cast<std::size_t>(n.source)];
        if (n.length == 0 || n.offset + n.length > src.rows())
          throw ShapeError(n.name, "slice [" + std::to_string(n.offset) + ", " + std::to_string(n.offset + n.length) +
                                       ") exceeds " + std::to_string(src.rows()) + " rows");
        values[i] = src.slice_rows(n.offset, n.length);
        break;
      }
      case OpKind::affine: {
        const Tensor& x = values[static_cast<std::size_t>(n.source)];
        const Tensor& w = g.parameters.at(n.weight);
        const Tensor& b = g.parameters.at(n.bias);
        const std::size_t rows = x.rows(), in = w.shape[0], out = w.shape[1];
        Tensor y = Tensor::zeros({rows, out});
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < out; ++j) {
            double acc = b.data[j];
            for (std::size_t k = 0; k < in; ++k) acc += x.data[r * in + k] * w.data[k * out + j];
            y.data[r * out + j] = acc;
          }
        }
        values[i] = std::move(y);
        break;
      }
      case OpKind::activation: {
        Tensor y = values[static_cast<std::size_t>(n.source)];
        for (double& v : y.data) v = activate(n.activation, v);
        values[i] = std::move(y);
        break;
      }
    }
  }
  return values;
}

// Mean cross-entropy and, if requested, d(loss)/d(logits).
inline double softmax_xent(const Tensor& logits, const Tensor& labels, const std::string& head, Tensor* grad) {
  const std::size_t rows = logits.rows(), classes = logits.cols();
  if (labels.rows() != rows) throw ShapeError(head, "labels have " + std::to_string(labels.rows()) + " rows, logits " + std::to_string(rows));
  double total = 0.0;
  if (grad) *grad = Tensor::zeros(logits.shape);
  const double inv_rows = 1.0 / static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double lv = labels.data[r];
    if (!(lv >= 0.0) || lv >= static_cast<double>(classes) || lv != std::floor(lv))
      throw ShapeError(head, "label " + std::to_string(lv) + " outside [0, " + std::to_string(classes) + ")");
    const std::size_t label = static_cast<std::size_t>(lv);
    const double* z = &logits.data[r * classes];
    const double zmax = *std::max_element(z, z + classes);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[c] - zmax);
    const double lse = zmax + std::log(sum);
    total += lse - z[label];
    if (grad) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double p = std::exp(z[c] - lse);
        grad->data[r * classes + c] = (p - (c == label ? 1.0 : 0.0)) * inv_rows;
      }
    }
  }
  return total * inv_rows;
}

}  // namespace detail

inline ForwardResult forward(const ComputationGraph& graph, const TensorMap& inputs) {
  const std::vector<Tensor> values = detail::evaluate(graph, inputs);
  ForwardResult result;
  for (const OutputPort& o : graph.output_ports) {
    const Tensor& out = values[static_cast<std::size_t>(o.node)];
    if (o.labels >= 0)
      result.losses[o.name] = detail::softmax_xent(out, values[static_cast<std::size_t>(o.labels)], o.name, nullptr);
    result.outputs[o.name] = out;
  }
  return result;
}

// Gradients of the summed loss heads named in `heads` (all heads when empty)
// with respect to every parameter. Parameters no selected head depends on get
// an all-zero gradient.
inline GradientResult value_and_grad(const ComputationGraph& graph, const TensorMap& inputs,
                                     const std::vector<std::string>& heads = {}) {
  const std::vector<Tensor> values = detail::evaluate(graph, inputs);
  std::vector<Tensor> grads(graph.nodes.size());
  std::vector<bool> has_grad(graph.nodes.size(), false);

  GradientResult result;
  for (const auto& [name, p] : graph.parameters) result.gradients[name] = Tensor::zeros(p.shape);

  for (const OutputPort& o : graph.output_ports) {
    if (o.labels < 0) continue;
    if (!heads.empty() && std::find(heads.begin(), heads.end(), o.name) == heads.end()) continue;
    Tensor g;
    result.losses[o.name] =
        detail::softmax_xent(values[static_cast<std::size_t>(o.node)], values[static_cast<std::size_t>(o.labels)], o.name, &g);
    const auto idx = static_cast<std::size_t>(o.node);
    if (!has_grad[idx]) {
      grads[idx] = std::move(g);
      has_grad[idx] = true;
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) grads[idx].data[k] += g.data[k];
    }
  }
  for (const std::string& h : heads) {
    if (!result.losses.count(h)) throw GraphError("no loss head named '" + h + "'");
  }

  auto accumulate = [&](std::size_t idx, Tensor&& g) {
    if (!has_grad[idx]) {
      grads[idx] = std::move(g);
      has_grad[idx] = true;
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) grads[idx].data[k] += g.data[k];
    }
  };

  for (std::size_t i = graph.nodes.size(); i-- > 0;) {
    if (!has_grad[i]) continue;
    const Node& n = graph.nodes[i];
    const Tensor& dy = grads[i];
    switch (n.op) {
      case OpKind::input:
        break;
      case OpKind::slice_rows: {
        const auto src = static_cast<std::size_t>(n.source);
        if (graph.nodes[src].op == OpKind::input) break;
        Tensor dx = Tensor::zeros(values[src].shape);
        const std::size_t stride = dx.cols();
        std::copy(dy.data.begin(), dy.data.end(), dx.data.begin() + static_cast<std::ptrdiff_t>(n.offset * stride));
        accumulate(src, std::move(dx));
        break;
      }
      case OpKind::affine: {
        const auto src = static_cast<std::size_t>(n.source);
        const Tensor& x = values[src];
        const Tensor& w = graph.parameters.at(n.weight);
        const std::size_t rows = x.rows(), in = w.shape[0], out = w.shape[1];
        Tensor& dw = result.gradients.at(n.weight);
        Tensor& db = result.gradients.at(n.bias);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < out; ++j) {
            const double d = dy.data[r * out + j];
            db.data[j] += d;
            for (std::size_t k = 0; k < in; ++k) dw.data[k * out + j] += x.data[r * in + k] * d;
          }
        }
        if (graph.nodes[src].op != OpKind::input) {
          Tensor dx = Tensor::zeros(x.shape);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < in; ++k) {
              double acc = 0.0;
              for (std::size_t j = 0; j < out; ++j) acc += dy.data[r * out + j] * w.data[k * out + j];
              dx.data[r * in + k] = acc;
            }
          accumulate(src, std::move(dx));
        }
        break;
      }
      case OpKind::activation: {
        const auto src = static_cast<std::size_t>(n.source);
        const Tensor& x = values[src];
        const Tensor& y = values[i];
        Tensor dx = Tensor::zeros(x.shape);
        for (std::size_t k = 0; k < x.size(); ++k)
          dx.data[k] = dy.data[k] * detail::activate_grad(n.activation, x.data[k], y.data[k]);
        accumulate(src, std::move(dx));
        break;
      }
    }
  }
  return result;
}

inline TensorMap backward(const ComputationGraph& graph, const TensorMap& inputs, const std::vector<std::string>& heads = {}) {
  return value_and_grad(graph, inputs, heads).gradients;
}

}  // namespace packtrain
