#pragma once

#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "updseg/ops.hpp"

namespace upd {

struct GraphError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class LayerKind { Conv, Deconv, Relu, AddFrom, Upsample, MaxPool2 };

struct LayerSpec {
  LayerKind kind;
  std::string param;      // parameter name prefix for Conv/Deconv
  int out_channels = 0;   // Conv/Deconv
  int ksize = 3;          // Conv only
  int dilation = 1;       // Conv only
  PadMode pad = PadMode::Same;
  int input = -1;         // producing layer index; -1 means previous layer
  int addend = -1;        // AddFrom second operand
  int factor = 1;         // Upsample
  bool direct_path = true;
  bool is_output = false; // output conv carries no trailing ReLU
};

/// Ordered layer list plus a named parameter store. Single input, single
/// output; add-from sources always precede their consumers.
template <class T>
struct ModelGraph {
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor<T>> params;

  int count_kind(LayerKind k) const {
    int n = 0;
    for (const auto& l : layers)
      if (l.kind == k) ++n;
    return n;
  }
};

template <class T>
using ParamVars = std::map<std::string, Var<T>>;

/// He-normal weights, zero biases, seeded.
template <class T>
void init_conv_param(ModelGraph<T>& g, std::mt19937_64& rng, const std::string& name,
                     std::vector<int> wshape, int fan_in, int filters) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Tensor<T> w = Tensor<T>::zeros(wshape);
  for (auto& v : w.data) v = static_cast<T>(dist(rng));
  g.params[name + ".weight"] = std::move(w);
  g.params[name + ".bias"] = Tensor<T>::zeros({filters});
}

template <class T>
ParamVars<T> bind_params(Tape<T>& tape, const ModelGraph<T>& g, bool requires_grad) {
  ParamVars<T> vars;
  for (const auto& [name, tensor] : g.params) vars[name] = tape.leaf(tensor, requires_grad);
  return vars;
}

/// Runs the graph, returning every layer's output (the last is the graph
/// output). Taps into intermediate activations are by layer index.
template <class T>
std::vector<Var<T>> graph_forward(Tape<T>& tape, const ModelGraph<T>& g, const ParamVars<T>& params,
                                  Var<T> input) {
  std::vector<Var<T>> outs;
  outs.reserve(g.layers.size());
  auto feed = [&](int idx, int fallback_prev) -> Var<T> {
    if (idx >= 0) return outs.at(static_cast<std::size_t>(idx));
    if (fallback_prev < 0) return input;
    return outs.at(static_cast<std::size_t>(fallback_prev));
  };
  for (std::size_t li = 0; li < g.layers.size(); ++li) {
    const LayerSpec& l = g.layers[li];
    Var<T> x = feed(l.input, static_cast<int>(li) - 1);
    Var<T> y;
    switch (l.kind) {
      case LayerKind::Conv:
        y = conv2d(tape, x, params.at(l.param + ".weight"), params.at(l.param + ".bias"), l.pad,
                   l.dilation);
        break;
      case LayerKind::Deconv:
        y = transposed_conv2d(tape, x, params.at(l.param + ".weight"), params.at(l.param + ".bias"));
        break;
      case LayerKind::Relu:
        y = relu(tape, x);
        break;
      case LayerKind::AddFrom:
        y = add(tape, x, outs.at(static_cast<std::size_t>(l.addend)));
        break;
      case LayerKind::Upsample:
        y = bilinear_upsample(tape, x, l.factor);
        break;
      case LayerKind::MaxPool2:
        y = max_downsample2(tape, x);
        break;
    }
    outs.push_back(y);
  }
  return outs;
}

/// Copies accumulated gradients out of bound parameter vars by name.
template <class T>
std::map<std::string, Tensor<T>> collect_grads(const ParamVars<T>& params) {
  std::map<std::string, Tensor<T>> grads;
  for (const auto& [name, var] : params) grads[name] = var->grad;
  return grads;
}

}  // namespace upd
