#pragma once

#include <algorithm>
#include <cmath>

#include "updseg/graph.hpp"

namespace upd {

struct UpdcnnConfig {
  int in_channels = 3;
  int base_width = 64;
  int width_step = 32;
  int group_len = 3;
  int num_groups = 6;
  int deconv_width = 256;
  int out_filters = 2;
  int dilation = 2;
  double width_scale = 1.0;  // desk-scale multiplier, resulting widths >= 4
};

inline int scaled_width(int w, double scale) {
  const int rounded = static_cast<int>(std::floor(w * scale / 4.0 + 1e-9)) * 4;  // multiple of 4
  return std::max(4, rounded);
}

/// Per-stage conv widths: base, base+step, ... for num_groups entries,
/// the stage then feeds a deconv of deconv_width filters.
inline std::vector<int> width_schedule(const UpdcnnConfig& cfg) {
  if (cfg.base_width < 1 || cfg.width_step < 0 || cfg.num_groups < 1 || cfg.width_scale <= 0)
    throw GraphError("width_schedule: invalid config");
  std::vector<int> widths;
  for (int i = 0; i < cfg.num_groups; ++i)
    widths.push_back(scaled_width(cfg.base_width + i * cfg.width_step, cfg.width_scale));
  return widths;
}

inline int updcnn_deconv_width(const UpdcnnConfig& cfg) {
  return scaled_width(cfg.deconv_width, cfg.width_scale);
}

/// Three stages of two 3-conv groups (third conv of each group dilated),
/// each stage closed by a doubling deconvolution; two transposed-conv skip
/// links feed adds after deconvs 1 and 2; a final 2-filter conv emits the
/// output logits at 8x the input size.
template <class T>
ModelGraph<T> build_updcnn(const UpdcnnConfig& cfg, std::uint64_t seed) {
  if (cfg.out_filters != 2) throw GraphError("build_updcnn: out_filters must be 2");
  if (cfg.group_len != 3 || cfg.num_groups != 6)
    throw GraphError("build_updcnn: layer plan requires 6 groups of 3 convs");
  const std::vector<int> widths = width_schedule(cfg);
  const int dw = updcnn_deconv_width(cfg);
  if (dw < *std::max_element(widths.begin(), widths.end()))
    throw GraphError("build_updcnn: deconv width must cover the conv widths");

  ModelGraph<T> g;
  std::mt19937_64 rng(seed);
  int ch = cfg.in_channels;
  int conv_id = 0, deconv_id = 0, skip_id = 0;
  int group1_tap[2] = {-1, -1};  // post-ReLU output of group 1 in stages 1,2
  int last_deconv = -1;

  auto add_conv = [&](int out_ch, int dilation, bool output_layer) {
    const std::string name =
        output_layer ? std::string("out") : "conv" + std::to_string(++conv_id);
    init_conv_param(g, rng, name, {out_ch, ch, 3, 3}, ch * 9, out_ch);
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.param = name;
    l.out_channels = out_ch;
    l.dilation = dilation;
    l.is_output = output_layer;
    g.layers.push_back(l);
    ch = out_ch;
    if (!output_layer) g.layers.push_back({LayerKind::Relu});
  };

  for (int stage = 0; stage < 3; ++stage) {
    for (int group = 0; group < 2; ++group) {
      for (int k = 0; k < 3; ++k) {
        const int width = widths[static_cast<std::size_t>(group * 3 + k)];
        add_conv(width, k == 2 ? cfg.dilation : 1, false);
      }
      if (group == 0 && stage < 2) group1_tap[stage] = static_cast<int>(g.layers.size()) - 1;
    }
    // main-path doubling deconvolution
    {
      const std::string name = "deconv" + std::to_string(++deconv_id);
      init_conv_param(g, rng, name, {ch, dw, 3, 3}, ch * 9, dw);
      LayerSpec l;
      l.kind = LayerKind::Deconv;
      l.param = name;
      l.out_channels = dw;
      g.layers.push_back(l);
      ch = dw;
      last_deconv = static_cast<int>(g.layers.size()) - 1;
    }
    if (stage < 2) {
      // skip link: doubling transposed conv from this stage's group-1 output
      const int tap = group1_tap[stage];
      const int tap_ch = widths[2];  // third conv width of group 1
      const std::string name = "skip" + std::to_string(++skip_id);
      init_conv_param(g, rng, name, {tap_ch, dw, 3, 3}, tap_ch * 9, dw);
      LayerSpec l;
      l.kind = LayerKind::Deconv;
      l.param = name;
      l.out_channels = dw;
      l.input = tap;
      l.direct_path = false;
      g.layers.push_back(l);
      LayerSpec a;
      a.kind = LayerKind::AddFrom;
      a.input = last_deconv;
      a.addend = static_cast<int>(g.layers.size()) - 1;
      g.layers.push_back(a);
    }
  }
  add_conv(cfg.out_filters, 1, true);
  return g;
}

/// Forward pass; H,W >= 5 so the dilated kernels fit under Same padding.
/// Channel 1 of the output is the lesion logit.
template <class T>
Var<T> updcnn_forward(Tape<T>& tape, const ModelGraph<T>& model, const ParamVars<T>& params,
                      Var<T> batch) {
  const Tensor<T>& x = batch->value;
  if (x.ndim() != 4 || x.dim(2) < 5 || x.dim(3) < 5)
    throw ShapeError("updcnn_forward: input must be [N,C,H,W] with H,W >= 5");
  return graph_forward(tape, model, params, batch).back();
}

template <class T>
Tensor<T> updcnn_forward(const ModelGraph<T>& model, const Tensor<T>& batch) {
  Tape<T> tape;
  auto params = bind_params(tape, model, false);
  return updcnn_forward(tape, model, params, tape.leaf(batch, false))->value;
}

struct UpdcnnCensus {
  int conv_type_layers = 0;   // conv + deconv, skip links included
  int direct_path_layers = 0;
  int main_deconvs = 0;
  int skip_deconvs = 0;
  int pooling_layers = 0;
  bool relu_after_every_nonoutput_conv = true;
  int dilated_convs = 0;
};

template <class T>
UpdcnnCensus census_updcnn(const ModelGraph<T>& g) {
  UpdcnnCensus c;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::Deconv) {
      ++c.conv_type_layers;
      if (l.direct_path) ++c.direct_path_layers;
    }
    if (l.kind == LayerKind::Deconv) (l.direct_path ? c.main_deconvs : c.skip_deconvs)++;
    if (l.kind == LayerKind::MaxPool2) ++c.pooling_layers;
    if (l.kind == LayerKind::Conv) {
      if (l.dilation > 1) ++c.dilated_convs;
      if (!l.is_output &&
          (i + 1 >= g.layers.size() || g.layers[i + 1].kind != LayerKind::Relu))
        c.relu_after_every_nonoutput_conv = false;
    }
  }
  return c;
}

}  // namespace upd
