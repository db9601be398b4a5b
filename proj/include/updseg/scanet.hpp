#pragma once

#include <optional>

#include "updseg/graph.hpp"
#include "updseg/updcnn.hpp"  // scaled_width

namespace upd {

struct ScanetConfig {
  std::vector<int> stage_widths = {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
  std::vector<int> stage_lens = {2, 2, 3, 3, 3};  // a 2x max-downsample follows each stage
  int head_width = 256;
  double width_scale = 1.0;
  int input_size = 320;  // must be divisible by 32
};

/// Subtracts the per-image, per-channel mean; each output channel of each
/// image then has mean zero.
template <class T>
Tensor<T> mean_subtract(const Tensor<T>& image) {
  if (image.ndim() != 4) throw ShapeError("mean_subtract: input must be [N,C,H,W]");
  const int N = image.dim(0), C = image.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(image.dim(2)) * image.dim(3);
  Tensor<T> out = image;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T* p = &out.data[static_cast<std::size_t>((static_cast<std::int64_t>(n) * C + c) * plane)];
      T mean = T(0);
      for (std::int64_t i = 0; i < plane; ++i) mean += p[i];
      mean /= static_cast<T>(plane);
      for (std::int64_t i = 0; i < plane; ++i) p[i] -= mean;
    }
  return out;
}

/// Differentiable form; the Jacobian of x - mean(x) maps the upstream
/// gradient g to g - mean(g) per image and channel.
template <class T>
Var<T> mean_subtract(Tape<T>& tape, Var<T> x) {
  if (x->value.ndim() != 4) throw ShapeError("mean_subtract: input must be [N,C,H,W]");
  const int N = x->value.dim(0), C = x->value.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x->value.dim(2)) * x->value.dim(3);
  auto out = tape.record(mean_subtract(x->value), nullptr);
  out->backprop = [x, out, N, C, plane]() {
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const std::size_t base = static_cast<std::size_t>((static_cast<std::int64_t>(n) * C + c) * plane);
        T mean = T(0);
        for (std::int64_t i = 0; i < plane; ++i) mean += out->grad.data[base + static_cast<std::size_t>(i)];
        mean /= static_cast<T>(plane);
        for (std::int64_t i = 0; i < plane; ++i)
          x->grad.data[base + static_cast<std::size_t>(i)] +=
              out->grad.data[base + static_cast<std::size_t>(i)] - mean;
      }
  };
  return out;
}

/// VGG-16 conv backbone (13 convs, 5 max-downsamples, no FC layers) plus a
/// two-conv head to a single logit channel and a 32x bilinear restore.
/// Pretrained tensors, when given, must match `backbone.convK.{weight,bias}`
/// names and shapes exactly; unmatched entries are rejected.
template <class T>
ModelGraph<T> build_scanet(const ScanetConfig& cfg, std::uint64_t seed,
                           const std::map<std::string, Tensor<T>>* pretrained = nullptr) {
  if (cfg.input_size % 32 != 0) throw GraphError("build_scanet: input_size must be divisible by 32");
  if (cfg.stage_widths.size() != 13 || cfg.stage_lens.size() != 5)
    throw GraphError("build_scanet: backbone plan requires 13 convs in 5 stages");

  ModelGraph<T> g;
  std::mt19937_64 rng(seed);
  int ch = 3;
  int conv_id = 0;

  auto add_conv = [&](const std::string& name, int out_ch, int ksize, bool with_relu) {
    init_conv_param(g, rng, name, {out_ch, ch, ksize, ksize}, ch * ksize * ksize, out_ch);
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.param = name;
    l.out_channels = out_ch;
    l.ksize = ksize;
    l.is_output = !with_relu;
    g.layers.push_back(l);
    ch = out_ch;
    if (with_relu) g.layers.push_back({LayerKind::Relu});
  };

  std::size_t wi = 0;
  for (int stage = 0; stage < 5; ++stage) {
    for (int k = 0; k < cfg.stage_lens[static_cast<std::size_t>(stage)]; ++k) {
      const int width = scaled_width(cfg.stage_widths[wi++], cfg.width_scale);
      add_conv("backbone.conv" + std::to_string(++conv_id), width, 3, true);
    }
    g.layers.push_back({LayerKind::MaxPool2});
  }
  add_conv("head.conv1", scaled_width(cfg.head_width, cfg.width_scale), 3, true);
  add_conv("head.conv2", 1, 1, false);
  LayerSpec up;
  up.kind = LayerKind::Upsample;
  up.factor = 32;
  g.layers.push_back(up);

  if (pretrained) {
    for (const auto& [name, tensor] : *pretrained) {
      auto it = g.params.find(name);
      if (it == g.params.end())
        throw LoadError("build_scanet: pretrained archive has unknown parameter '" + name + "'");
      if (it->second.shape != tensor.shape)
        throw LoadError("build_scanet: pretrained parameter '" + name + "' has shape " +
                        tensor.shape_str() + ", expected " + it->second.shape_str());
      it->second = tensor;
    }
  }
  return g;
}

template <class T>
struct ScanetOut {
  Var<T> backbone;  // coarse features after the 5th downsample
  Var<T> coarse;    // [N,1,H/32,W/32] lesion logits
  Var<T> restored;  // [N,1,H,W] lesion logits
};

/// Input must be mean-subtracted and have H,W divisible by 32.
template <class T>
ScanetOut<T> scanet_forward(Tape<T>& tape, const ModelGraph<T>& model, const ParamVars<T>& params,
                            Var<T> batch) {
  const Tensor<T>& x = batch->value;
  if (x.ndim() != 4 || x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0)
    throw ShapeError("scanet_forward: input spatial size must be divisible by 32");
  auto outs = graph_forward(tape, model, params, batch);
  // layer indices: last = upsample, last-1 = head.conv2, backbone output is
  // the 5th MaxPool2 layer's output
  int pool_seen = 0, backbone_idx = -1;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    if (model.layers[i].kind == LayerKind::MaxPool2 && ++pool_seen == 5)
      backbone_idx = static_cast<int>(i);
  ScanetOut<T> r;
  r.backbone = outs.at(static_cast<std::size_t>(backbone_idx));
  r.restored = outs.back();
  r.coarse = outs.at(outs.size() - 2);
  return r;
}

struct ScanetCensus {
  int backbone_convs = 0;
  int head_convs = 0;
  int downsamples = 0;
  int fc_layers = 0;  // by construction there is no FC kind
};

template <class T>
ScanetCensus census_scanet(const ModelGraph<T>& g) {
  ScanetCensus c;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::Conv)
      (l.param.rfind("backbone.", 0) == 0 ? c.backbone_convs : c.head_convs)++;
    if (l.kind == LayerKind::MaxPool2) ++c.downsamples;
  }
  return c;
}

}  // namespace upd
