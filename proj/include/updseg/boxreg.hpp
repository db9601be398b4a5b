#pragma once

#include <random>
#include <vector>

#include "updseg/graph.hpp"

namespace upd {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Axis-aligned rectangle in input-image pixel coordinates, snapped to the
/// 32-pixel coarse-feature grid so it always covers at least one cell.
struct Box {
  int x0 = 0, y0 = 0, w = 0, h = 0;
};

enum class BoxClass { Positive, Background, Ignore };

struct BoxLabel {
  BoxClass cls = BoxClass::Ignore;
  double share = 0.0;
};

inline constexpr int kBoxGrid = 32;

/// Exactly k boxes with sides uniform in [0.2, 0.6] of the image side,
/// rounded up to a multiple of 32, positions uniform over grid-aligned
/// placements. Deterministic given the seed.
inline std::vector<Box> sample_boxes(std::uint64_t rng_seed, int image_h, int image_w, int k = 12) {
  if (image_h < 64 || image_w < 64)
    throw ConfigError("sample_boxes: image must be at least 64x64");
  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> frac(0.2, 0.6);
  auto draw_side = [&](int side) {
    const double raw = frac(rng) * side;
    int s = static_cast<int>(std::ceil(raw / kBoxGrid)) * kBoxGrid;
    return std::min(s, (side / kBoxGrid) * kBoxGrid);
  };
  std::vector<Box> boxes;
  boxes.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    Box b;
    b.w = draw_side(image_w);
    b.h = draw_side(image_h);
    const int nx = (image_w - b.w) / kBoxGrid + 1;
    const int ny = (image_h - b.h) / kBoxGrid + 1;
    b.x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(nx)) * kBoxGrid;
    b.y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(ny)) * kBoxGrid;
    boxes.push_back(b);
  }
  return boxes;
}

/// Fraction of the box covered by lesion pixels in a binary [H,W] mask.
template <class T>
double box_target_share(const Tensor<T>& mask, const Box& box) {
  if (mask.ndim() != 2) throw ShapeError("box_target_share: mask must be 2-D");
  const int H = mask.dim(0), W = mask.dim(1);
  if (box.x0 < 0 || box.y0 < 0 || box.x0 + box.w > W || box.y0 + box.h > H)
    throw ShapeError("box_target_share: box out of bounds");
  std::int64_t hits = 0;
  for (int y = box.y0; y < box.y0 + box.h; ++y)
    for (int x = box.x0; x < box.x0 + box.w; ++x)
      if (mask.at(y, x) > T(0.5)) ++hits;
  return static_cast<double>(hits) / (static_cast<double>(box.w) * box.h);
}

/// Strict thresholds: share > 0.7 -> Positive, share < 0.1 -> Background,
/// the band [0.1, 0.7] -> Ignore.
inline BoxLabel label_box(double share) {
  BoxLabel l;
  l.share = share;
  if (share > 0.7)
    l.cls = BoxClass::Positive;
  else if (share < 0.1)
    l.cls = BoxClass::Background;
  else
    l.cls = BoxClass::Ignore;
  return l;
}

/// Shared box classifier: 3x3 Same conv + ReLU + global average + affine
/// to one logit over a cropped coarse-feature region.
template <class T>
struct BoxHead {
  Tensor<T> conv_w, conv_b, fc_w, fc_b;

  static BoxHead init(int in_channels, int width, std::uint64_t seed) {
    BoxHead h;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> conv_dist(0.0, std::sqrt(2.0 / (in_channels * 9)));
    h.conv_w = Tensor<T>::zeros({width, in_channels, 3, 3});
    for (auto& v : h.conv_w.data) v = static_cast<T>(conv_dist(rng));
    h.conv_b = Tensor<T>::zeros({width});
    std::normal_distribution<double> fc_dist(0.0, std::sqrt(2.0 / width));
    h.fc_w = Tensor<T>::zeros({width});
    for (auto& v : h.fc_w.data) v = static_cast<T>(fc_dist(rng));
    h.fc_b = Tensor<T>::zeros({1});
    return h;
  }

  std::map<std::string, Tensor<T>> named(const std::string& prefix) const {
    return {{prefix + ".conv.weight", conv_w},
            {prefix + ".conv.bias", conv_b},
            {prefix + ".fc.weight", fc_w},
            {prefix + ".fc.bias", fc_b}};
  }
};

template <class T>
struct BoxHeadVars {
  Var<T> conv_w, conv_b, fc_w, fc_b;
};

template <class T>
BoxHeadVars<T> bind_box_head(Tape<T>& tape, const BoxHead<T>& h, bool requires_grad) {
  return {tape.leaf(h.conv_w, requires_grad), tape.leaf(h.conv_b, requires_grad),
          tape.leaf(h.fc_w, requires_grad), tape.leaf(h.fc_b, requires_grad)};
}

/// Mean BCE of the box classifier over the non-ignored boxes of the batch;
/// exact 0 (with no gradient) when all boxes are ignored. Summation order is
/// fixed by (image, box) index.
template <class T>
Var<T> box_loss(Tape<T>& tape, Var<T> coarse_features, const BoxHeadVars<T>& head,
                const std::vector<std::vector<Box>>& boxes,
                const std::vector<std::vector<BoxLabel>>& labels) {
  const int N = coarse_features->value.dim(0);
  const int fh = coarse_features->value.dim(2), fw = coarse_features->value.dim(3);
  if (static_cast<int>(boxes.size()) != N || boxes.size() != labels.size())
    throw ShapeError("box_loss: need one box/label list per image");

  Var<T> total;
  int count = 0;
  for (int n = 0; n < N; ++n) {
    if (boxes[static_cast<std::size_t>(n)].size() != labels[static_cast<std::size_t>(n)].size())
      throw ShapeError("box_loss: box/label count mismatch");
    for (std::size_t bi = 0; bi < boxes[static_cast<std::size_t>(n)].size(); ++bi) {
      const BoxLabel& lab = labels[static_cast<std::size_t>(n)][bi];
      if (lab.cls == BoxClass::Ignore) continue;
      const Box& b = boxes[static_cast<std::size_t>(n)][bi];
      // project to coarse coordinates, covering partially overlapped cells
      const int cy0 = b.y0 / kBoxGrid;
      const int cx0 = b.x0 / kBoxGrid;
      const int cy1 = std::min(fh, (b.y0 + b.h + kBoxGrid - 1) / kBoxGrid);
      const int cx1 = std::min(fw, (b.x0 + b.w + kBoxGrid - 1) / kBoxGrid);
      Var<T> region = crop_spatial(tape, coarse_features, cy0, cx0, cy1 - cy0, cx1 - cx0);
      Var<T> feat = relu(tape, conv2d(tape, region, head.conv_w, head.conv_b, PadMode::Same, 1));
      Var<T> logit = affine_logit(tape, global_avg(tape, feat), head.fc_w, head.fc_b);
      Var<T> prob = sigmoid(tape, logit);
      // supervise image n's entry only
      Tensor<T> target = Tensor<T>::zeros(prob->value.shape);
      Tensor<T> weights = Tensor<T>::zeros(prob->value.shape);
      target.at(n, 0, 0, 0) = lab.cls == BoxClass::Positive ? T(1) : T(0);
      weights.at(n, 0, 0, 0) = T(1);
      Var<T> l = bce_loss(tape, prob, std::move(target),
                          std::optional<Tensor<T>>(std::move(weights)));
      total = total ? add(tape, total, l) : l;
      ++count;
    }
  }
  if (!count) return tape.leaf(Tensor<T>::from({1}, {T(0)}), false);
  return scale(tape, total, T(1) / static_cast<T>(count));
}

/// total = seg + lambda * box.
template <class T>
Var<T> combine_loss(Tape<T>& tape, Var<T> seg_loss, Var<T> box_term, T lambda) {
  if (lambda < T(0)) throw ConfigError("combine_loss: lambda must be >= 0");
  return add_scaled(tape, seg_loss, box_term, lambda);
}

}  // namespace upd
