#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "updseg/autograd.hpp"
#include "updseg/tensor.hpp"

namespace upd {

inline int effective_extent(int k, int dilation) { return k + (k - 1) * (dilation - 1); }

namespace detail {

template <class T>
Tensor<T> pad_input(const Tensor<T>& x, int ph_lead, int ph_trail, int pw_lead, int pw_trail) {
  if (ph_lead == 0 && ph_trail == 0 && pw_lead == 0 && pw_trail == 0) return x;
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({N, C, H + ph_lead + ph_trail, W + pw_lead + pw_trail});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h) {
        const T* src = &x.data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * C + c) * H + h) * W)];
        T* dst = &out.at(n, c, h + ph_lead, pw_lead);
        std::copy(src, src + W, dst);
      }
  return out;
}

template <class T>
Tensor<T> crop_padding(const Tensor<T>& xp, int ph_lead, int pw_lead, int H, int W) {
  const int N = xp.dim(0), C = xp.dim(1);
  Tensor<T> out = Tensor<T>::zeros({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h) {
        const T* src = &xp.at(n, c, h + ph_lead, pw_lead);
        std::copy(src, src + W, &out.at(n, c, h, 0));
      }
  return out;
}

struct ConvGeom {
  int ph_lead = 0, ph_trail = 0, pw_lead = 0, pw_trail = 0;
  int out_h = 0, out_w = 0;
};

inline ConvGeom conv_geometry(int H, int W, int kh, int kw, PadMode pad, int dilation) {
  const int eh = effective_extent(kh, dilation);
  const int ew = effective_extent(kw, dilation);
  ConvGeom g;
  if (pad == PadMode::Same) {
    g.ph_lead = (eh - 1) / 2;
    g.ph_trail = eh - 1 - g.ph_lead;
    g.pw_lead = (ew - 1) / 2;
    g.pw_trail = ew - 1 - g.pw_lead;
    g.out_h = H;
    g.out_w = W;
  } else {
    g.out_h = H - eh + 1;
    g.out_w = W - ew + 1;
    if (g.out_h < 1 || g.out_w < 1)
      throw ShapeError("conv2d: effective kernel extent exceeds input size");
  }
  return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: stride-1 cross-correlation with dilated taps.
// input [N,C,H,W], kernel [F,C,kh,kw], bias [F] -> [N,F,H',W']
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, PadMode pad,
                         int dilation) {
  if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: input and kernel must be 4-D");
  if (dilation < 1) throw ShapeError("conv2d: dilation must be >= 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw ShapeError("conv2d: kernel channels " + std::to_string(w.dim(1)) +
                     " do not match input channels " + std::to_string(C));
  if (b.ndim() != 1 || b.dim(0) != F) throw ShapeError("conv2d: bias must have one entry per filter");

  const auto g = detail::conv_geometry(H, W, kh, kw, pad, dilation);
  const Tensor<T> xp = detail::pad_input(x, g.ph_lead, g.ph_trail, g.pw_lead, g.pw_trail);
  const int Wp = xp.dim(3);

  Tensor<T> out = Tensor<T>::zeros({N, F, g.out_h, g.out_w});
  for (int n = 0; n < N; ++n) {
    for (int f = 0; f < F; ++f) {
      T* oplane = &out.at(n, f, 0, 0);
      std::fill(oplane, oplane + static_cast<std::int64_t>(g.out_h) * g.out_w, b.data[f]);
      for (int c = 0; c < C; ++c) {
        const T* iplane = &xp.at(n, c, 0, 0);
        for (int ki = 0; ki < kh; ++ki) {
          for (int kj = 0; kj < kw; ++kj) {
            const T wv = w.at(f, c, ki, kj);
            for (int i = 0; i < g.out_h; ++i) {
              const T* irow = iplane + static_cast<std::int64_t>(i + ki * dilation) * Wp + kj * dilation;
              T* orow = oplane + static_cast<std::int64_t>(i) * g.out_w;
              for (int j = 0; j < g.out_w; ++j) orow[j] += wv * irow[j];
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, PadMode pad, int dilation,
                     const Tensor<T>& gout, Tensor<T>& gx, Tensor<T>& gw, Tensor<T>& gb) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto g = detail::conv_geometry(H, W, kh, kw, pad, dilation);
  const Tensor<T> xp = detail::pad_input(x, g.ph_lead, g.ph_trail, g.pw_lead, g.pw_trail);
  const int Wp = xp.dim(3);

  Tensor<T> gxp = Tensor<T>::zeros(xp.shape);
  Tensor<T> dgw = Tensor<T>::zeros(w.shape);
  Tensor<T> dgb = Tensor<T>::zeros({F});

  for (int n = 0; n < N; ++n) {
    for (int f = 0; f < F; ++f) {
      const T* gplane = &gout.at(n, f, 0, 0);
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.out_h) * g.out_w; ++i)
        dgb.data[f] += gplane[i];
      for (int c = 0; c < C; ++c) {
        T* gip = &gxp.at(n, c, 0, 0);
        const T* ip = &xp.at(n, c, 0, 0);
        for (int ki = 0; ki < kh; ++ki) {
          for (int kj = 0; kj < kw; ++kj) {
            const T wv = w.at(f, c, ki, kj);
            T acc = T(0);
            for (int i = 0; i < g.out_h; ++i) {
              const std::int64_t off = static_cast<std::int64_t>(i + ki * dilation) * Wp + kj * dilation;
              T* girow = gip + off;
              const T* irow = ip + off;
              const T* grow = gplane + static_cast<std::int64_t>(i) * g.out_w;
              for (int j = 0; j < g.out_w; ++j) {
                girow[j] += wv * grow[j];
                acc += irow[j] * grow[j];
              }
            }
            dgw.at(f, c, ki, kj) += acc;
          }
        }
      }
    }
  }

  gx = detail::crop_padding(gxp, g.ph_lead, g.pw_lead, H, W);
  gw = std::move(dgw);
  gb = std::move(dgb);
}

template <class T>
Var<T> conv2d(Tape<T>& tape, Var<T> x, Var<T> w, Var<T> b, PadMode pad, int dilation) {
  Tensor<T> value = conv2d_forward(x->value, w->value, b->value, pad, dilation);
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, w, b, pad, dilation, out]() {
    Tensor<T> gx, gw, gb;
    conv2d_backward(x->value, w->value, pad, dilation, out->grad, gx, gw, gb);
    for (std::int64_t i = 0; i < gx.size(); ++i) x->grad.data[i] += gx.data[i];
    for (std::int64_t i = 0; i < gw.size(); ++i) w->grad.data[i] += gw.data[i];
    for (std::int64_t i = 0; i < gb.size(); ++i) b->grad.data[i] += gb.data[i];
  };
  return out;
}

// ---------------------------------------------------------------------------
// transposed_conv2d: 3x3 kernel, stride 2, input-side padding 1, output
// padding 1, so the output is exactly (2H, 2W).
// input [N,C,H,W], kernel [C,F,3,3], bias [F] -> [N,F,2H,2W]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> transposed_conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("transposed_conv2d: input and kernel must be 4-D");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.dim(0) != C)
    throw ShapeError("transposed_conv2d: kernel input channels " + std::to_string(w.dim(0)) +
                     " do not match input channels " + std::to_string(C));
  if (w.dim(2) != 3 || w.dim(3) != 3) throw ShapeError("transposed_conv2d: kernel must be 3x3");
  const int F = w.dim(1);
  if (b.ndim() != 1 || b.dim(0) != F)
    throw ShapeError("transposed_conv2d: bias must have one entry per filter");
  const int Ho = 2 * H, Wo = 2 * W;

  Tensor<T> out = Tensor<T>::zeros({N, F, Ho, Wo});
  for (int n = 0; n < N; ++n) {
    for (int f = 0; f < F; ++f) {
      T* oplane = &out.at(n, f, 0, 0);
      std::fill(oplane, oplane + static_cast<std::int64_t>(Ho) * Wo, b.data[f]);
      for (int c = 0; c < C; ++c) {
        const T* iplane = &x.at(n, c, 0, 0);
        for (int ki = 0; ki < 3; ++ki) {
          for (int kj = 0; kj < 3; ++kj) {
            const T wv = w.at(c, f, ki, kj);
            for (int i = 0; i < H; ++i) {
              const int oi = 2 * i + ki - 1;
              if (oi < 0 || oi >= Ho) continue;
              const T* irow = iplane + static_cast<std::int64_t>(i) * W;
              T* orow = oplane + static_cast<std::int64_t>(oi) * Wo;
              const int j0 = (kj == 0) ? 1 : 0;  // keep 2j+kj-1 in range
              const int j1 = (2 * (W - 1) + kj - 1 < Wo) ? W : W - 1;
              for (int j = j0; j < j1; ++j) orow[2 * j + kj - 1] += wv * irow[j];
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
void transposed_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gout,
                                Tensor<T>& gx, Tensor<T>& gw, Tensor<T>& gb) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(1);
  const int Ho = 2 * H, Wo = 2 * W;

  gx = Tensor<T>::zeros(x.shape);
  gw = Tensor<T>::zeros(w.shape);
  gb = Tensor<T>::zeros({F});

  for (int n = 0; n < N; ++n) {
    for (int f = 0; f < F; ++f) {
      const T* gplane = &gout.at(n, f, 0, 0);
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) gb.data[f] += gplane[i];
      for (int c = 0; c < C; ++c) {
        T* gip = &gx.at(n, c, 0, 0);
        const T* ip = &x.at(n, c, 0, 0);
        for (int ki = 0; ki < 3; ++ki) {
          for (int kj = 0; kj < 3; ++kj) {
            const T wv = w.at(c, f, ki, kj);
            T acc = T(0);
            for (int i = 0; i < H; ++i) {
              const int oi = 2 * i + ki - 1;
              if (oi < 0 || oi >= Ho) continue;
              const T* grow = gplane + static_cast<std::int64_t>(oi) * Wo;
              const int j0 = (kj == 0) ? 1 : 0;
              const int j1 = (2 * (W - 1) + kj - 1 < Wo) ? W : W - 1;
              T* girow = gip + static_cast<std::int64_t>(i) * W;
              const T* irow = ip + static_cast<std::int64_t>(i) * W;
              for (int j = j0; j < j1; ++j) {
                girow[j] += wv * grow[2 * j + kj - 1];
                acc += irow[j] * grow[2 * j + kj - 1];
              }
            }
            gw.at(c, f, ki, kj) += acc;
          }
        }
      }
    }
  }
}

template <class T>
Var<T> transposed_conv2d(Tape<T>& tape, Var<T> x, Var<T> w, Var<T> b) {
  Tensor<T> value = transposed_conv2d_forward(x->value, w->value, b->value);
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, w, b, out]() {
    Tensor<T> gx, gw, gb;
    transposed_conv2d_backward(x->value, w->value, out->grad, gx, gw, gb);
    for (std::int64_t i = 0; i < gx.size(); ++i) x->grad.data[i] += gx.data[i];
    for (std::int64_t i = 0; i < gw.size(); ++i) w->grad.data[i] += gw.data[i];
    for (std::int64_t i = 0; i < gb.size(); ++i) b->grad.data[i] += gb.data[i];
  };
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> relu(Tape<T>& tape, Var<T> x) {
  Tensor<T> value = x->value;
  for (T& v : value.data)
    if (v < T(0)) v = T(0);
  for (T v : x->value.data) tape.kink_sig.push_back(v > T(0));
  auto out = tape.record(std::move(value), nullptr);
  // subgradient at 0 is 0
  out->backprop = [x, out]() {
    for (std::int64_t i = 0; i < x->value.size(); ++i)
      if (x->value.data[i] > T(0)) x->grad.data[i] += out->grad.data[i];
  };
  return out;
}

template <class T>
Var<T> sigmoid(Tape<T>& tape, Var<T> x) {
  Tensor<T> value = x->value;
  for (T& v : value.data) {
    // split by sign to avoid exp overflow
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, out]() {
    for (std::int64_t i = 0; i < x->value.size(); ++i) {
      const T s = out->value.data[i];
      x->grad.data[i] += out->grad.data[i] * s * (T(1) - s);
    }
  };
  return out;
}

template <class T>
Var<T> add(Tape<T>& tape, Var<T> a, Var<T> b) {
  require_same_shape(a->value, b->value, "add");
  Tensor<T> value = a->value;
  for (std::int64_t i = 0; i < value.size(); ++i) value.data[i] += b->value.data[i];
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [a, b, out]() {
    for (std::int64_t i = 0; i < out->value.size(); ++i) {
      a->grad.data[i] += out->grad.data[i];
      b->grad.data[i] += out->grad.data[i];
    }
  };
  return out;
}

/// a + lambda * b, elementwise (used for the regularized total loss).
template <class T>
Var<T> add_scaled(Tape<T>& tape, Var<T> a, Var<T> b, T lambda) {
  require_same_shape(a->value, b->value, "add_scaled");
  Tensor<T> value = a->value;
  for (std::int64_t i = 0; i < value.size(); ++i) value.data[i] += lambda * b->value.data[i];
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [a, b, lambda, out]() {
    for (std::int64_t i = 0; i < out->value.size(); ++i) {
      a->grad.data[i] += out->grad.data[i];
      b->grad.data[i] += lambda * out->grad.data[i];
    }
  };
  return out;
}

template <class T>
Var<T> concat_channels(Tape<T>& tape, Var<T> a, Var<T> b) {
  const Tensor<T>& av = a->value;
  const Tensor<T>& bv = b->value;
  if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
      av.dim(3) != bv.dim(3))
    throw ShapeError("concat_channels: shapes incompatible " + av.shape_str() + " vs " + bv.shape_str());
  const int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
  Tensor<T> value = Tensor<T>::zeros({N, Ca + Cb, H, W});
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    std::copy(&av.data[n * Ca * plane], &av.data[(n + 1) * Ca * plane], &value.data[static_cast<std::size_t>(n * (Ca + Cb) * plane)]);
    std::copy(&bv.data[n * Cb * plane], &bv.data[(n + 1) * Cb * plane],
              &value.data[static_cast<std::size_t>((n * (Ca + Cb) + Ca) * plane)]);
  }
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [a, b, out, N, Ca, Cb, plane]() {
    for (int n = 0; n < N; ++n) {
      for (std::int64_t i = 0; i < Ca * plane; ++i)
        a->grad.data[static_cast<std::size_t>(n * Ca * plane + i)] +=
            out->grad.data[static_cast<std::size_t>(n * (Ca + Cb) * plane + i)];
      for (std::int64_t i = 0; i < Cb * plane; ++i)
        b->grad.data[static_cast<std::size_t>(n * Cb * plane + i)] +=
            out->grad.data[static_cast<std::size_t>((n * (Ca + Cb) + Ca) * plane + i)];
    }
  };
  return out;
}

/// Extracts one channel, [N,C,H,W] -> [N,1,H,W].
template <class T>
Var<T> slice_channel(Tape<T>& tape, Var<T> x, int channel) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() != 4 || channel < 0 || channel >= xv.dim(1))
    throw ShapeError("slice_channel: channel out of range for " + xv.shape_str());
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor<T> value = Tensor<T>::zeros({N, 1, H, W});
  for (int n = 0; n < N; ++n)
    std::copy(&xv.data[static_cast<std::size_t>((static_cast<std::int64_t>(n) * C + channel) * plane)],
              &xv.data[static_cast<std::size_t>((static_cast<std::int64_t>(n) * C + channel + 1) * plane)],
              &value.data[static_cast<std::size_t>(n * plane)]);
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, out, N, C, channel, plane]() {
    for (int n = 0; n < N; ++n)
      for (std::int64_t i = 0; i < plane; ++i)
        x->grad.data[static_cast<std::size_t>((static_cast<std::int64_t>(n) * C + channel) * plane + i)] +=
            out->grad.data[static_cast<std::size_t>(n * plane + i)];
  };
  return out;
}

// ---------------------------------------------------------------------------
// channel_max: per-pixel maximum over channels, [N,C,H,W] -> [N,1,H,W].
// Gradient routes to the lowest-index argmax channel.
// ---------------------------------------------------------------------------

template <class T>
Var<T> channel_max(Tape<T>& tape, Var<T> x) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() != 4) throw ShapeError("channel_max: input must be 4-D");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor<T> value = Tensor<T>::zeros({N, 1, H, W});
  std::vector<int> argmax(static_cast<std::size_t>(N) * H * W, 0);
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        T best = xv.at(n, 0, h, w);
        int bc = 0;
        for (int c = 1; c < C; ++c) {
          const T v = xv.at(n, c, h, w);
          if (v > best) {
            best = v;
            bc = c;
          }
        }
        value.at(n, 0, h, w) = best;
        argmax[static_cast<std::size_t>((static_cast<std::int64_t>(n) * H + h) * W + w)] = bc;
      }
  for (int a : argmax) tape.kink_sig.push_back(static_cast<std::uint8_t>(a));
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, out, argmax = std::move(argmax), N, H, W]() {
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const int c = argmax[static_cast<std::size_t>((static_cast<std::int64_t>(n) * H + h) * W + w)];
          x->grad.at(n, c, h, w) += out->grad.at(n, 0, h, w);
        }
  };
  return out;
}

// ---------------------------------------------------------------------------
// max_downsample2: 2x2 stride-2 max, ties route gradient to the first
// maximal element in row-major window order.
// ---------------------------------------------------------------------------

template <class T>
Var<T> max_downsample2(Tape<T>& tape, Var<T> x) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() != 4) throw ShapeError("max_downsample2: input must be 4-D");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H % 2 != 0 || W % 2 != 0) throw ShapeError("max_downsample2: spatial dims must be even");
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> value = Tensor<T>::zeros({N, C, Ho, Wo});
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(value.size()), 0);
  std::size_t k = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j, ++k) {
          T best = xv.at(n, c, 2 * i, 2 * j);
          int bi = 2 * i, bj = 2 * j;
          const int cand[3][2] = {{2 * i, 2 * j + 1}, {2 * i + 1, 2 * j}, {2 * i + 1, 2 * j + 1}};
          for (auto& cc : cand) {
            const T v = xv.at(n, c, cc[0], cc[1]);
            if (v > best) {
              best = v;
              bi = cc[0];
              bj = cc[1];
            }
          }
          value.at(n, c, i, j) = best;
          argmax[k] = static_cast<std::int32_t>(bi * W + bj);
        }
  for (std::int32_t a : argmax) {
    const int bi = a / W, bj = a % W;  // position within the 2x2 window
    tape.kink_sig.push_back(static_cast<std::uint8_t>((bi & 1) * 2 + (bj & 1)));
  }
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, out, argmax = std::move(argmax), N, C, H, W, Ho, Wo]() {
    std::size_t k = 0;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T* gp = &x->grad.at(n, c, 0, 0);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i, ++k)
          gp[argmax[k]] += out->grad.data[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * C + c) * Ho * Wo) + i)];
      }
  };
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_upsample: align-corners interpolation by an integer factor.
// Sample positions i*(H-1)/(fH-1); size-1 axes repeat.
// ---------------------------------------------------------------------------

struct BilinearAxis {
  std::vector<int> lo, hi;
  std::vector<double> frac;  // weight on hi
};

inline BilinearAxis bilinear_axis(int in, int out) {
  BilinearAxis a;
  a.lo.resize(static_cast<std::size_t>(out));
  a.hi.resize(static_cast<std::size_t>(out));
  a.frac.resize(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    if (in == 1 || out == 1) {
      a.lo[i] = a.hi[i] = 0;
      a.frac[i] = 0.0;
      continue;
    }
    const double pos = static_cast<double>(i) * (in - 1) / (out - 1);
    int lo = static_cast<int>(pos);
    if (lo > in - 2) lo = in - 2;
    a.lo[i] = lo;
    a.hi[i] = lo + 1;
    a.frac[i] = pos - lo;
  }
  return a;
}

template <class T>
Tensor<T> bilinear_resize_forward(const Tensor<T>& x, int out_h, int out_w) {
  if (x.ndim() != 4) throw ShapeError("bilinear_resize: input must be 4-D");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const BilinearAxis ay = bilinear_axis(H, out_h);
  const BilinearAxis ax = bilinear_axis(W, out_w);
  Tensor<T> out = Tensor<T>::zeros({N, C, out_h, out_w});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < out_h; ++i) {
        const T fy = static_cast<T>(ay.frac[i]);
        for (int j = 0; j < out_w; ++j) {
          const T fx = static_cast<T>(ax.frac[j]);
          const T v00 = x.at(n, c, ay.lo[i], ax.lo[j]);
          const T v01 = x.at(n, c, ay.lo[i], ax.hi[j]);
          const T v10 = x.at(n, c, ay.hi[i], ax.lo[j]);
          const T v11 = x.at(n, c, ay.hi[i], ax.hi[j]);
          out.at(n, c, i, j) = (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) + fy * ((T(1) - fx) * v10 + fx * v11);
        }
      }
  return out;
}

template <class T>
Var<T> bilinear_upsample(Tape<T>& tape, Var<T> x, int factor) {
  if (factor < 1) throw ShapeError("bilinear_upsample: factor must be >= 1");
  const int H = x->value.dim(2), W = x->value.dim(3);
  const int Ho = H * factor, Wo = W * factor;
  if (factor == 1) {
    auto out = tape.record(x->value, nullptr);
    out->backprop = [x, out]() {
      for (std::int64_t i = 0; i < out->value.size(); ++i) x->grad.data[i] += out->grad.data[i];
    };
    return out;
  }
  Tensor<T> value = bilinear_resize_forward(x->value, Ho, Wo);
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, out, H, W, Ho, Wo]() {
    const int N = x->value.dim(0), C = x->value.dim(1);
    const BilinearAxis ay = bilinear_axis(H, Ho);
    const BilinearAxis ax = bilinear_axis(W, Wo);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < Ho; ++i) {
          const T fy = static_cast<T>(ay.frac[i]);
          for (int j = 0; j < Wo; ++j) {
            const T fx = static_cast<T>(ax.frac[j]);
            const T g = out->grad.at(n, c, i, j);
            x->grad.at(n, c, ay.lo[i], ax.lo[j]) += (T(1) - fy) * (T(1) - fx) * g;
            x->grad.at(n, c, ay.lo[i], ax.hi[j]) += (T(1) - fy) * fx * g;
            x->grad.at(n, c, ay.hi[i], ax.lo[j]) += fy * (T(1) - fx) * g;
            x->grad.at(n, c, ay.hi[i], ax.hi[j]) += fy * fx * g;
          }
        }
  };
  return out;
}

// ---------------------------------------------------------------------------
// Crop a spatial window [y0,y0+h) x [x0,x0+w) from a 4-D tensor.
// ---------------------------------------------------------------------------

template <class T>
Var<T> crop_spatial(Tape<T>& tape, Var<T> x, int y0, int x0, int h, int w) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() != 4) throw ShapeError("crop_spatial: input must be 4-D");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (y0 < 0 || x0 < 0 || y0 + h > H || x0 + w > W || h < 1 || w < 1)
    throw ShapeError("crop_spatial: window out of bounds");
  Tensor<T> value = Tensor<T>::zeros({N, C, h, w});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < h; ++i)
        std::copy(&xv.at(n, c, y0 + i, x0), &xv.at(n, c, y0 + i, x0) + w, &value.at(n, c, i, 0));
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, out, y0, x0, h, w]() {
    const int N = x->value.dim(0), C = x->value.dim(1);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) x->grad.at(n, c, y0 + i, x0 + j) += out->grad.at(n, c, i, j);
  };
  return out;
}

/// Elementwise multiplication by a constant.
template <class T>
Var<T> scale(Tape<T>& tape, Var<T> x, T factor) {
  Tensor<T> value = x->value;
  for (T& v : value.data) v *= factor;
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, factor, out]() {
    for (std::int64_t i = 0; i < out->value.size(); ++i)
      x->grad.data[i] += factor * out->grad.data[i];
  };
  return out;
}

/// Mean over all elements -> scalar.
template <class T>
Var<T> mean_all(Tape<T>& tape, Var<T> x) {
  const std::int64_t n = x->value.size();
  T s = T(0);
  for (T v : x->value.data) s += v;
  auto out = tape.record(Tensor<T>::from({1}, {s / static_cast<T>(n)}), nullptr);
  out->backprop = [x, out, n]() {
    const T g = out->grad.data[0] / static_cast<T>(n);
    for (std::int64_t i = 0; i < n; ++i) x->grad.data[i] += g;
  };
  return out;
}

/// Sum over all elements -> scalar.
template <class T>
Var<T> sum_all(Tape<T>& tape, Var<T> x) {
  T s = T(0);
  for (T v : x->value.data) s += v;
  auto out = tape.record(Tensor<T>::from({1}, {s}), nullptr);
  out->backprop = [x, out]() {
    const T g = out->grad.data[0];
    for (std::int64_t i = 0; i < x->value.size(); ++i) x->grad.data[i] += g;
  };
  return out;
}

/// Scalar affine head: w . mean-pooled features + b. Input [N,C,1,1]-like is
/// not assumed; this takes [N,C] packed as [N,C,1,1] from global_avg.
template <class T>
Var<T> global_avg(Tape<T>& tape, Var<T> x) {
  const Tensor<T>& xv = x->value;
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor<T> value = Tensor<T>::zeros({N, C, 1, 1});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T s = T(0);
      const T* p = &xv.at(n, c, 0, 0);
      for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      value.at(n, c, 0, 0) = s / static_cast<T>(plane);
    }
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, out, N, C, plane]() {
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T g = out->grad.at(n, c, 0, 0) / static_cast<T>(plane);
        T* p = &x->grad.at(n, c, 0, 0);
        for (std::int64_t i = 0; i < plane; ++i) p[i] += g;
      }
  };
  return out;
}

/// Affine reduction of pooled features [N,C,1,1] to [N,1,1,1] logits.
template <class T>
Var<T> affine_logit(Tape<T>& tape, Var<T> x, Var<T> w, Var<T> b) {
  const int N = x->value.dim(0), C = x->value.dim(1);
  if (w->value.ndim() != 1 || w->value.dim(0) != C || b->value.size() != 1)
    throw ShapeError("affine_logit: weight/bias shape mismatch");
  Tensor<T> value = Tensor<T>::zeros({N, 1, 1, 1});
  for (int n = 0; n < N; ++n) {
    T s = b->value.data[0];
    for (int c = 0; c < C; ++c) s += w->value.data[c] * x->value.at(n, c, 0, 0);
    value.at(n, 0, 0, 0) = s;
  }
  auto out = tape.record(std::move(value), nullptr);
  out->backprop = [x, w, b, out, N, C]() {
    for (int n = 0; n < N; ++n) {
      const T g = out->grad.at(n, 0, 0, 0);
      b->grad.data[0] += g;
      for (int c = 0; c < C; ++c) {
        w->grad.data[c] += g * x->value.at(n, c, 0, 0);
        x->grad.at(n, c, 0, 0) += g * w->value.data[c];
      }
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// bce_loss: mean of -[t ln p + (1-t) ln(1-p)] over elements with nonzero
// weight; predictions clamped to [eps, 1-eps], eps = 1e-7. Zero-weight
// elements carry neither loss nor gradient.
// ---------------------------------------------------------------------------

inline constexpr double kBceEps = 1e-7;

template <class T>
Var<T> bce_loss(Tape<T>& tape, Var<T> pred, Tensor<T> target,
                std::optional<Tensor<T>> weights = std::nullopt) {
  require_same_shape(pred->value, target, "bce_loss");
  if (weights) require_same_shape(pred->value, *weights, "bce_loss weights");
  const std::int64_t n = pred->value.size();
  const T eps = static_cast<T>(kBceEps);

  T sum = T(0);
  std::int64_t active = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T w = weights ? weights->data[i] : T(1);
    if (w == T(0)) continue;
    const T p = std::clamp(pred->value.data[i], eps, T(1) - eps);
    const T t = target.data[i];
    sum += w * -(t * std::log(p) + (T(1) - t) * std::log(T(1) - p));
    tape.kink_sig.push_back(p != pred->value.data[i]);  // clamp engaged
    ++active;
  }
  const T loss = active ? sum / static_cast<T>(active) : T(0);
  auto out = tape.record(Tensor<T>::from({1}, {loss}), nullptr);
  out->backprop = [pred, target = std::move(target), weights = std::move(weights), out, n, eps,
                   active]() {
    if (!active) return;
    const T g = out->grad.data[0] / static_cast<T>(active);
    for (std::int64_t i = 0; i < n; ++i) {
      const T w = weights ? weights->data[i] : T(1);
      if (w == T(0)) continue;
      const T raw = pred->value.data[i];
      if (raw < eps || raw > T(1) - eps) continue;  // clamped region is flat
      const T t = target.data[i];
      pred->grad.data[i] += g * w * (-(t / raw) + (T(1) - t) / (T(1) - raw));
    }
  };
  return out;
}

// ---------------------------------------------------------------------------
// grad_check: analytic vs central-difference gradients. The builder must be
// deterministic; returns the max per-coordinate relative error
// |a - n| / max(1e-8, |a| + |n|).
// ---------------------------------------------------------------------------

using GradCheckBuilder =
    std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline double grad_check(const GradCheckBuilder& builder, std::vector<Tensor<double>> inputs,
                         double eps = 1e-4) {
  auto eval = [&](const std::vector<Tensor<double>>& xs, std::vector<std::uint8_t>& sig) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.leaf(x, true));
    Var<double> loss = builder(tape, vars);
    sig = std::move(tape.kink_sig);
    return loss->value.data[0];
  };

  // analytic pass
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
  Var<double> loss = builder(tape, vars);
  tape.backward(loss);

  double worst = 0.0;
  std::vector<std::uint8_t> sig_p, sig_m;
  for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
    for (std::int64_t i = 0; i < inputs[vi].size(); ++i) {
      const double orig = inputs[vi].data[i];
      inputs[vi].data[i] = orig + eps;
      const double fp = eval(inputs, sig_p);
      inputs[vi].data[i] = orig - eps;
      const double fm = eval(inputs, sig_m);
      inputs[vi].data[i] = orig;
      if (sig_p != sig_m) continue;  // coordinate straddles a ReLU/max kink
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = vars[vi]->grad.data[i];
      const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace upd
