#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "updseg/ops.hpp"

using namespace upd;

namespace {

// Independent nested-loop convolution oracle (Same/Valid, dilated taps).
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                           const Tensor<double>& b, PadMode pad, int dil) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int eh = kh + (kh - 1) * (dil - 1), ew = kw + (kw - 1) * (dil - 1);
  const int ph = pad == PadMode::Same ? (eh - 1) / 2 : 0;
  const int pw = pad == PadMode::Same ? (ew - 1) / 2 : 0;
  const int Ho = pad == PadMode::Same ? H : H - eh + 1;
  const int Wo = pad == PadMode::Same ? W : W - ew + 1;
  Tensor<double> out = Tensor<double>::zeros({N, F, Ho, Wo});
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          double s = b.data[static_cast<std::size_t>(f)];
          for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                const int yi = i - ph + ki * dil;
                const int xj = j - pw + kj * dil;
                if (yi < 0 || yi >= H || xj < 0 || xj >= W) continue;
                s += x.at(n, c, yi, xj) * w.at(f, c, ki, kj);
              }
          out.at(n, f, i, j) = s;
        }
  return out;
}

// Independent scatter-accumulate oracle for the stride-2/pad-1/outpad-1
// transposed convolution.
Tensor<double> deconv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                             const Tensor<double>& b) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int F = w.dim(1);
  Tensor<double> out = Tensor<double>::zeros({N, F, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int i = 0; i < 2 * H; ++i)
        for (int j = 0; j < 2 * W; ++j) out.at(n, f, i, j) = b.data[static_cast<std::size_t>(f)];
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int f = 0; f < F; ++f)
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                const int oi = 2 * i + ki - 1, oj = 2 * j + kj - 1;
                if (oi < 0 || oi >= 2 * H || oj < 0 || oj >= 2 * W) continue;
                out.at(n, f, oi, oj) += x.at(n, c, i, j) * w.at(c, f, ki, kj);
              }
  return out;
}

Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t = Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = d(rng);
  return t;
}

// inflate inserts a zero row/column between kernel taps
Tensor<double> inflate_kernel(const Tensor<double>& w) {
  const int F = w.dim(0), C = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  Tensor<double> out = Tensor<double>::zeros({F, C, 2 * kh - 1, 2 * kw - 1});
  for (int f = 0; f < F; ++f)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j < kw; ++j) out.at(f, c, 2 * i, 2 * j) = w.at(f, c, i, j);
  return out;
}

}  // namespace

TEST_CASE("tensor construction") {
  auto z = Tensor<double>::full({2, 2}, 0.0);
  CHECK(z.size() == 4);
  for (double v : z.data) CHECK(v == 0.0);

  auto s = Tensor<double>::from({1}, {3.5});
  CHECK(s.data[0] == 3.5);

  CHECK_THROWS_AS(Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>::zeros({0, 3}), ShapeError);
}

TEST_CASE("conv2d hand example") {
  auto x = Tensor<double>::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto b = Tensor<double>::zeros({1});
  auto y = conv2d_forward(x, w, b, PadMode::Same, 1);
  CHECK(y.at(0, 0, 1, 1) == doctest::Approx(45.0));
  CHECK(y.at(0, 0, 0, 0) == doctest::Approx(12.0));
  auto ref = conv_oracle(x, w, b, PadMode::Same, 1);
  for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref.data[i]));
}

TEST_CASE("conv2d matches the nested-loop oracle on random cases") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const int C = 1 + static_cast<int>(rng() % 3), F = 1 + static_cast<int>(rng() % 3);
    const int H = 5 + static_cast<int>(rng() % 6), W = 5 + static_cast<int>(rng() % 6);
    const int dil = 1 + static_cast<int>(rng() % 2);
    const PadMode pad = (rng() % 2) ? PadMode::Same : PadMode::Valid;
    auto x = random_tensor({2, C, H, W}, rng);
    auto w = random_tensor({F, C, 3, 3}, rng);
    auto b = random_tensor({F}, rng);
    auto y = conv2d_forward(x, w, b, pad, dil);
    auto ref = conv_oracle(x, w, b, pad, dil);
    REQUIRE(y.shape == ref.shape);
    for (std::int64_t i = 0; i < y.size(); ++i)
      CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("dilation-2 equals zero-inflated kernel at dilation 1") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 10; ++rep) {
    auto x = random_tensor({1, 2, 9, 9}, rng);
    auto w = random_tensor({2, 2, 3, 3}, rng);
    auto b = random_tensor({2}, rng);
    auto a = conv2d_forward(x, w, b, PadMode::Same, 2);
    auto c = conv2d_forward(x, inflate_kernel(w), b, PadMode::Same, 1);
    REQUIRE(a.shape == c.shape);
    for (std::int64_t i = 0; i < a.size(); ++i)
      CHECK(std::abs(a.data[i] - c.data[i]) < 1e-12);
  }
}

TEST_CASE("3x3 dilation-2 kernel has effective extent 5") {
  CHECK(effective_extent(3, 2) == 5);
  std::mt19937_64 rng(3);
  auto x = random_tensor({1, 1, 5, 5}, rng);
  auto w = random_tensor({1, 1, 3, 3}, rng);
  auto b = Tensor<double>::zeros({1});
  auto y = conv2d_forward(x, w, b, PadMode::Valid, 2);
  CHECK(y.dim(2) == 1);
  CHECK(y.dim(3) == 1);
}

TEST_CASE("conv2d edge cases") {
  std::mt19937_64 rng(5);
  auto x = random_tensor({1, 2, 6, 6}, rng);

  SUBCASE("zero kernel gives constant bias output") {
    auto w = Tensor<double>::zeros({3, 2, 3, 3});
    auto b = Tensor<double>::from({3}, {1.5, -2.0, 0.25});
    auto y = conv2d_forward(x, w, b, PadMode::Same, 1);
    for (int f = 0; f < 3; ++f)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) CHECK(y.at(0, f, i, j) == b.data[static_cast<std::size_t>(f)]);
  }
  SUBCASE("channel mismatch throws") {
    auto w = Tensor<double>::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d_forward(x, w, Tensor<double>::zeros({1}), PadMode::Same, 1), ShapeError);
  }
  SUBCASE("oversized effective extent throws") {
    auto w = Tensor<double>::zeros({1, 2, 3, 3});
    auto small = random_tensor({1, 2, 4, 4}, rng);
    CHECK_THROWS_AS(conv2d_forward(small, w, Tensor<double>::zeros({1}), PadMode::Valid, 2),
                    ShapeError);
  }
  SUBCASE("linearity in the input with zero bias") {
    auto w = random_tensor({2, 2, 3, 3}, rng);
    auto b = Tensor<double>::zeros({2});
    const double alpha = 3.7;
    Tensor<double> xs = x;
    for (auto& v : xs.data) v *= alpha;
    auto y1 = conv2d_forward(xs, w, b, PadMode::Same, 1);
    auto y2 = conv2d_forward(x, w, b, PadMode::Same, 1);
    for (std::int64_t i = 0; i < y1.size(); ++i)
      CHECK(y1.data[i] == doctest::Approx(alpha * y2.data[i]).epsilon(1e-9));
  }
}

TEST_CASE("transposed_conv2d doubles and matches the scatter oracle") {
  std::mt19937_64 rng(13);
  auto x = random_tensor({1, 8, 5, 5}, rng);
  auto w = random_tensor({8, 4, 3, 3}, rng);
  auto b = random_tensor({4}, rng);
  auto y = transposed_conv2d_forward(x, w, b);
  CHECK(y.shape == std::vector<int>{1, 4, 10, 10});
  auto ref = deconv_oracle(x, w, b);
  for (std::int64_t i = 0; i < y.size(); ++i)
    CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-12));

  SUBCASE("zero input, zero bias gives zero output") {
    auto y0 = transposed_conv2d_forward(Tensor<double>::zeros({1, 8, 5, 5}), w,
                                        Tensor<double>::zeros({4}));
    for (double v : y0.data) CHECK(v == 0.0);
  }
  SUBCASE("single-pixel input") {
    auto x1 = Tensor<double>::from({1, 1, 1, 1}, {1.0});
    auto w1 = random_tensor({1, 1, 3, 3}, rng);
    auto y1 = transposed_conv2d_forward(x1, w1, Tensor<double>::zeros({1}));
    auto r1 = deconv_oracle(x1, w1, Tensor<double>::zeros({1}));
    CHECK(y1.shape == std::vector<int>{1, 1, 2, 2});
    for (std::int64_t i = 0; i < 4; ++i) CHECK(y1.data[i] == doctest::Approx(r1.data[i]));
  }
  SUBCASE("channel mismatch throws") {
    CHECK_THROWS_AS(transposed_conv2d_forward(x, random_tensor({7, 4, 3, 3}, rng), b), ShapeError);
  }
}

TEST_CASE("relu") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::from({3}, {-1, 0, 2}), true);
  auto y = relu(tape, x);
  CHECK(y->value.data == std::vector<double>{0, 0, 2});

  auto loss = sum_all(tape, y);
  tape.backward(loss);
  CHECK(x->grad.data == std::vector<double>{0, 0, 1});
}

TEST_CASE("add") {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>::from({2}, {1, 2}), true);
  auto b = tape.leaf(Tensor<double>::from({2}, {3, 4}), true);
  auto y = add(tape, a, b);
  CHECK(y->value.data == std::vector<double>{4, 6});

  auto z = tape.leaf(Tensor<double>::zeros({2}), false);
  auto id = add(tape, a, z);
  CHECK(id->value.data == a->value.data);

  auto c = tape.leaf(Tensor<double>::zeros({2, 3}), false);
  auto d = tape.leaf(Tensor<double>::zeros({3, 2}), false);
  CHECK_THROWS_AS(add(tape, c, d), ShapeError);
}

TEST_CASE("bilinear upsample") {
  SUBCASE("constant stays constant") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::full({1, 1, 3, 3}, 7.0), false);
    auto y = bilinear_upsample(tape, x, 4);
    CHECK(y->value.shape == std::vector<int>{1, 1, 12, 12});
    for (double v : y->value.data) CHECK(v == doctest::Approx(7.0));
  }
  SUBCASE("align-corners hand values") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::from({1, 1, 2, 2}, {0, 2, 2, 4}), false);
    auto y = bilinear_upsample(tape, x, 2);
    // positions i*(H-1)/(fH-1) = i/3
    CHECK(y->value.at(0, 0, 0, 0) == doctest::Approx(0.0));
    CHECK(y->value.at(0, 0, 0, 1) == doctest::Approx(2.0 / 3));
    CHECK(y->value.at(0, 0, 0, 2) == doctest::Approx(4.0 / 3));
    CHECK(y->value.at(0, 0, 0, 3) == doctest::Approx(2.0));
  }
  SUBCASE("factor 1 is bit-identical") {
    Tape<double> tape;
    std::mt19937_64 rng(2);
    auto t = random_tensor({1, 2, 4, 4}, rng);
    auto x = tape.leaf(t, false);
    auto y = bilinear_upsample(tape, x, 1);
    CHECK(y->value.data == t.data);
  }
  SUBCASE("degenerate axis repeats") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::from({1, 1, 1, 2}, {1, 3}), false);
    auto y = bilinear_upsample(tape, x, 2);
    CHECK(y->value.shape == std::vector<int>{1, 1, 2, 4});
    CHECK(y->value.at(0, 0, 0, 0) == doctest::Approx(1.0));
    CHECK(y->value.at(0, 0, 1, 0) == doctest::Approx(1.0));
  }
  SUBCASE("outputs stay within input min/max") {
    std::mt19937_64 rng(17);
    Tape<double> tape;
    auto t = random_tensor({1, 1, 5, 5}, rng, -10, 10);
    const double lo = *std::min_element(t.data.begin(), t.data.end());
    const double hi = *std::max_element(t.data.begin(), t.data.end());
    auto y = bilinear_upsample(tape, tape.leaf(t, false), 3);
    for (double v : y->value.data) {
      CHECK(v >= lo - 1e-12);
      CHECK(v <= hi + 1e-12);
    }
  }
}

TEST_CASE("channel_max") {
  Tape<double> tape;
  SUBCASE("single channel is identity") {
    std::mt19937_64 rng(1);
    auto t = random_tensor({1, 1, 3, 3}, rng);
    auto y = channel_max(tape, tape.leaf(t, false));
    CHECK(y->value.data == t.data);
  }
  SUBCASE("picks the max and routes ties to channel 0") {
    auto x = tape.leaf(Tensor<double>::from({1, 2, 1, 2}, {0.3, 0.5, 0.7, 0.5}), true);
    auto y = channel_max(tape, x);
    CHECK(y->value.at(0, 0, 0, 0) == doctest::Approx(0.7));
    CHECK(y->value.at(0, 0, 0, 1) == doctest::Approx(0.5));
    auto loss = sum_all(tape, y);
    tape.backward(loss);
    CHECK(x->grad.at(0, 0, 0, 0) == 0.0);  // 0.3 < 0.7
    CHECK(x->grad.at(0, 1, 0, 0) == 1.0);
    CHECK(x->grad.at(0, 0, 0, 1) == 1.0);  // tie -> lowest channel
    CHECK(x->grad.at(0, 1, 0, 1) == 0.0);
  }
  SUBCASE("dominates every channel") {
    std::mt19937_64 rng(23);
    auto t = random_tensor({2, 4, 3, 3}, rng, -10, 10);
    auto y = channel_max(tape, tape.leaf(t, false));
    for (int n = 0; n < 2; ++n)
      for (int h = 0; h < 3; ++h)
        for (int w = 0; w < 3; ++w) {
          bool hit = false;
          for (int c = 0; c < 4; ++c) {
            CHECK(y->value.at(n, 0, h, w) >= t.at(n, c, h, w));
            if (y->value.at(n, 0, h, w) == t.at(n, c, h, w)) hit = true;
          }
          CHECK(hit);
        }
  }
}

TEST_CASE("sigmoid") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::from({3}, {0.0, -50.0, 50.0}), true);
  auto y = sigmoid(tape, x);
  CHECK(y->value.data[0] == doctest::Approx(0.5));
  CHECK(y->value.data[1] < 1e-6);
  CHECK(y->value.data[2] > 1.0 - 1e-6);
  CHECK(std::isfinite(y->value.data[1]));

  auto loss = sum_all(tape, y);
  tape.backward(loss);
  CHECK(x->grad.data[0] == doctest::Approx(0.25));
}

TEST_CASE("bce_loss") {
  SUBCASE("analytic value at p=0.5, t=1") {
    Tape<double> tape;
    auto p = tape.leaf(Tensor<double>::from({1}, {0.5}), true);
    auto l = bce_loss(tape, p, Tensor<double>::from({1}, {1.0}));
    CHECK(l->value.data[0] == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("perfect prediction is near zero") {
    Tape<double> tape;
    auto p = tape.leaf(Tensor<double>::from({2}, {1.0, 0.0}), false);
    auto l = bce_loss(tape, p, Tensor<double>::from({2}, {1.0, 0.0}));
    CHECK(l->value.data[0] < 1e-6);
  }
  SUBCASE("zero weight excludes an element") {
    Tape<double> tape;
    auto p = tape.leaf(Tensor<double>::from({2}, {0.3, 0.9}), true);
    auto l = bce_loss(tape, p, Tensor<double>::from({2}, {1.0, 0.0}),
                      std::optional<Tensor<double>>(Tensor<double>::from({2}, {1.0, 0.0})));
    CHECK(l->value.data[0] == doctest::Approx(-std::log(0.3)));
    tape.backward(l);
    CHECK(p->grad.data[1] == 0.0);
  }
  SUBCASE("shape mismatch throws") {
    Tape<double> tape;
    auto p = tape.leaf(Tensor<double>::from({2}, {0.3, 0.9}), false);
    CHECK_THROWS_AS(bce_loss(tape, p, Tensor<double>::zeros({3})), ShapeError);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives all-ones gradient") {
    Tape<double> tape;
    std::mt19937_64 rng(9);
    auto x = tape.leaf(random_tensor({2, 3}, rng), true);
    auto loss = sum_all(tape, x);
    tape.backward(loss);
    for (double g : x->grad.data) CHECK(g == 1.0);
  }
  SUBCASE("relu of all-negative input gives zero gradient") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::from({3}, {-1, -2, -3}), true);
    auto loss = sum_all(tape, relu(tape, x));
    tape.backward(loss);
    for (double g : x->grad.data) CHECK(g == 0.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::zeros({2}), true);
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
  }
  SUBCASE("gradients accumulate across reuse") {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>::from({2}, {1, 2}), true);
    auto loss = sum_all(tape, add(tape, x, x));
    tape.backward(loss);
    for (double g : x->grad.data) CHECK(g == 2.0);
  }
}

TEST_CASE("grad_check") {
  std::mt19937_64 rng(31);

  SUBCASE("linear loss is exact") {
    auto builder = [](Tape<double>& tape, const std::vector<Var<double>>& in) {
      return sum_all(tape, scale(tape, in[0], 3.0));
    };
    CHECK(grad_check(builder, {random_tensor({4}, rng)}, 1e-4) < 1e-10);
  }

  SUBCASE("conv2d chain") {
    auto x = random_tensor({1, 2, 6, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({3}, rng);
    Tensor<double> target = Tensor<double>::zeros({1, 3, 6, 6});
    for (auto& v : target.data) v = (rng() % 2) ? 1.0 : 0.0;
    auto builder = [target](Tape<double>& tape, const std::vector<Var<double>>& in) {
      auto y = conv2d(tape, in[0], in[1], in[2], PadMode::Same, 1);
      return bce_loss(tape, sigmoid(tape, relu(tape, y)), target);
    };
    CHECK(grad_check(builder, {x, w, b}, 1e-4) < 1e-4);
  }

  SUBCASE("dilated conv, transposed conv, upsample, channel_max chain") {
    auto x = random_tensor({1, 2, 6, 6}, rng);
    auto w1 = random_tensor({4, 2, 3, 3}, rng);
    auto b1 = random_tensor({4}, rng);
    auto w2 = random_tensor({4, 2, 3, 3}, rng);
    auto b2 = random_tensor({2}, rng);
    auto builder = [](Tape<double>& tape, const std::vector<Var<double>>& in) {
      auto y = conv2d(tape, in[0], in[1], in[2], PadMode::Same, 2);
      y = transposed_conv2d(tape, y, in[3], in[4]);
      y = channel_max(tape, y);
      y = bilinear_upsample(tape, y, 2);
      return mean_all(tape, sigmoid(tape, y));
    };
    CHECK(grad_check(builder, {x, w1, b1, w2, b2}, 1e-4) < 1e-4);
  }

  SUBCASE("max_downsample2 away from ties") {
    auto x = random_tensor({1, 2, 4, 4}, rng);
    auto builder = [](Tape<double>& tape, const std::vector<Var<double>>& in) {
      return mean_all(tape, max_downsample2(tape, in[0]));
    };
    CHECK(grad_check(builder, {x}, 1e-4) < 1e-4);
  }

  SUBCASE("corrupted backward rule is detected") {
    // forward 2x, backward pretending the factor was 1
    auto broken_double = [](Tape<double>& tape, Var<double> x) {
      Tensor<double> v = x->value;
      for (auto& e : v.data) e *= 2.0;
      auto out = tape.record(std::move(v), nullptr);
      out->backprop = [x, out]() {
        for (std::int64_t i = 0; i < out->value.size(); ++i)
          x->grad.data[i] += out->grad.data[i];
      };
      return out;
    };
    auto builder = [&](Tape<double>& tape, const std::vector<Var<double>>& in) {
      return sum_all(tape, broken_double(tape, in[0]));
    };
    CHECK(grad_check(builder, {random_tensor({3}, rng)}, 1e-4) > 1e-2);
  }
}

TEST_CASE("finite inputs never produce NaN/Inf") {
  std::mt19937_64 rng(101);
  for (int rep = 0; rep < 10; ++rep) {
    Tape<double> tape;
    auto x = tape.leaf(random_tensor({1, 2, 6, 6}, rng, -10, 10), true);
    auto w = tape.leaf(random_tensor({3, 2, 3, 3}, rng, -10, 10), true);
    auto b = tape.leaf(random_tensor({3}, rng, -10, 10), true);
    auto y = conv2d(tape, x, w, b, PadMode::Same, 2);
    y = relu(tape, y);
    y = channel_max(tape, y);
    y = bilinear_upsample(tape, y, 2);
    auto p = sigmoid(tape, y);
    Tensor<double> t = Tensor<double>::zeros(p->value.shape);
    auto loss = bce_loss(tape, p, t);
    tape.backward(loss);
    for (double v : loss->value.data) CHECK(std::isfinite(v));
    for (double v : y->value.data) CHECK(std::isfinite(v));
    for (double v : x->grad.data) CHECK(std::isfinite(v));
    for (double v : w->grad.data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("max_downsample2 forward") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::from({1, 1, 2, 4}, {1, 2, 5, 5, 3, 4, 5, 0}), true);
  auto y = max_downsample2(tape, x);
  CHECK(y->value.shape == std::vector<int>{1, 1, 1, 2});
  CHECK(y->value.at(0, 0, 0, 0) == 4.0);
  CHECK(y->value.at(0, 0, 0, 1) == 5.0);
  auto loss = sum_all(tape, y);
  tape.backward(loss);
  // tie in the second window resolves to the first maximal element
  CHECK(x->grad.at(0, 0, 0, 2) == 1.0);
  CHECK(x->grad.at(0, 0, 0, 3) == 0.0);
  CHECK(x->grad.at(0, 0, 1, 2) == 0.0);
}
