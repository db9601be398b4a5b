#include <cmath>
#include <random>

#include "updseg/trainer.hpp"

namespace upd {

/// Each sample is a dark filled ellipse (the lesion) on a brighter textured
/// background; high contrast keeps small models trainable in a few steps.
std::vector<Sample> make_synthetic_dataset(int count, int size, std::uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  for (int idx = 0; idx < count; ++idx) {
    Sample s;
    s.id = "synthetic" + std::to_string(idx);
    s.image = Tensor<float>::zeros({3, size, size});
    s.mask = Tensor<float>::zeros({size, size});

    const double cx = size * (0.35 + 0.3 * uni(rng));
    const double cy = size * (0.35 + 0.3 * uni(rng));
    const double rx = size * (0.18 + 0.14 * uni(rng));
    const double ry = size * (0.18 + 0.14 * uni(rng));
    const double angle = uni(rng) * 3.14159265358979;
    const double ca = std::cos(angle), sa = std::sin(angle);

    // smooth low-frequency texture phases
    const double px = uni(rng) * 6.28, py = uni(rng) * 6.28;
    const double base[3] = {0.62 + 0.1 * uni(rng), 0.5 + 0.1 * uni(rng), 0.45 + 0.1 * uni(rng)};
    const double lesion[3] = {0.28 + 0.06 * uni(rng), 0.18 + 0.06 * uni(rng),
                              0.15 + 0.06 * uni(rng)};

    std::normal_distribution<double> pixel_noise(0.0, 0.015);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u = (ca * dx + sa * dy) / rx;
        const double v = (-sa * dx + ca * dy) / ry;
        const bool inside = u * u + v * v <= 1.0;
        if (inside) s.mask.at(y, x) = 1.0f;
        const double texture =
            0.05 * std::sin(0.13 * x + px) * std::cos(0.11 * y + py);
        for (int c = 0; c < 3; ++c) {
          double val = (inside ? lesion[c] : base[c] + texture) + pixel_noise(rng);
          s.image.data[static_cast<std::size_t>((c * size + y) * size + x)] =
              static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
      }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace upd
