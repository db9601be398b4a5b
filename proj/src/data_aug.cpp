#include "updseg/data_aug.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "updseg/netpbm.hpp"
#include "updseg/ops.hpp"

namespace fs = std::filesystem;

namespace upd {

Tensor<float> binarize_mask(const Tensor<float>& gray) {
  Tensor<float> out = gray;
  for (float& v : out.data) v = (v >= 0.5f) ? 1.0f : 0.0f;
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output dims must be >= 1");
  const bool flat = image.ndim() == 2;
  if (!flat && image.ndim() != 3) throw ShapeError("resize_bilinear: expected [C,H,W] or [H,W]");
  const int C = flat ? 1 : image.dim(0);
  const int H = flat ? image.dim(0) : image.dim(1);
  const int W = flat ? image.dim(1) : image.dim(2);
  if (H == out_h && W == out_w) return image;

  Tensor<float> in4 = image;
  in4.shape = {1, C, H, W};
  Tensor<float> out4 = bilinear_resize_forward(in4, out_h, out_w);
  out4.shape = flat ? std::vector<int>{out_h, out_w} : std::vector<int>{C, out_h, out_w};
  return out4;
}

namespace {

void flip_h(Tensor<float>& t) {
  const int C = t.ndim() == 3 ? t.dim(0) : 1;
  const int H = t.ndim() == 3 ? t.dim(1) : t.dim(0);
  const int W = t.ndim() == 3 ? t.dim(2) : t.dim(1);
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h) {
      float* row = &t.data[static_cast<std::size_t>((static_cast<std::int64_t>(c) * H + h) * W)];
      std::reverse(row, row + W);
    }
}

void flip_v(Tensor<float>& t) {
  const int C = t.ndim() == 3 ? t.dim(0) : 1;
  const int H = t.ndim() == 3 ? t.dim(1) : t.dim(0);
  const int W = t.ndim() == 3 ? t.dim(2) : t.dim(1);
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H / 2; ++h) {
      float* a = &t.data[static_cast<std::size_t>((static_cast<std::int64_t>(c) * H + h) * W)];
      float* b = &t.data[static_cast<std::size_t>((static_cast<std::int64_t>(c) * H + (H - 1 - h)) * W)];
      std::swap_ranges(a, a + W, b);
    }
}

Tensor<float> crop_chw(const Tensor<float>& t, int y0, int x0, int side) {
  const bool flat = t.ndim() == 2;
  const int C = flat ? 1 : t.dim(0);
  const int H = flat ? t.dim(0) : t.dim(1);
  const int W = flat ? t.dim(1) : t.dim(2);
  Tensor<float> out = Tensor<float>::zeros(flat ? std::vector<int>{side, side}
                                               : std::vector<int>{C, side, side});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < side; ++h) {
      const float* src =
          &t.data[static_cast<std::size_t>((static_cast<std::int64_t>(c) * H + y0 + h) * W + x0)];
      std::copy(src, src + side,
                &out.data[static_cast<std::size_t>((static_cast<std::int64_t>(c) * side + h) * side)]);
    }
  return out;
}

}  // namespace

Sample augment(const Sample& sample, const AugPolicy& policy, std::uint64_t rng_seed) {
  if (sample.image.ndim() != 3 || sample.image.dim(0) != 3 || sample.mask.ndim() != 2 ||
      sample.image.dim(1) != sample.mask.dim(0) || sample.image.dim(2) != sample.mask.dim(1))
    throw ShapeError("augment: expected [3,H,W] image with matching [H,W] mask");

  std::mt19937_64 rng(rng_seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  // fixed draw order keeps the transform a pure function of the seed
  const bool do_hflip = uni(rng) < policy.p_hflip;
  const bool do_vflip = uni(rng) < policy.p_vflip;
  const double crop_scale =
      policy.crop_scale_lo + uni(rng) * (policy.crop_scale_hi - policy.crop_scale_lo);
  const double crop_u = uni(rng), crop_v = uni(rng);
  const double brightness =
      policy.brightness_lo + uni(rng) * (policy.brightness_hi - policy.brightness_lo);
  const double contrast = policy.contrast_lo + uni(rng) * (policy.contrast_hi - policy.contrast_lo);
  const double sigma =
      policy.noise_sigma_lo + uni(rng) * (policy.noise_sigma_hi - policy.noise_sigma_lo);

  Sample out;
  out.id = sample.id;
  out.image = sample.image;
  out.mask = sample.mask;
  const int H = out.image.dim(1), W = out.image.dim(2);

  if (do_hflip) {
    flip_h(out.image);
    flip_h(out.mask);
  }
  if (do_vflip) {
    flip_v(out.image);
    flip_v(out.mask);
  }

  // square crop of the chosen scale, identical region on image and mask,
  // resized back to the original size
  const int side = std::max(1, static_cast<int>(std::lround(crop_scale * std::min(H, W))));
  if (side < std::min(H, W)) {
    const int y0 = static_cast<int>(std::lround(crop_v * (H - side)));
    const int x0 = static_cast<int>(std::lround(crop_u * (W - side)));
    out.image = resize_bilinear(crop_chw(out.image, y0, x0, side), H, W);
    out.mask = binarize_mask(resize_bilinear(crop_chw(out.mask, y0, x0, side), H, W));
  }

  // photometric transforms touch the image only
  if (brightness != 0.0)
    for (float& v : out.image.data) v += static_cast<float>(brightness);
  if (contrast != 1.0) {
    double mean = 0.0;
    for (float v : out.image.data) mean += v;
    mean /= static_cast<double>(out.image.size());
    for (float& v : out.image.data)
      v = static_cast<float>(mean + contrast * (v - mean));
  }
  if (sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (float& v : out.image.data) v += static_cast<float>(noise(rng));
  }
  if (brightness != 0.0 || contrast != 1.0 || sigma > 0.0)
    for (float& v : out.image.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

PairedInput prepare_pair(const Sample& sample, int S) {
  if (S % 32 != 0) throw ShapeError("prepare_pair: S must be divisible by 32");
  // the canonical 512x512 intermediate mirrors the training pipeline order
  Tensor<float> canon_img = resize_bilinear(sample.image, 512, 512);
  Tensor<float> canon_mask = resize_bilinear(sample.mask, 512, 512);
  PairedInput p;
  p.scanet_in = resize_bilinear(canon_img, S, S);
  p.updcnn_in = resize_bilinear(canon_img, S / 8, S / 8);
  p.target = binarize_mask(resize_bilinear(canon_mask, S, S));
  return p;
}

ScanResult dataset_scan(const std::string& dir) {
  const fs::path images = fs::path(dir) / "images";
  const fs::path masks = fs::path(dir) / "masks";
  std::error_code ec;
  if (!fs::is_directory(images, ec)) throw IoError("cannot read directory '" + images.string() + "'");

  ScanResult r;
  std::vector<std::string> candidates;
  for (const auto& entry : fs::directory_iterator(images)) {
    if (entry.path().extension() == ".ppm") candidates.push_back(entry.path().stem().string());
  }
  std::sort(candidates.begin(), candidates.end());
  for (const std::string& id : candidates) {
    const fs::path mask_path = masks / (id + "_segmentation.pgm");
    if (!fs::exists(mask_path)) {
      r.warnings.push_back("id '" + id + "': no matching mask, skipped");
      continue;
    }
    const PnmHeader ih = read_pnm_header((images / (id + ".ppm")).string());
    const PnmHeader mh = read_pnm_header(mask_path.string());
    if (ih.width != mh.width || ih.height != mh.height) {
      r.warnings.push_back("id '" + id + "': image is " + std::to_string(ih.width) + "x" +
                           std::to_string(ih.height) + " but mask is " + std::to_string(mh.width) +
                           "x" + std::to_string(mh.height) + ", skipped");
      continue;
    }
    r.ids.push_back(id);
  }
  return r;
}

Sample load_sample(const std::string& dir, const std::string& id) {
  Sample s;
  s.id = id;
  s.image = load_ppm((fs::path(dir) / "images" / (id + ".ppm")).string());
  s.mask = binarize_mask(load_pgm((fs::path(dir) / "masks" / (id + "_segmentation.pgm")).string()));
  return s;
}

}  // namespace upd
