#pragma once

#include <string>
#include <vector>

#include "updseg/tensor.hpp"

namespace upd {

/// A paired RGB image ([3,H,W], values in [0,1]) and binary mask ([H,W]).
struct Sample {
  Tensor<float> image;
  Tensor<float> mask;
  std::string id;
};

struct AugPolicy {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double brightness_lo = -0.2, brightness_hi = 0.2;
  double contrast_lo = 0.8, contrast_hi = 1.2;
  double noise_sigma_lo = 0.0, noise_sigma_hi = 0.05;
  double crop_scale_lo = 0.8, crop_scale_hi = 1.0;
};

/// The size-paired views the two networks consume: scanet at SxS, updcnn at
/// (S/8)x(S/8), target at SxS.
struct PairedInput {
  Tensor<float> scanet_in;  // [3,S,S]
  Tensor<float> updcnn_in;  // [3,S/8,S/8]
  Tensor<float> target;     // [S,S] binary
};

struct ScanResult {
  std::vector<std::string> ids;
  std::vector<std::string> warnings;
};

/// value >= 0.5 -> 1, else 0; idempotent.
Tensor<float> binarize_mask(const Tensor<float>& gray);

/// Align-corners bilinear resize of a [C,H,W] (or [H,W]) tensor. Identical
/// sizes return the input bit-exactly.
Tensor<float> resize_bilinear(const Tensor<float>& image, int out_h, int out_w);

/// Seed-deterministic augmentation: flips and a square crop applied
/// identically to image and mask, then brightness/contrast/Gaussian noise on
/// the image only, clamped to [0,1]. The mask is re-binarized after
/// geometric resampling.
Sample augment(const Sample& sample, const AugPolicy& policy, std::uint64_t rng_seed);

/// Canonical 512x512 resize, then the S / S/8 views; the target is
/// binarized. Mean subtraction is deliberately left to the scanet branch.
PairedInput prepare_pair(const Sample& sample, int S = 320);

/// Sorted ids with both `images/<id>.ppm` and `masks/<id>_segmentation.pgm`;
/// orphans and dimension mismatches are reported as warnings.
ScanResult dataset_scan(const std::string& dir);

/// Loads one sample (image + binarized mask) from the dataset layout.
Sample load_sample(const std::string& dir, const std::string& id);

}  // namespace upd
