#pragma once

#include <string>

#include "updseg/tensor.hpp"

namespace upd {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PnmHeader {
  std::string magic;  // "P2", "P5" or "P6"
  int width = 0;
  int height = 0;
  int maxval = 0;
};

/// Parses only the header (magic, dimensions, maxval).
PnmHeader read_pnm_header(const std::string& path);

/// Binary PPM (P6), 8-bit maxval 255; values scaled to [0,1], layout [3,H,W].
Tensor<float> load_ppm(const std::string& path);

/// Binary (P5) or ASCII (P2) PGM, 8-bit maxval 255; values in [0,1], [H,W].
Tensor<float> load_pgm(const std::string& path);

/// Writes [3,H,W] values in [0,1] as binary P6, quantized to 8 bits.
void save_ppm(const std::string& path, const Tensor<float>& image);

/// Writes [H,W] values in [0,1] as binary P5, quantized to 8 bits.
void save_pgm(const std::string& path, const Tensor<float>& gray);

}  // namespace upd
