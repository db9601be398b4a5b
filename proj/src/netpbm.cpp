#include "updseg/netpbm.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

namespace upd {

namespace {

struct Reader {
  std::ifstream in;
  std::string path;

  explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw IoError("cannot open '" + p + "'");
  }

  long offset() { return static_cast<long>(in.tellg()); }

  [[noreturn]] void fail(const std::string& what) {
    throw ParseError(path + ": " + what + " at byte offset " + std::to_string(offset()));
  }

  // skips whitespace and '#' comment lines
  int next_token_char() {
    int c = in.get();
    while (c != EOF) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = in.get();
      } else if (std::isspace(c)) {
        c = in.get();
      } else {
        return c;
      }
    }
    fail("unexpected end of header");
  }

  int read_int() {
    int c = next_token_char();
    if (!std::isdigit(c)) fail("expected an integer");
    long v = 0;
    while (c != EOF && std::isdigit(c)) {
      v = v * 10 + (c - '0');
      if (v > 1 << 30) fail("integer out of range");
      c = in.get();
    }
    if (c != EOF) in.unget();
    return static_cast<int>(v);
  }

  PnmHeader header() {
    PnmHeader h;
    const int m0 = in.get(), m1 = in.get();
    if (m0 != 'P' || (m1 != '2' && m1 != '5' && m1 != '6'))
      fail("bad magic (expected P2, P5 or P6)");
    h.magic = {'P', static_cast<char>(m1)};
    h.width = read_int();
    h.height = read_int();
    h.maxval = read_int();
    if (h.width < 1 || h.height < 1) fail("non-positive dimensions");
    return h;
  }
};

std::uint8_t quantize(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

PnmHeader read_pnm_header(const std::string& path) {
  Reader r(path);
  return r.header();
}

Tensor<float> load_ppm(const std::string& path) {
  Reader r(path);
  const PnmHeader h = r.header();
  if (h.magic != "P6") r.fail("expected binary PPM (P6), got " + h.magic);
  if (h.maxval != 255) r.fail("unsupported maxval " + std::to_string(h.maxval));
  r.in.get();  // single whitespace byte after maxval

  const std::size_t count = static_cast<std::size_t>(h.width) * h.height * 3;
  std::vector<char> raw(count);
  r.in.read(raw.data(), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(r.in.gcount()) != count) r.fail("truncated pixel payload");

  Tensor<float> out = Tensor<float>::zeros({3, h.height, h.width});
  const std::size_t plane = static_cast<std::size_t>(h.width) * h.height;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      out.data[c * plane + i] = static_cast<std::uint8_t>(raw[i * 3 + c]) / 255.0f;
  return out;
}

Tensor<float> load_pgm(const std::string& path) {
  Reader r(path);
  const PnmHeader h = r.header();
  if (h.magic != "P5" && h.magic != "P2") r.fail("expected PGM (P5 or P2), got " + h.magic);
  if (h.maxval != 255) r.fail("unsupported maxval " + std::to_string(h.maxval));

  const std::size_t count = static_cast<std::size_t>(h.width) * h.height;
  Tensor<float> out = Tensor<float>::zeros({h.height, h.width});
  if (h.magic == "P5") {
    r.in.get();
    std::vector<char> raw(count);
    r.in.read(raw.data(), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(r.in.gcount()) != count) r.fail("truncated pixel payload");
    for (std::size_t i = 0; i < count; ++i)
      out.data[i] = static_cast<std::uint8_t>(raw[i]) / 255.0f;
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const int v = r.read_int();
      if (v > 255) r.fail("sample exceeds maxval");
      out.data[i] = v / 255.0f;
    }
  }
  return out;
}

void save_ppm(const std::string& path, const Tensor<float>& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("save_ppm: expected [3,H,W]");
  const int H = image.dim(1), W = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "P6\n" << W << " " << H << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(W) * H;
  std::vector<char> raw(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      raw[i * 3 + c] = static_cast<char>(quantize(image.data[c * plane + i]));
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

void save_pgm(const std::string& path, const Tensor<float>& gray) {
  if (gray.ndim() != 2) throw ShapeError("save_pgm: expected [H,W]");
  const int H = gray.dim(0), W = gray.dim(1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "P5\n" << W << " " << H << "\n255\n";
  std::vector<char> raw(static_cast<std::size_t>(W) * H);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<char>(quantize(gray.data[i]));
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace upd
