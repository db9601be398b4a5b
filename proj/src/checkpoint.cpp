#include "updseg/checkpoint.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "updseg/netpbm.hpp"  // IoError

namespace upd {

namespace {

constexpr char kMagic[4] = {'U', 'P', 'D', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Cursor {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& field) {
    throw LoadError("checkpoint: truncated while reading " + field);
  }

  std::uint32_t u32(const std::string& field) {
    if (pos + 4 > buf.size()) fail(field);
    std::uint32_t v = buf[pos] | (buf[pos + 1] << 8) | (buf[pos + 2] << 16) |
                      (static_cast<std::uint32_t>(buf[pos + 3]) << 24);
    pos += 4;
    return v;
  }

  float f32(const std::string& field) {
    std::uint32_t bits = u32(field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n, const std::string& field) {
    if (pos + n > buf.size()) fail(field);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

void append_tensor(std::vector<std::uint8_t>& out, const std::string& name,
                   const Tensor<float>& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put_u32(out, static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : t.data) put_f32(out, v);
}

// u64 split into four exactly representable 16-bit float chunks, low first
Tensor<float> seed_tensor(std::uint64_t seed) {
  Tensor<float> t = Tensor<float>::zeros({4});
  for (int i = 0; i < 4; ++i) t.data[static_cast<std::size_t>(i)] =
      static_cast<float>((seed >> (16 * i)) & 0xffff);
  return t;
}

std::uint64_t seed_from_tensor(const Tensor<float>& t) {
  if (t.shape != std::vector<int>{4}) throw LoadError("checkpoint: meta.seed has wrong shape");
  std::uint64_t seed = 0;
  for (int i = 0; i < 4; ++i)
    seed |= static_cast<std::uint64_t>(std::llround(t.data[static_cast<std::size_t>(i)])) << (16 * i);
  return seed;
}

float scalar_meta(const std::map<std::string, Tensor<float>>& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end() || it->second.shape != std::vector<int>{1})
    throw LoadError("checkpoint: missing or malformed " + name);
  return it->second.data[0];
}

}  // namespace

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::ScanetOnly: return "scanet";
    case Phase::UpdcnnOnly: return "updcnn";
    case Phase::Joint: return "joint";
  }
  return "?";
}

std::array<std::uint8_t, 32> config_digest(const std::string& config_text) {
  // four salted FNV-1a 64-bit passes, little-endian concatenation
  std::array<std::uint8_t, 32> out{};
  for (int pass = 0; pass < 4; ++pass) {
    std::uint64_t h = 0xcbf29ce484222325ull ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(pass + 1));
    for (unsigned char c : config_text) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    for (int i = 0; i < 8; ++i)
      out[static_cast<std::size_t>(pass * 8 + i)] = static_cast<std::uint8_t>(h >> (8 * i));
  }
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::map<std::string, Tensor<float>> all = ckpt.tensors;
  all["meta.phase"] = Tensor<float>::from({1}, {static_cast<float>(static_cast<int>(ckpt.phase))});
  all["meta.epoch"] = Tensor<float>::from({1}, {static_cast<float>(ckpt.epoch)});
  all["meta.seed"] = seed_tensor(ckpt.seed);

  std::vector<std::uint8_t> body;  // everything after the magic, before the CRC
  put_u32(body, ckpt.version);
  body.insert(body.end(), ckpt.config_digest.begin(), ckpt.config_digest.end());
  put_u32(body, static_cast<std::uint32_t>(all.size()));
  for (const auto& [name, tensor] : all) append_tensor(body, name, tensor);

  const std::uint32_t crc =
      static_cast<std::uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size())));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  std::vector<std::uint8_t> tail;
  put_u32(tail, crc);
  out.write(reinterpret_cast<const char*>(tail.data()), 4);
  if (!out) throw IoError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  if (raw.size() < 4 || std::memcmp(raw.data(), kMagic, 4) != 0)
    throw LoadError("checkpoint: bad magic");
  if (raw.size() < 8) throw LoadError("checkpoint: truncated while reading crc");

  const std::vector<std::uint8_t> body(raw.begin() + 4, raw.end() - 4);
  Cursor tail{raw, raw.size() - 4};
  const std::uint32_t stored_crc = tail.u32("crc");
  const std::uint32_t actual_crc =
      static_cast<std::uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size())));
  if (stored_crc != actual_crc) throw LoadError("checkpoint: crc mismatch");

  Cursor c{body};
  Checkpoint ckpt;
  ckpt.version = c.u32("version");
  if (ckpt.version != kVersion)
    throw LoadError("checkpoint: unsupported version " + std::to_string(ckpt.version));
  for (auto& b : ckpt.config_digest) {
    if (c.pos >= body.size()) c.fail("config digest");
    b = body[c.pos++];
  }
  const std::uint32_t count = c.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = c.u32("tensor name length");
    const std::string name = c.bytes(name_len, "tensor name");
    const std::uint32_t ndim = c.u32("ndim of '" + name + "'");
    if (ndim > 8) throw LoadError("checkpoint: implausible ndim for '" + name + "'");
    std::vector<int> shape;
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint32_t dim = c.u32("dims of '" + name + "'");
      if (dim < 1 || dim > (1u << 24)) throw LoadError("checkpoint: bad dimension in '" + name + "'");
      shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    Tensor<float> t = Tensor<float>::zeros(shape);
    for (std::int64_t k = 0; k < n; ++k)
      t.data[static_cast<std::size_t>(k)] = c.f32("payload of '" + name + "'");
    ckpt.tensors[name] = std::move(t);
  }
  if (c.pos != body.size()) throw LoadError("checkpoint: trailing bytes after tensor table");

  const int phase = static_cast<int>(std::llround(scalar_meta(ckpt.tensors, "meta.phase")));
  if (phase < 0 || phase > 2) throw LoadError("checkpoint: malformed meta.phase");
  ckpt.phase = static_cast<Phase>(phase);
  ckpt.epoch = static_cast<std::uint32_t>(std::llround(scalar_meta(ckpt.tensors, "meta.epoch")));
  auto seed_it = ckpt.tensors.find("meta.seed");
  if (seed_it == ckpt.tensors.end()) throw LoadError("checkpoint: missing meta.seed");
  ckpt.seed = seed_from_tensor(seed_it->second);
  ckpt.tensors.erase("meta.phase");
  ckpt.tensors.erase("meta.epoch");
  ckpt.tensors.erase("meta.seed");
  return ckpt;
}

}  // namespace upd
