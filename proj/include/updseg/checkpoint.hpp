#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>

#include "updseg/tensor.hpp"

namespace upd {

enum class Phase { ScanetOnly = 0, UpdcnnOnly = 1, Joint = 2 };

const char* phase_name(Phase p);

/// Named-tensor parameter archive plus training metadata. Round trips
/// byte-identically: save -> load -> save reproduces the file exactly.
struct Checkpoint {
  std::uint32_t version = 1;
  Phase phase = Phase::ScanetOnly;
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::array<std::uint8_t, 32> config_digest{};
  std::map<std::string, Tensor<float>> tensors;
};

/// 32-byte digest of the resolved configuration text.
std::array<std::uint8_t, 32> config_digest(const std::string& config_text);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

/// Validates magic, version, structural lengths and the trailing CRC; the
/// error message names the offending field.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace upd
