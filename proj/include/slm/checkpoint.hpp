#pragma once

// Binary checkpoint layout (all integers little-endian):
//
//   offset 0   char[4]  magic "SLMC"
//          4   u32      format version (kCheckpointVersion)
//          8   u32      config length N
//         12   u8[N]    config block: UTF-8 "key = value" lines
//              u32      record count R
//   R records:
//              u32      name length L, then u8[L] name
//              u32      rank K (1 or 2), then u32[K] dims
//              f32[prod(dims)] values, IEEE-754 binary32 little-endian
//
// Readers reject any other magic or version.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace slm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParameterRecord {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string config;
  std::vector<ParameterRecord> parameters;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace slm
