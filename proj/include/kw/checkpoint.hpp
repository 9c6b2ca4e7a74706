#pragma once

// KWCK checkpoint container.
//
//   bytes 0..3   "KWCK"
//   bytes 4..7   format version, uint32 little-endian
//   bytes 8..15  manifest length L, uint64 little-endian
//   next L bytes UTF-8 JSON manifest:
//                {"metadata": {...},
//                 "tensors": [{"name", "shape", "dtype": "f64", "offset", "bytes"}, ...]}
//   payload      raw little-endian IEEE-754 doubles; offsets are relative to
//                the first payload byte, tensors are stored back to back.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kw/tensor.hpp"

namespace kw {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool has(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
  void add(std::string name, Tensor value);
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace kw
