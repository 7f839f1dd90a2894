#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diat/nn.hpp"

namespace diat {

/// Raised for unreadable, truncated or mismatched checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// On-disk layout, all integers little-endian:
///   "DIATCKPT" | u32 version | u64 spec hash | str network id | u64 step |
///   str rng state | u32 n, n x (str key, str value) |
///   u32 n, n x blob (parameters) | u32 n, n x blob (optimizer state)
/// where str = u32 length + bytes and blob = str name | u8 dtype | u8 rank |
/// rank x u64 extent | raw values.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string network_id;
  std::uint64_t spec_hash = 0;
  std::uint64_t step = 0;
  std::string rng_state;
  std::map<std::string, std::string> meta;
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> optimizer;

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

/// Snapshot of a network's parameters (deep copies).
Checkpoint make_checkpoint(const nn::Network& net, std::uint64_t step = 0);

/// Copies parameter values into `net`, converting precision if needed.
/// Rejects a checkpoint whose spec hash or parameter list differs.
void restore_params(const Checkpoint& ckpt, nn::Network& net);

void save_checkpoint(const nn::Network& net, const std::filesystem::path& path, std::uint64_t step = 0);
void load_checkpoint(const std::filesystem::path& path, nn::Network& net);

}  // namespace diat
