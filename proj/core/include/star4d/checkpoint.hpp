#pragma once

// Versioned binary checkpoint: header, config echo, string metadata and named
// float arrays. Little-endian, no padding.

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "star4d/config.hpp"
#include "star4d/nn.hpp"

namespace star4d {

inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedArray {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string kind;  // "vq4d" or "star"
  Config config;
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, NamedArray>> arrays;

  const NamedArray* find(const std::string& name) const;
  void add(const std::string& name, const Tensor& tensor);
  void add_all(const std::vector<std::pair<std::string, Tensor>>& tensors);
  // Copies every named array into the matching parameter; throws naming the
  // first missing array or shape mismatch.
  void restore(std::vector<std::pair<std::string, Tensor>>& tensors) const;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
// Throws std::runtime_error naming the path on I/O failure, bad magic or version.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws std::invalid_argument when the checkpoint kind differs or any key under
// `prefix` disagrees with `expected`.
void require_matching_config(const Checkpoint& checkpoint, const std::string& kind, const Config& expected,
                             const std::string& prefix);

}  // namespace star4d
