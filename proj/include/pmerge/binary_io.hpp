#pragma once

// Checkpoint container shared by model and prefix checkpoints:
//
//   8 bytes   magic "PMRGCKPT"
//   u64 LE    header length in bytes
//   N bytes   UTF-8 JSON header
//   rest      float64 payload, little-endian
//
// The header must carry "payload_count" (number of doubles) so truncation is
// detected before any state is built.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace pmerge {

struct Container {
  nlohmann::json header;
  std::vector<double> payload;
};

void write_container(const std::filesystem::path& path, const nlohmann::json& header,
                     std::span<const double> payload);
Container read_container(const std::filesystem::path& path);

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::span<const unsigned char> bytes);

/// Incremental SHA-256 over float64 buffers (host byte order).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const double> values);
  void update(std::span<const unsigned char> bytes);
  std::string hex_digest();

 private:
  void* ctx_;
};

}  // namespace pmerge
