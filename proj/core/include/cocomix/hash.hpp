#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace cocomix {

using Digest = std::array<std::uint8_t, 32>;

// Incremental SHA-256. Numeric helpers feed little-endian encodings so
// digests are platform independent.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::uint8_t> bytes);
  Sha256& update(std::string_view text);
  Sha256& update_u64(std::uint64_t v);
  Sha256& update_f64(double v);
  Sha256& update_values(std::span<const double> values);
  Sha256& update(const Digest& d);
  Digest finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

Digest sha256(std::span<const std::uint8_t> bytes);
Digest sha256(std::string_view text);

std::string to_hex(const Digest& d);
Digest digest_from_hex(std::string_view hex);

}  // namespace cocomix
