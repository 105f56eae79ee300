#include "pmerge/binary_io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pmerge/error.hpp"

namespace pmerge {

namespace {

constexpr char kMagic[8] = {'P', 'M', 'R', 'G', 'C', 'K', 'P', 'T'};

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return __builtin_bswap64(v);
  }
  return v;
}

}  // namespace

void write_container(const std::filesystem::path& path, const nlohmann::json& header,
                     std::span<const double> payload) {
  nlohmann::json h = header;
  h["payload_count"] = payload.size();
  const std::string text = h.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = to_le(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (double d : payload) {
    std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
  }
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Load, "cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::Load, path.string() + ": bad magic");
  }
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) {
    fail(ErrorKind::Load, path.string() + ": truncated header length");
  }
  len = to_le(len);
  if (len > (std::uint64_t{1} << 30)) fail(ErrorKind::Load, path.string() + ": implausible header");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    fail(ErrorKind::Load, path.string() + ": truncated header");
  }
  Container c;
  try {
    c.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Load, path.string() + ": corrupted header: " + e.what());
  }
  if (!c.header.is_object() || !c.header.contains("payload_count") ||
      !c.header["payload_count"].is_number_unsigned()) {
    fail(ErrorKind::Load, path.string() + ": header lacks payload_count");
  }
  const auto count = c.header["payload_count"].get<std::uint64_t>();
  c.payload.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    if (!in.read(reinterpret_cast<char*>(&bits), sizeof(bits))) {
      fail(ErrorKind::Load, path.string() + ": truncated payload (" + std::to_string(i) + " of " +
                                std::to_string(count) + " values)");
    }
    c.payload[i] = std::bit_cast<double>(to_le(bits));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorKind::Load, path.string() + ": trailing bytes after payload");
  }
  return c;
}

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr);
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(std::span<const double> values) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), values.data(), values.size_bytes());
}

void Sha256::update(std::span<const unsigned char> bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size());
}

std::string Sha256::hex_digest() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &n);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * n);
  for (unsigned int i = 0; i < n; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex_digest();
}

}  // namespace pmerge
