#include "ba2/hash.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <vector>

#include "ba2/common.hpp"

namespace ba2 {

std::array<std::uint8_t, 32> sha256_bytes(std::span<const std::uint8_t> data) {
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size())
    throw Error("sha256 digest failed");
  return out;
}

std::array<std::uint8_t, 32> sha256_str(const std::string& s) {
  return sha256_bytes(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::array<std::uint8_t, 32> sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StoreError(StoreError::Kind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return sha256_bytes(bytes);
}

}  // namespace ba2
