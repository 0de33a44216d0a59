#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace ba2 {

std::array<std::uint8_t, 32> sha256_bytes(std::span<const std::uint8_t> data);
std::array<std::uint8_t, 32> sha256_str(const std::string& s);
std::array<std::uint8_t, 32> sha256_file(const std::filesystem::path& path);

}  // namespace ba2
