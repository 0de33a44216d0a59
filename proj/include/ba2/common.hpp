// Shared error types and small utilities.
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ba2 {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/op shape or value violations (bad dims, non-finite inputs, ...).
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration (budgets, schedules, CLI/config files).
struct ConfigError : Error {
  using Error::Error;
};

// Dataset files: bad magic, truncation, label range, checksum.
struct DataError : Error {
  using Error::Error;
};

// Persistence layer. Each failure mode gets its own kind so callers can
// distinguish corruption from lookup misses.
struct StoreError : Error {
  enum class Kind {
    BadMagic,
    BadVersion,
    HashMismatch,
    Truncated,
    Corrupt,
    NotFound,
    Validation,
    Io,
  };
  Kind kind;
  StoreError(Kind k, const std::string& msg) : Error(msg), kind(k) {}
};

// Stored compliance flags disagreeing with recomputed ones is a pipeline
// bug, not a user error.
struct ComplianceError : Error {
  using Error::Error;
};

std::string to_hex(std::span<const std::uint8_t> bytes);

// Deterministic seed derivation so sub-tasks (backbone, per-domain runs,
// data shuffles) get independent but reproducible streams.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

}  // namespace ba2
