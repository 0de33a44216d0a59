// Bit-exact persistence: 1-bit-packed switch vectors, adapter files, backbone
// checkpoints, and the on-disk registry mapping (domain, budget) to a runnable
// model.
//
// Adapter file (version 1, all integers little-endian):
//   "BA2A" | u16 version | 32-byte architecture hash
//   u32 domain length | domain bytes | f32 budget | u32 layer count
//   per layer:  u32 C_in | ceil(C_in/8) switch bytes (bit c at position
//               c mod 8 of byte c div 8, LSB first; padding bits zero)
//   per layer:  u32 channels | gamma | beta | running mean | running var
//               (each channels x f32)
//   classifier: u32 in features | u32 out features | w | b (f32)
//
// Backbone checkpoint ("BA2W") stores the architecture config, then kernels,
// batch-norm arrays, and the pretraining head in the same spirit.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ba2/adapter.hpp"
#include "ba2/net.hpp"

namespace ba2 {

inline constexpr std::uint16_t kAdapterFormatVersion = 1;
inline constexpr std::uint16_t kBackboneFormatVersion = 1;

// LSB-first bit packing. Any nonzero input counts as an on bit.
std::vector<std::uint8_t> pack_switches(const std::vector<std::uint8_t>& bits);
// Inverse; byte length must be ceil(count/8) and padding bits must be zero.
std::vector<std::uint8_t> unpack_switches(const std::vector<std::uint8_t>& bytes, int count);

// In-memory encode/decode (the file functions wrap these; tests poke at the
// raw bytes directly).
std::vector<std::uint8_t> adapter_bytes(const DomainAdapter& adapter, const ArchPlan& plan);
DomainAdapter adapter_from_bytes(const std::vector<std::uint8_t>& bytes,
                                 const Backbone& backbone);

void save_adapter(const std::string& path, const DomainAdapter& adapter, const ArchPlan& plan);
DomainAdapter load_adapter(const std::string& path, const Backbone& backbone);

std::vector<std::uint8_t> backbone_bytes(const Backbone& bb);
Backbone backbone_from_bytes(const std::vector<std::uint8_t>& bytes);
void save_backbone(const std::string& path, const Backbone& bb);
Backbone load_backbone(const std::string& path);

// Atomic byte-level file I/O (temp + rename on write).
std::vector<std::uint8_t> read_bytes(const std::string& path);
void write_bytes_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes);

struct RegistryEntry {
  std::string domain;
  float budget = 1.0f;
  std::string path;    // relative to the registry directory
  std::string sha256;  // hex digest of the adapter file bytes
  bool compliant = false;
};

// A directory holding one backbone checkpoint, adapter files, and a JSON
// manifest. The manifest's compliance flag is the stored source of truth for
// "budget satisfied"; consumers recompute and must agree with it.
class ModelRegistry {
 public:
  static ModelRegistry create(const std::string& dir, const Backbone& backbone,
                              std::uint64_t seed, const std::string& config_hash);
  static ModelRegistry open(const std::string& dir);

  const Backbone& backbone() const { return backbone_; }
  std::uint64_t seed() const { return seed_; }
  const std::string& config_hash() const { return config_hash_; }
  const std::string& dir() const { return dir_; }

  // Writes the adapter file and manifest; an existing (domain, budget) entry
  // is replaced.
  void add_adapter(const DomainAdapter& adapter, bool compliant);
  DomainAdapter resolve(const std::string& domain, float budget,
                        bool* compliant = nullptr) const;
  const std::vector<RegistryEntry>& list() const { return entries_; }

  // Re-hashes every referenced file; returns one message per problem
  // (empty means everything checks out).
  std::vector<std::string> verify() const;

  // Per-domain fine-tuning baseline error, cached for scoring.
  void set_e_max(const std::string& domain, double value);
  bool has_e_max(const std::string& domain) const { return e_max_.count(domain) != 0; }
  double e_max(const std::string& domain) const;
  const std::map<std::string, double>& e_max_map() const { return e_max_; }

 private:
  ModelRegistry() = default;
  void save_manifest() const;

  std::string dir_;
  Backbone backbone_;
  std::uint64_t seed_ = 0;
  std::string config_hash_;
  std::string backbone_path_ = "backbone.ba2w";
  std::string backbone_sha_;
  std::vector<RegistryEntry> entries_;
  std::map<std::string, double> e_max_;
};

}  // namespace ba2
