#include "ba2/store.hpp"

#include <bit>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "ba2/common.hpp"
#include "ba2/hash.hpp"
#include "ba2/switches.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ba2 {

namespace {

using Kind = StoreError::Kind;

void put_u16(std::vector<std::uint8_t>& v, std::uint16_t x) {
  v.push_back(static_cast<std::uint8_t>(x));
  v.push_back(static_cast<std::uint8_t>(x >> 8));
}

void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& v, float x) {
  put_u32(v, std::bit_cast<std::uint32_t>(x));
}

void put_f32s(std::vector<std::uint8_t>& v, const std::vector<float>& xs) {
  for (float x : xs) put_f32(v, x);
}

void put_str(std::vector<std::uint8_t>& v, const std::string& s) {
  put_u32(v, static_cast<std::uint32_t>(s.size()));
  v.insert(v.end(), s.begin(), s.end());
}

struct Reader {
  const std::vector<std::uint8_t>& b;
  std::size_t at = 0;

  void need(std::size_t n) const {
    if (at + n > b.size())
      throw StoreError(Kind::Truncated, "file truncated at offset " + std::to_string(at));
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t x = static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
    at += 2;
    return x;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    at += 4;
    return x;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::vector<float> f32s(std::size_t n) {
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f32();
    return out;
  }
  std::vector<std::uint8_t> bytes(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> out(b.begin() + static_cast<std::ptrdiff_t>(at),
                                  b.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
    return out;
  }
  std::string str() {
    const std::uint32_t n = u32();
    const std::vector<std::uint8_t> raw = bytes(n);
    return std::string(raw.begin(), raw.end());
  }
  void done() const {
    if (at != b.size())
      throw StoreError(Kind::Corrupt, std::to_string(b.size() - at) +
                                          " trailing bytes after the classifier section");
  }
};

void check_magic(Reader& r, const char* magic, const char* what) {
  const std::vector<std::uint8_t> m = [&] {
    try {
      return r.bytes(4);
    } catch (const StoreError&) {
      throw StoreError(Kind::BadMagic, std::string(what) + ": file too short for a magic");
    }
  }();
  if (std::memcmp(m.data(), magic, 4) != 0)
    throw StoreError(Kind::BadMagic, std::string(what) + ": magic mismatch (want " + magic + ")");
}

void check_version(Reader& r, std::uint16_t want, const char* what) {
  const std::uint16_t v = r.u16();
  if (v != want)
    throw StoreError(Kind::BadVersion, std::string(what) + ": version " + std::to_string(v) +
                                           " unsupported (want " + std::to_string(want) + ")");
}

std::array<std::uint8_t, 32> read_hash(Reader& r) {
  const std::vector<std::uint8_t> raw = r.bytes(32);
  std::array<std::uint8_t, 32> h{};
  std::copy(raw.begin(), raw.end(), h.begin());
  return h;
}

std::string budget_tag(float budget) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", static_cast<double>(budget));
  return buf;
}

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s)
    out.push_back((std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')
                      ? c
                      : '_');
  return out;
}

}  // namespace

std::vector<std::uint8_t> pack_switches(const std::vector<std::uint8_t>& bits) {
  std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
  for (std::size_t c = 0; c < bits.size(); ++c)
    if (bits[c]) out[c / 8] = static_cast<std::uint8_t>(out[c / 8] | (1u << (c % 8)));
  return out;
}

std::vector<std::uint8_t> unpack_switches(const std::vector<std::uint8_t>& bytes, int count) {
  if (count < 0) throw StoreError(Kind::Validation, "unpack_switches: negative count");
  const std::size_t want = (static_cast<std::size_t>(count) + 7) / 8;
  if (bytes.size() != want)
    throw StoreError(Kind::Corrupt, "unpack_switches: " + std::to_string(bytes.size()) +
                                        " bytes for " + std::to_string(count) +
                                        " bits (want " + std::to_string(want) + ")");
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(count));
  for (std::size_t c = 0; c < bits.size(); ++c)
    bits[c] = (bytes[c / 8] >> (c % 8)) & 1u;
  for (std::size_t c = bits.size(); c < want * 8; ++c)
    if ((bytes[c / 8] >> (c % 8)) & 1u)
      throw StoreError(Kind::Corrupt, "unpack_switches: nonzero padding bit " +
                                          std::to_string(c));
  return bits;
}

std::vector<std::uint8_t> adapter_bytes(const DomainAdapter& adapter, const ArchPlan& plan) {
  if (adapter.switches.size() != plan.convs.size())
    throw StoreError(Kind::Validation, "adapter_bytes: adapter has " +
                                           std::to_string(adapter.switches.size()) +
                                           " layers, architecture has " +
                                           std::to_string(plan.convs.size()));
  if (adapter.bn.size() != plan.convs.size())
    throw StoreError(Kind::Validation, "adapter_bytes: batch-norm bank count mismatch");

  std::vector<std::uint8_t> v;
  v.insert(v.end(), {'B', 'A', '2', 'A'});
  put_u16(v, kAdapterFormatVersion);
  const auto hash = plan.hash();
  v.insert(v.end(), hash.begin(), hash.end());
  put_str(v, adapter.domain);
  put_f32(v, adapter.budget);
  put_u32(v, static_cast<std::uint32_t>(adapter.switches.size()));
  for (const SwitchVector& sv : adapter.switches) {
    put_u32(v, static_cast<std::uint32_t>(sv.size()));
    const std::vector<std::uint8_t> packed = pack_switches(sv.bits());
    v.insert(v.end(), packed.begin(), packed.end());
  }
  for (const BnParams& bn : adapter.bn) {
    put_u32(v, static_cast<std::uint32_t>(bn.channels()));
    put_f32s(v, bn.gamma);
    put_f32s(v, bn.beta);
    put_f32s(v, bn.running_mean);
    put_f32s(v, bn.running_var);
  }
  put_u32(v, static_cast<std::uint32_t>(adapter.head.in_features));
  put_u32(v, static_cast<std::uint32_t>(adapter.head.out_features));
  put_f32s(v, adapter.head.w);
  put_f32s(v, adapter.head.b);
  return v;
}

DomainAdapter adapter_from_bytes(const std::vector<std::uint8_t>& bytes,
                                 const Backbone& backbone) {
  const ArchPlan& plan = backbone.plan;
  Reader r{bytes};
  check_magic(r, "BA2A", "adapter");
  check_version(r, kAdapterFormatVersion, "adapter");
  if (read_hash(r) != plan.hash())
    throw StoreError(Kind::HashMismatch,
                     "adapter was trained against a different architecture");

  DomainAdapter a;
  a.domain = r.str();
  a.budget = r.f32();
  if (!(a.budget > 0.0f) || a.budget > 1.0f)
    throw StoreError(Kind::Validation, "adapter budget " + std::to_string(a.budget) +
                                           " outside (0, 1]");
  const std::uint32_t layers = r.u32();
  if (layers != plan.convs.size())
    throw StoreError(Kind::Corrupt, "adapter layer count " + std::to_string(layers) +
                                        " mismatches the architecture's " +
                                        std::to_string(plan.convs.size()));
  for (std::uint32_t i = 0; i < layers; ++i) {
    const std::uint32_t cin = r.u32();
    if (cin != static_cast<std::uint32_t>(plan.convs[i].cin))
      throw StoreError(Kind::Corrupt, "layer " + plan.convs[i].name + ": switch width " +
                                          std::to_string(cin) + ", architecture wants " +
                                          std::to_string(plan.convs[i].cin));
    const std::vector<std::uint8_t> packed = r.bytes((cin + 7) / 8);
    const std::vector<std::uint8_t> bits = unpack_switches(packed, static_cast<int>(cin));
    SwitchVector sv(static_cast<int>(cin));
    std::vector<float> scores(cin);
    for (std::uint32_t c = 0; c < cin; ++c)
      scores[c] = bits[c] ? kSwitchInit : -kSwitchInit;
    sv.set_scores(scores);
    a.switches.push_back(std::move(sv));
    a.gated.push_back(plan.convs[i].gated ? 1 : 0);
  }
  for (std::uint32_t i = 0; i < layers; ++i) {
    const std::uint32_t ch = r.u32();
    if (ch != static_cast<std::uint32_t>(plan.convs[i].cout))
      throw StoreError(Kind::Corrupt, "layer " + plan.convs[i].name +
                                          ": batch-norm width " + std::to_string(ch) +
                                          ", architecture wants " +
                                          std::to_string(plan.convs[i].cout));
    BnParams bn;
    bn.gamma = r.f32s(ch);
    bn.beta = r.f32s(ch);
    bn.running_mean = r.f32s(ch);
    bn.running_var = r.f32s(ch);
    a.bn.push_back(std::move(bn));
  }
  a.head.in_features = static_cast<int>(r.u32());
  a.head.out_features = static_cast<int>(r.u32());
  if (a.head.in_features != plan.feat_dim)
    throw StoreError(Kind::Corrupt, "classifier expects " +
                                        std::to_string(a.head.in_features) +
                                        " features, architecture yields " +
                                        std::to_string(plan.feat_dim));
  if (a.head.out_features < 2)
    throw StoreError(Kind::Validation, "classifier has fewer than 2 outputs");
  a.head.w = r.f32s(static_cast<std::size_t>(a.head.in_features) *
                    static_cast<std::size_t>(a.head.out_features));
  a.head.b = r.f32s(static_cast<std::size_t>(a.head.out_features));
  a.classes = a.head.out_features;
  r.done();
  return a;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw StoreError(Kind::Io, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (f.bad()) throw StoreError(Kind::Io, "read failed on " + path);
  return bytes;
}

void write_bytes_atomic(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw StoreError(Kind::Io, "cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f.good()) throw StoreError(Kind::Io, "write failed on " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw StoreError(Kind::Io, "rename " + tmp + " -> " + path + ": " + ec.message());
}

void save_adapter(const std::string& path, const DomainAdapter& adapter, const ArchPlan& plan) {
  write_bytes_atomic(path, adapter_bytes(adapter, plan));
}

DomainAdapter load_adapter(const std::string& path, const Backbone& backbone) {
  return adapter_from_bytes(read_bytes(path), backbone);
}

std::vector<std::uint8_t> backbone_bytes(const Backbone& bb) {
  std::vector<std::uint8_t> v;
  v.insert(v.end(), {'B', 'A', '2', 'W'});
  put_u16(v, kBackboneFormatVersion);
  const auto hash = bb.plan.hash();
  v.insert(v.end(), hash.begin(), hash.end());
  const ResidualCnnConfig& cfg = bb.plan.cfg;
  put_u32(v, static_cast<std::uint32_t>(cfg.input_h));
  put_u32(v, static_cast<std::uint32_t>(cfg.input_w));
  put_u32(v, static_cast<std::uint32_t>(cfg.input_c));
  put_u32(v, static_cast<std::uint32_t>(cfg.stage_channels.size()));
  for (int c : cfg.stage_channels) put_u32(v, static_cast<std::uint32_t>(c));
  put_u32(v, static_cast<std::uint32_t>(cfg.blocks_per_stage));
  put_u32(v, static_cast<std::uint32_t>(bb.classes));
  for (const Kernel<float>& k : bb.kernels) {
    put_u32(v, static_cast<std::uint32_t>(k.v.size()));
    put_f32s(v, k.v);
  }
  for (const BnParams& bn : bb.bn) {
    put_u32(v, static_cast<std::uint32_t>(bn.channels()));
    put_f32s(v, bn.gamma);
    put_f32s(v, bn.beta);
    put_f32s(v, bn.running_mean);
    put_f32s(v, bn.running_var);
  }
  put_u32(v, static_cast<std::uint32_t>(bb.head.in_features));
  put_u32(v, static_cast<std::uint32_t>(bb.head.out_features));
  put_f32s(v, bb.head.w);
  put_f32s(v, bb.head.b);
  return v;
}

Backbone backbone_from_bytes(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  check_magic(r, "BA2W", "backbone");
  check_version(r, kBackboneFormatVersion, "backbone");
  const std::array<std::uint8_t, 32> stored_hash = read_hash(r);

  ResidualCnnConfig cfg;
  cfg.input_h = static_cast<int>(r.u32());
  cfg.input_w = static_cast<int>(r.u32());
  cfg.input_c = static_cast<int>(r.u32());
  const std::uint32_t stages = r.u32();
  if (stages == 0 || stages > 64)
    throw StoreError(Kind::Corrupt, "backbone: implausible stage count " +
                                        std::to_string(stages));
  cfg.stage_channels.clear();
  for (std::uint32_t i = 0; i < stages; ++i)
    cfg.stage_channels.push_back(static_cast<int>(r.u32()));
  cfg.blocks_per_stage = static_cast<int>(r.u32());

  Backbone bb;
  try {
    bb.plan = plan_architecture(cfg);
  } catch (const Error& e) {
    throw StoreError(Kind::Corrupt, std::string("backbone: stored config invalid: ") +
                                        e.what());
  }
  if (bb.plan.hash() != stored_hash)
    throw StoreError(Kind::Corrupt,
                     "backbone: stored architecture hash disagrees with the stored config");

  bb.classes = static_cast<int>(r.u32());
  if (bb.classes < 2) throw StoreError(Kind::Validation, "backbone: classes < 2");
  for (const ConvPlan& cp : bb.plan.convs) {
    const std::uint32_t n = r.u32();
    const std::size_t want = static_cast<std::size_t>(cp.kh) * cp.kw * cp.cin * cp.cout;
    if (n != want)
      throw StoreError(Kind::Corrupt, "backbone: layer " + cp.name + " has " +
                                          std::to_string(n) + " weights, wants " +
                                          std::to_string(want));
    Kernel<float> k(cp.kh, cp.kw, cp.cin, cp.cout);
    k.v = r.f32s(want);
    bb.kernels.push_back(std::move(k));
  }
  for (const ConvPlan& cp : bb.plan.convs) {
    const std::uint32_t ch = r.u32();
    if (ch != static_cast<std::uint32_t>(cp.cout))
      throw StoreError(Kind::Corrupt, "backbone: batch-norm width mismatch on " + cp.name);
    BnParams bn;
    bn.gamma = r.f32s(ch);
    bn.beta = r.f32s(ch);
    bn.running_mean = r.f32s(ch);
    bn.running_var = r.f32s(ch);
    bb.bn.push_back(std::move(bn));
  }
  bb.head.in_features = static_cast<int>(r.u32());
  bb.head.out_features = static_cast<int>(r.u32());
  if (bb.head.in_features != bb.plan.feat_dim)
    throw StoreError(Kind::Corrupt, "backbone: head feature width mismatch");
  bb.head.w = r.f32s(static_cast<std::size_t>(bb.head.in_features) *
                     static_cast<std::size_t>(bb.head.out_features));
  bb.head.b = r.f32s(static_cast<std::size_t>(bb.head.out_features));
  r.done();
  return bb;
}

void save_backbone(const std::string& path, const Backbone& bb) {
  write_bytes_atomic(path, backbone_bytes(bb));
}

Backbone load_backbone(const std::string& path) {
  return backbone_from_bytes(read_bytes(path));
}

ModelRegistry ModelRegistry::create(const std::string& dir, const Backbone& backbone,
                                    std::uint64_t seed, const std::string& config_hash) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw StoreError(Kind::Io, "cannot create " + dir + ": " + ec.message());
  fs::create_directories(fs::path(dir) / "adapters", ec);
  if (ec) throw StoreError(Kind::Io, "cannot create adapters dir: " + ec.message());

  ModelRegistry reg;
  reg.dir_ = dir;
  reg.backbone_ = backbone;
  reg.seed_ = seed;
  reg.config_hash_ = config_hash;
  save_backbone((fs::path(dir) / reg.backbone_path_).string(), backbone);
  reg.backbone_sha_ = to_hex(sha256_file(fs::path(dir) / reg.backbone_path_));
  reg.save_manifest();
  return reg;
}

ModelRegistry ModelRegistry::open(const std::string& dir) {
  const fs::path manifest = fs::path(dir) / "manifest.json";
  const std::vector<std::uint8_t> raw = read_bytes(manifest.string());
  json j;
  try {
    j = json::parse(raw.begin(), raw.end());
  } catch (const json::exception& e) {
    throw StoreError(Kind::Corrupt, "manifest: " + std::string(e.what()));
  }
  try {
    if (j.at("version").get<int>() != 1)
      throw StoreError(Kind::BadVersion, "manifest version unsupported");
    ModelRegistry reg;
    reg.dir_ = dir;
    reg.seed_ = j.at("seed").get<std::uint64_t>();
    reg.config_hash_ = j.at("config_hash").get<std::string>();
    reg.backbone_path_ = j.at("backbone").at("path").get<std::string>();
    reg.backbone_sha_ = j.at("backbone").at("sha256").get<std::string>();
    reg.backbone_ = load_backbone((fs::path(dir) / reg.backbone_path_).string());
    if (j.at("arch_hash").get<std::string>() != to_hex(reg.backbone_.plan.hash()))
      throw StoreError(Kind::HashMismatch,
                       "manifest architecture hash disagrees with the backbone file");
    for (const json& e : j.at("adapters")) {
      RegistryEntry entry;
      entry.domain = e.at("domain").get<std::string>();
      entry.budget = e.at("budget").get<float>();
      entry.path = e.at("path").get<std::string>();
      entry.sha256 = e.at("sha256").get<std::string>();
      entry.compliant = e.at("compliant").get<bool>();
      reg.entries_.push_back(std::move(entry));
    }
    if (j.count("e_max"))
      for (const auto& [k, val] : j.at("e_max").items())
        reg.e_max_[k] = val.get<double>();
    return reg;
  } catch (const json::exception& e) {
    throw StoreError(Kind::Corrupt, "manifest: " + std::string(e.what()));
  }
}

void ModelRegistry::save_manifest() const {
  json j;
  j["version"] = 1;
  j["arch_hash"] = to_hex(backbone_.plan.hash());
  j["backbone"] = {{"path", backbone_path_}, {"sha256", backbone_sha_}};
  j["seed"] = seed_;
  j["config_hash"] = config_hash_;
  j["adapters"] = json::array();
  for (const RegistryEntry& e : entries_)
    j["adapters"].push_back({{"domain", e.domain},
                             {"budget", e.budget},
                             {"path", e.path},
                             {"sha256", e.sha256},
                             {"compliant", e.compliant}});
  j["e_max"] = json::object();
  for (const auto& [k, v] : e_max_) j["e_max"][k] = v;
  const std::string text = j.dump(2) + "\n";
  write_bytes_atomic((fs::path(dir_) / "manifest.json").string(),
                     std::vector<std::uint8_t>(text.begin(), text.end()));
}

void ModelRegistry::add_adapter(const DomainAdapter& adapter, bool compliant) {
  RegistryEntry entry;
  entry.domain = adapter.domain;
  entry.budget = adapter.budget;
  entry.path = "adapters/" + sanitize(adapter.domain) + "_b" + budget_tag(adapter.budget) +
               ".ba2a";
  entry.compliant = compliant;
  const fs::path full = fs::path(dir_) / entry.path;
  save_adapter(full.string(), adapter, backbone_.plan);
  entry.sha256 = to_hex(sha256_file(full));

  for (RegistryEntry& e : entries_)
    if (e.domain == entry.domain && e.budget == entry.budget) {
      e = entry;
      save_manifest();
      return;
    }
  entries_.push_back(std::move(entry));
  save_manifest();
}

DomainAdapter ModelRegistry::resolve(const std::string& domain, float budget,
                                     bool* compliant) const {
  std::vector<std::string> budgets_for_domain;
  for (const RegistryEntry& e : entries_) {
    if (e.domain != domain) continue;
    if (e.budget == budget) {
      if (compliant) *compliant = e.compliant;
      return load_adapter((fs::path(dir_) / e.path).string(), backbone_);
    }
    budgets_for_domain.push_back(budget_tag(e.budget));
  }
  if (budgets_for_domain.empty())
    throw StoreError(Kind::NotFound, "no adapters for domain '" + domain + "'");
  std::string avail;
  for (std::size_t i = 0; i < budgets_for_domain.size(); ++i)
    avail += (i ? ", " : "") + budgets_for_domain[i];
  throw StoreError(Kind::NotFound, "domain '" + domain + "' has no budget " +
                                       budget_tag(budget) + " (available: " + avail + ")");
}

std::vector<std::string> ModelRegistry::verify() const {
  std::vector<std::string> problems;
  auto check = [&](const std::string& rel, const std::string& want) {
    const fs::path full = fs::path(dir_) / rel;
    try {
      const std::string got = to_hex(sha256_file(full));
      if (got != want)
        problems.push_back(rel + ": sha256 " + got + " != manifest " + want);
    } catch (const std::exception& e) {
      problems.push_back(rel + ": " + e.what());
    }
  };
  check(backbone_path_, backbone_sha_);
  for (const RegistryEntry& e : entries_) check(e.path, e.sha256);
  return problems;
}

void ModelRegistry::set_e_max(const std::string& domain, double value) {
  e_max_[domain] = value;
  save_manifest();
}

double ModelRegistry::e_max(const std::string& domain) const {
  auto it = e_max_.find(domain);
  if (it == e_max_.end())
    throw StoreError(Kind::NotFound, "no fine-tuning baseline recorded for '" + domain + "'");
  return it->second;
}

}  // namespace ba2
