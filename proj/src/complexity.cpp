#include "ba2/complexity.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace ba2 {

namespace {

constexpr std::uint64_t kFloatBytes = 4;
constexpr std::uint64_t kFloatBits = 32;

std::uint64_t u64(int a) { return static_cast<std::uint64_t>(a); }

std::uint64_t act_bytes(int h, int w, int c) { return u64(h) * u64(w) * u64(c) * kFloatBytes; }

int active_count(const DomainAdapter* adapter, const ArchPlan& plan, std::size_t layer) {
  const ConvPlan& cp = plan.convs[layer];
  if (!adapter || !cp.gated) return cp.cin;
  return adapter->switches[layer].active();
}

LayerCost conv_cost(const ConvPlan& cp, int active) {
  LayerCost lc;
  lc.layer = cp.name;
  lc.kind = "conv";
  lc.active_in = active;
  lc.total_in = cp.cin;
  lc.flops = conv_layer_flops(cp.kh, cp.kw, active, cp.cout, cp.out_h, cp.out_w);
  lc.param_bits = kFloatBits * u64(cp.kh) * u64(cp.kw) * u64(active) * u64(cp.cout);
  lc.activation_bytes = act_bytes(cp.in_h, cp.in_w, active) +
                        act_bytes(cp.out_h, cp.out_w, cp.cout);
  return lc;
}

LayerCost elementwise_cost(const std::string& name, const std::string& kind, int h, int w,
                           int c, std::uint64_t flops_per_elem, std::uint64_t param_bits) {
  LayerCost lc;
  lc.layer = name;
  lc.kind = kind;
  lc.active_in = c;
  lc.total_in = c;
  lc.flops = flops_per_elem * u64(h) * u64(w) * u64(c);
  lc.param_bits = param_bits;
  lc.activation_bytes = 0;  // in place
  return lc;
}

}  // namespace

double layer_complexity(const std::vector<std::uint8_t>& switches) {
  if (switches.empty()) throw ShapeError("layer_complexity: empty switch vector");
  int on = 0;
  for (std::uint8_t b : switches) on += b ? 1 : 0;
  return static_cast<double>(on) / static_cast<double>(switches.size());
}

std::uint64_t conv_layer_flops(int kh, int kw, int active_in, int cout, int out_h, int out_w) {
  if (kh < 1 || kw < 1 || active_in < 0 || cout < 1 || out_h < 1 || out_w < 1)
    throw ShapeError("conv_layer_flops: bad layer shape");
  return 2 * u64(out_h) * u64(out_w) * u64(kh) * u64(kw) * u64(active_in) * u64(cout);
}

ComplexityReport count_flops(const ArchPlan& plan, const DomainAdapter* adapter,
                             int head_classes) {
  if (head_classes < 1) throw ConfigError("count_flops: head_classes must be positive");
  if (adapter && adapter->switches.size() != plan.convs.size())
    throw ShapeError("count_flops: adapter layer count does not match the architecture");
  if (adapter)
    for (std::size_t i = 0; i < plan.convs.size(); ++i)
      if (adapter->switches[i].size() != plan.convs[i].cin)
        throw ShapeError("count_flops: switch width mismatch at " + plan.convs[i].name);

  ComplexityReport r;
  auto push_conv_bn = [&](std::size_t i) {
    const ConvPlan& cp = plan.convs[i];
    r.layers.push_back(conv_cost(cp, active_count(adapter, plan, i)));
    r.layers.push_back(elementwise_cost(cp.name + ".bn", "bn", cp.out_h, cp.out_w, cp.cout, 2,
                                        kFloatBits * 4 * u64(cp.cout)));
  };

  push_conv_bn(static_cast<std::size_t>(plan.stem));
  {
    const ConvPlan& stem = plan.convs[static_cast<std::size_t>(plan.stem)];
    r.layers.push_back(
        elementwise_cost(stem.name + ".relu", "relu", stem.out_h, stem.out_w, stem.cout, 1, 0));
  }
  for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
    const BlockPlan& blk = plan.blocks[b];
    const ConvPlan& c1 = plan.convs[static_cast<std::size_t>(blk.c1)];
    const ConvPlan& c2 = plan.convs[static_cast<std::size_t>(blk.c2)];
    push_conv_bn(static_cast<std::size_t>(blk.c1));
    r.layers.push_back(
        elementwise_cost(c1.name + ".relu", "relu", c1.out_h, c1.out_w, c1.cout, 1, 0));
    push_conv_bn(static_cast<std::size_t>(blk.c2));
    if (blk.proj >= 0) push_conv_bn(static_cast<std::size_t>(blk.proj));
    r.layers.push_back(elementwise_cost(c2.name + ".add", "add", c2.out_h, c2.out_w, c2.cout,
                                        1, 0));
    r.layers.push_back(elementwise_cost(c2.name + ".relu", "relu", c2.out_h, c2.out_w, c2.cout,
                                        1, 0));
  }

  {  // global average pool: window adds + one scale per output element
    LayerCost lc;
    lc.layer = "pool";
    lc.kind = "pool";
    lc.active_in = plan.feat_dim;
    lc.total_in = plan.feat_dim;
    lc.flops = u64(plan.feat_dim) * (u64(plan.pool_h) * u64(plan.pool_w) + 1);
    lc.param_bits = 0;
    lc.activation_bytes =
        act_bytes(plan.pool_h, plan.pool_w, plan.feat_dim) + act_bytes(1, 1, plan.feat_dim);
    r.layers.push_back(lc);
  }
  {
    LayerCost lc;
    lc.layer = "head";
    lc.kind = "head";
    lc.active_in = plan.feat_dim;
    lc.total_in = plan.feat_dim;
    lc.flops = 2 * u64(plan.feat_dim) * u64(head_classes) + u64(head_classes);
    lc.param_bits = kFloatBits * (u64(plan.feat_dim) * u64(head_classes) + u64(head_classes));
    lc.activation_bytes = act_bytes(1, 1, plan.feat_dim) + act_bytes(1, 1, head_classes);
    r.layers.push_back(lc);
  }

  double csum = 0.0;
  int gated = 0;
  for (std::size_t i = 0; i < plan.convs.size(); ++i) {
    if (!plan.convs[i].gated) continue;
    ++gated;
    csum += static_cast<double>(active_count(adapter, plan, i)) /
            static_cast<double>(plan.convs[i].cin);
  }
  r.network_complexity = gated > 0 ? csum / gated : 1.0;

  for (const LayerCost& lc : r.layers) {
    r.total_flops += lc.flops;
    r.total_param_bits += lc.param_bits;
    r.peak_activation_bytes = std::max(r.peak_activation_bytes, lc.activation_bytes);
  }
  return r;
}

std::uint64_t trunk_flops(const ComplexityReport& report) {
  std::uint64_t total = 0;
  for (const LayerCost& lc : report.layers)
    if (lc.kind != "head") total += lc.flops;
  return total;
}

double flop_fraction(const ArchPlan& plan, const DomainAdapter& adapter) {
  const std::uint64_t base = trunk_flops(count_flops(plan, nullptr, 1));
  const std::uint64_t masked = trunk_flops(count_flops(plan, &adapter, 1));
  return static_cast<double>(masked) / static_cast<double>(base);
}

double relative_flop_from_fractions(const std::vector<double>& fractions) {
  if (fractions.empty()) throw ConfigError("relative_flop: need at least one adapter");
  double total = 1.0;  // the backbone's own term
  for (double f : fractions) total += f;
  return total / static_cast<double>(fractions.size() + 1);
}

double relative_flop(const ArchPlan& plan, const std::vector<const DomainAdapter*>& adapters) {
  std::vector<double> fractions;
  for (const DomainAdapter* a : adapters) {
    if (!a) throw ConfigError("relative_flop: null adapter");
    fractions.push_back(flop_fraction(plan, *a));
  }
  return relative_flop_from_fractions(fractions);
}

std::uint64_t backbone_param_bits(const ArchPlan& plan) {
  std::uint64_t bits = 0;
  for (const ConvPlan& cp : plan.convs) {
    bits += kFloatBits * u64(cp.kh) * u64(cp.kw) * u64(cp.cin) * u64(cp.cout);  // kernel
    bits += kFloatBits * 4 * u64(cp.cout);                                      // BN set
  }
  return bits;
}

std::uint64_t adapter_param_bits(const ArchPlan& plan) {
  std::uint64_t bits = 0;
  for (const ConvPlan& cp : plan.convs) {
    bits += u64(cp.cin);                    // switches, 1 bit each
    bits += kFloatBits * 4 * u64(cp.cout);  // the domain's BN set
  }
  return bits;
}

double relative_params_from_bits(std::uint64_t backbone_bits,
                                 const std::vector<std::uint64_t>& adapter_bits) {
  if (backbone_bits == 0) throw ConfigError("relative_params: backbone has no parameters");
  std::uint64_t total = backbone_bits;
  for (std::uint64_t b : adapter_bits) total += b;
  return static_cast<double>(total) / static_cast<double>(backbone_bits);
}

double relative_params(const ArchPlan& plan, std::size_t num_adapters) {
  const std::vector<std::uint64_t> per(num_adapters, adapter_param_bits(plan));
  return relative_params_from_bits(backbone_param_bits(plan), per);
}

std::uint64_t memory_footprint(const ArchPlan& plan, const DomainAdapter* adapter,
                               int head_classes) {
  return count_flops(plan, adapter, head_classes).peak_activation_bytes;
}

std::string report_json(const ComplexityReport& report) {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const LayerCost& lc : report.layers) {
    j["layers"].push_back({{"layer", lc.layer},
                           {"kind", lc.kind},
                           {"active_in", lc.active_in},
                           {"total_in", lc.total_in},
                           {"flops", lc.flops},
                           {"param_bits", lc.param_bits},
                           {"activation_bytes", lc.activation_bytes}});
  }
  j["totals"] = {{"network_complexity", report.network_complexity},
                 {"flops", report.total_flops},
                 {"param_bits", report.total_param_bits},
                 {"peak_activation_bytes", report.peak_activation_bytes}};
  return j.dump(2);
}

std::string report_table(const ComplexityReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "layer" << std::setw(6) << "kind" << std::right
     << std::setw(8) << "act/in" << std::setw(14) << "flops" << std::setw(12) << "param_bits"
     << std::setw(12) << "act_bytes" << "\n";
  for (const LayerCost& lc : report.layers) {
    os << std::left << std::setw(14) << lc.layer << std::setw(6) << lc.kind << std::right
       << std::setw(4) << lc.active_in << "/" << std::left << std::setw(3) << lc.total_in
       << std::right << std::setw(14) << lc.flops << std::setw(12) << lc.param_bits
       << std::setw(12) << lc.activation_bytes << "\n";
  }
  os << "complexity " << std::fixed << std::setprecision(4) << report.network_complexity
     << "  flops " << report.total_flops << "  param_bits " << report.total_param_bits
     << "  peak_bytes " << report.peak_activation_bytes << "\n";
  return os.str();
}

}  // namespace ba2
