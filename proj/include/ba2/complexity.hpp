// Exact cost accounting: per-op FLOPs, parameter storage (32-bit floats,
// 1-bit switches), and activation memory. Everything is integer bookkeeping
// derived from the architecture plan, so masked/unmasked ratios are exact
// rationals — tests compare them by cross-multiplication, never by epsilon.
//
// Conventions (documented here once, relied on everywhere):
//   - one multiply-accumulate = 2 FLOPs; counts include padded positions
//   - batch-norm costs 2 FLOPs per element (scale, shift)
//   - ReLU and the residual add cost 1 FLOP per element
//   - average pooling costs (window + 1) FLOPs per output element
//   - the dense head costs 2·F·O + O FLOPs
//   - activation bytes are per sample (N = 1), 4 bytes per value; a masked
//     conv reads only its active input channels; BN/ReLU/add run in place
//   - a masked conv's inference parameters are its kernel slices over active
//     input channels; stored adapter state is counted separately (switches at
//     1 bit, BN sets at 4 arrays of 32-bit floats, classifier heads excluded)
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ba2/adapter.hpp"
#include "ba2/net.hpp"

namespace ba2 {

struct LayerCost {
  std::string layer;
  std::string kind;  // conv | bn | relu | add | pool | head
  int active_in = 0, total_in = 0;
  std::uint64_t flops = 0;
  std::uint64_t param_bits = 0;        // parameters used at inference
  std::uint64_t activation_bytes = 0;  // input (consumed channels) + output; 0 = in place
};

struct ComplexityReport {
  std::vector<LayerCost> layers;
  double network_complexity = 1.0;  // mean over gated convs of active/total
  std::uint64_t total_flops = 0;
  std::uint64_t total_param_bits = 0;
  std::uint64_t peak_activation_bytes = 0;
};

// Mean of a binary switch vector — the layer's complexity fraction.
double layer_complexity(const std::vector<std::uint8_t>& switches);

// FLOPs of one conv layer: 2·out_h·out_w·kh·kw·active_in·cout.
std::uint64_t conv_layer_flops(int kh, int kw, int active_in, int cout, int out_h, int out_w);

// Full cost report for one model: the backbone when `adapter` is null, else
// the network as masked by the adapter. `head_classes` sizes the classifier
// entry (use the owning model's class count).
ComplexityReport count_flops(const ArchPlan& plan, const DomainAdapter* adapter,
                             int head_classes);

// FLOPs of everything except the classifier head. Per-domain head sizes vary,
// so cross-model ratios are defined over the shared trunk.
std::uint64_t trunk_flops(const ComplexityReport& report);

// FLOP(adapter-masked trunk) / FLOP(backbone trunk).
double flop_fraction(const ArchPlan& plan, const DomainAdapter& adapter);

// Mean over {backbone, adapters} of per-model trunk FLOPs relative to the
// backbone; the backbone term contributes exactly 1/(D+1).
double relative_flop_from_fractions(const std::vector<double>& fractions);
double relative_flop(const ArchPlan& plan, const std::vector<const DomainAdapter*>& adapters);

// Stored-parameter accounting (classifier heads excluded on both sides).
std::uint64_t backbone_param_bits(const ArchPlan& plan);  // kernels + BN, 32-bit floats
std::uint64_t adapter_param_bits(const ArchPlan& plan);   // switches at 1 bit + BN floats
double relative_params_from_bits(std::uint64_t backbone_bits,
                                 const std::vector<std::uint64_t>& adapter_bits);
double relative_params(const ArchPlan& plan, std::size_t num_adapters);

// Peak activation bytes for one inference pass (per sample).
std::uint64_t memory_footprint(const ArchPlan& plan, const DomainAdapter* adapter,
                               int head_classes);

std::string report_json(const ComplexityReport& report);
std::string report_table(const ComplexityReport& report);

}  // namespace ba2
