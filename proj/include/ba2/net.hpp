// The desk-scale residual CNN: architecture planning, backbone parameters,
// and the shared forward builder used by pretraining, fine-tuning, adapter
// training, and inference.
//
// Topology: stem conv, then `blocks_per_stage` residual blocks per stage
// (two 3x3 convs each; the first block of stages past the first downsamples
// by 2 with a 1x1 projection on the skip), global average pooling, and a
// dense classifier. Every conv except the stem is gated by a per-input-
// channel switch vector.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ba2/adapter.hpp"
#include "ba2/ops.hpp"
#include "ba2/rng.hpp"
#include "ba2/tape.hpp"
#include "ba2/tensor.hpp"

namespace ba2 {

inline constexpr float kBnMomentum = 0.1f;
inline constexpr float kBnEps = 1e-5f;

struct ResidualCnnConfig {
  int input_h = 16, input_w = 16, input_c = 1;
  std::vector<int> stage_channels = {16, 32, 64};
  int blocks_per_stage = 1;
};

struct ConvPlan {
  std::string name;
  int kh = 3, kw = 3, cin = 0, cout = 0, stride = 1, pad = 1;
  bool gated = true;          // stem runs ungated
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;  // resolved for the config's input size
};

struct BlockPlan {
  int c1 = -1, c2 = -1, proj = -1;  // indices into ArchPlan::convs; proj<0 = identity skip
};

struct ArchPlan {
  ResidualCnnConfig cfg;
  std::vector<ConvPlan> convs;     // execution/serialization order
  std::vector<BlockPlan> blocks;
  int stem = 0;
  int pool_h = 0, pool_w = 0;      // global average pool window
  int feat_dim = 0;                // dense input features

  // Ordered layer-shape descriptor. Identifies the architecture (not the
  // weights, and not the per-domain head size).
  std::string descriptor() const;
  std::array<std::uint8_t, 32> hash() const;  // sha256 of the descriptor
};

ArchPlan plan_architecture(const ResidualCnnConfig& cfg);

// The shared, pretrainable trunk plus its pretraining head (domain 0).
struct Backbone {
  ArchPlan plan;
  std::vector<Kernel<float>> kernels;  // per conv, plan order
  std::vector<BnParams> bn;            // per conv, plan order
  DenseParams head;
  int classes = 0;
};

Backbone make_backbone(const ResidualCnnConfig& cfg, int classes, std::uint64_t seed);
DenseParams make_dense(int in_features, int out_features, Rng& rng);

// Fresh adapter for one (domain, budget): switches all-on at the default
// init, BN parameter sets copied from the backbone, and a newly initialized
// head for `classes` outputs.
DomainAdapter make_adapter(const Backbone& backbone, const std::string& domain, float budget,
                           int classes, std::uint64_t seed);

// Per-op activation sizes recorded during a forward pass, for the memory
// accounting oracle. input_bytes counts only the channels the op actually
// consumes (a gated conv does not materialize switched-off input channels);
// output_bytes is the full produced tensor. In-place ops (BN, ReLU) and the
// residual add are not recorded.
struct ActivationTrace {
  struct Entry {
    std::string layer;
    std::uint64_t input_bytes = 0;
    std::uint64_t output_bytes = 0;
  };
  std::vector<Entry> entries;
};

// Tape node ids for every parameter slot of one mounted network. Layers
// whose switch node is -1 run the plain (unmasked) convolution.
struct ForwardParams {
  std::vector<NodeId> kernels;
  std::vector<NodeId> bn_gamma, bn_beta;
  std::vector<NodeId> switches;
  NodeId head_w = -1, head_b = -1;
};

// Runs the full network. `running` aliases the BN running statistics for
// each conv layer (read in eval mode, updated in train mode). Returns the
// logits node.
NodeId network_forward(Tape<float>& tape, const ArchPlan& plan, const ForwardParams& params,
                       NodeId input, BnMode mode, const std::vector<BnStats<float>>& running,
                       const WarningSink& warn, ActivationTrace* trace);

// Convenience: push parameter leaves for (backbone ⊕ adapter) onto the tape.
// train_adapter=true marks switches, BN and head as requiring grad; kernels
// are always frozen here.
ForwardParams mount_adapter(Tape<float>& tape, const Backbone& backbone, DomainAdapter& adapter,
                            bool train_adapter, std::vector<BnStats<float>>& running);

// The joint multi-budget mode's mount: like mount_adapter with training on,
// but the kernels also require grad (they are shared and fine-tuned there).
ForwardParams mount_joint(Tape<float>& tape, const Backbone& backbone, DomainAdapter& adapter,
                          std::vector<BnStats<float>>& running);

// Push the plain backbone (no switches). train selects which leaves require
// grad: None (eval), Head (classifier only), or Full (kernels, BN, head).
enum class BackboneTrain { None, Full };
ForwardParams mount_backbone(Tape<float>& tape, Backbone& backbone, BackboneTrain train,
                             std::vector<BnStats<float>>& running);

// One straight-through masked conv applied via the composed layer view; the
// layer-level entry point used by tests and tooling. Pushes the kernel
// (frozen) and switch leaves itself and reports an all-channels-gated layer
// through `warn`.
struct MaskedConvResult {
  NodeId out = -1;
  NodeId kernel = -1;
  NodeId switches = -1;
};
MaskedConvResult masked_conv_forward(Tape<float>& tape, NodeId input,
                                     const AdaptedConvLayer& layer, bool train_switches,
                                     const WarningSink& warn);

// Eval-mode inference helpers (no tape kept around by the caller).
Tensor4<float> adapter_logits(const Backbone& backbone, DomainAdapter& adapter,
                              const Tensor4<float>& input, ActivationTrace* trace = nullptr);
Tensor4<float> backbone_logits(Backbone& backbone, const Tensor4<float>& input,
                               ActivationTrace* trace = nullptr);

// Writes/reads every trainable float of the model structs, used for
// snapshotting during training. Order is fixed (plan order).
std::vector<float> snapshot_adapter(const DomainAdapter& a);
void restore_adapter(DomainAdapter& a, const std::vector<float>& snap);

}  // namespace ba2
