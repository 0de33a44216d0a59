#include "ba2/net.hpp"

#include <cmath>
#include <sstream>

#include "ba2/hash.hpp"

namespace ba2 {

namespace {

Tensor4<float> tensor_from(const std::vector<float>& v, int n, int h, int w, int c) {
  Tensor4<float> t(n, h, w, c);
  if (t.size() != v.size()) throw ShapeError("tensor_from: size mismatch");
  t.v = v;
  return t;
}

std::uint64_t plane_bytes(int n, int h, int w, int c) {
  return static_cast<std::uint64_t>(n) * h * w * c * sizeof(float);
}

int active_switches(const Tensor4<float>& scores) {
  int a = 0;
  for (float s : scores.v)
    if (s > 0.0f) ++a;
  return a;
}

}  // namespace

ArchPlan plan_architecture(const ResidualCnnConfig& cfg) {
  if (cfg.input_h < 4 || cfg.input_w < 4 || cfg.input_c < 1)
    throw ConfigError("plan_architecture: input must be at least 4x4x1");
  if (cfg.stage_channels.empty()) throw ConfigError("plan_architecture: no stages");
  for (int ch : cfg.stage_channels)
    if (ch < 1) throw ConfigError("plan_architecture: stage channels must be positive");
  if (cfg.blocks_per_stage < 1)
    throw ConfigError("plan_architecture: blocks_per_stage must be >= 1");

  ArchPlan p;
  p.cfg = cfg;
  auto add_conv = [&p](const std::string& name, int kh, int kw, int cin, int cout, int stride,
                       int pad, bool gated, int in_h, int in_w) {
    ConvPlan c;
    c.name = name;
    c.kh = kh;
    c.kw = kw;
    c.cin = cin;
    c.cout = cout;
    c.stride = stride;
    c.pad = pad;
    c.gated = gated;
    c.in_h = in_h;
    c.in_w = in_w;
    c.out_h = conv_out_dim(in_h, kh, stride, pad);
    c.out_w = conv_out_dim(in_w, kw, stride, pad);
    p.convs.push_back(c);
    return static_cast<int>(p.convs.size() - 1);
  };

  int h = cfg.input_h, w = cfg.input_w;
  p.stem = add_conv("stem", 3, 3, cfg.input_c, cfg.stage_channels[0], 1, 1, false, h, w);
  h = p.convs[p.stem].out_h;
  w = p.convs[p.stem].out_w;

  int prev = cfg.stage_channels[0];
  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    const int ch = cfg.stage_channels[s];
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      const int cin = (b == 0) ? prev : ch;
      const std::string base = "s" + std::to_string(s) + "b" + std::to_string(b);
      BlockPlan blk;
      blk.c1 = add_conv(base + "c1", 3, 3, cin, ch, stride, 1, true, h, w);
      const int oh = p.convs[blk.c1].out_h, ow = p.convs[blk.c1].out_w;
      blk.c2 = add_conv(base + "c2", 3, 3, ch, ch, 1, 1, true, oh, ow);
      if (stride != 1 || cin != ch)
        blk.proj = add_conv(base + "proj", 1, 1, cin, ch, stride, 0, true, h, w);
      p.blocks.push_back(blk);
      h = oh;
      w = ow;
    }
    prev = ch;
  }
  p.pool_h = h;
  p.pool_w = w;
  p.feat_dim = prev;
  return p;
}

std::string ArchPlan::descriptor() const {
  std::ostringstream os;
  os << "ba2net/v1;in=" << cfg.input_h << "x" << cfg.input_w << "x" << cfg.input_c;
  for (const ConvPlan& c : convs)
    os << ";conv=" << c.name << ":" << c.kh << "x" << c.kw << ":" << c.cin << ">" << c.cout
       << ":s" << c.stride << ":p" << c.pad << ":g" << (c.gated ? 1 : 0);
  os << ";pool=avg:" << pool_h << "x" << pool_w << ";feat=" << feat_dim;
  return os.str();
}

std::array<std::uint8_t, 32> ArchPlan::hash() const { return sha256_str(descriptor()); }

DenseParams make_dense(int in_features, int out_features, Rng& rng) {
  DenseParams d;
  d.in_features = in_features;
  d.out_features = out_features;
  d.w.resize(static_cast<std::size_t>(in_features) * out_features);
  d.b.assign(static_cast<std::size_t>(out_features), 0.0f);
  const double sd = std::sqrt(1.0 / in_features);
  for (float& x : d.w) x = static_cast<float>(rng.normal(0.0, sd));
  return d;
}

Backbone make_backbone(const ResidualCnnConfig& cfg, int classes, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("make_backbone: need at least 2 classes");
  Backbone bb;
  bb.plan = plan_architecture(cfg);
  bb.classes = classes;
  Rng rng(derive_seed(seed, "backbone-init"));
  for (const ConvPlan& c : bb.plan.convs) {
    Kernel<float> k(c.kh, c.kw, c.cin, c.cout);
    const double sd = std::sqrt(2.0 / (static_cast<double>(c.kh) * c.kw * c.cin));
    for (float& x : k.v) x = static_cast<float>(rng.normal(0.0, sd));
    bb.kernels.push_back(std::move(k));
    bb.bn.emplace_back(c.cout);
  }
  bb.head = make_dense(bb.plan.feat_dim, classes, rng);
  return bb;
}

DomainAdapter make_adapter(const Backbone& backbone, const std::string& domain, float budget,
                           int classes, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("make_adapter: need at least 2 classes");
  DomainAdapter a;
  a.domain = domain;
  a.budget = budget;
  a.classes = classes;
  const ArchPlan& plan = backbone.plan;
  for (std::size_t i = 0; i < plan.convs.size(); ++i) {
    a.switches.emplace_back(plan.convs[i].cin);
    a.bn.push_back(backbone.bn[i]);
    a.gated.push_back(plan.convs[i].gated ? 1 : 0);
  }
  Rng rng(derive_seed(seed, "adapter-head:" + domain));
  a.head = make_dense(plan.feat_dim, classes, rng);
  return a;
}

namespace {

// Applies conv layer i (masked when a switch node is present), recording the
// activation trace entry and the all-gated warning.
NodeId apply_conv(Tape<float>& tape, const ConvPlan& cp, NodeId x, NodeId kernel, NodeId sw,
                  const WarningSink& warn, ActivationTrace* trace) {
  NodeId out;
  int active = cp.cin;
  if (sw >= 0) {
    active = active_switches(tape.val(sw));
    if (active == 0 && warn)
      warn(Warning{cp.name, "all_channels_gated",
                   "every input channel of layer " + cp.name +
                       " is switched off; output is all zeros"});
    out = masked_conv(tape, x, kernel, sw, cp.stride, cp.pad);
  } else {
    out = conv2d(tape, x, kernel, cp.stride, cp.pad);
  }
  if (trace) {
    const Tensor4<float>& in = tape.val(x);
    const Tensor4<float>& ov = tape.val(out);
    trace->entries.push_back({cp.name, plane_bytes(in.n, in.h, in.w, active),
                              plane_bytes(ov.n, ov.h, ov.w, ov.c)});
  }
  return out;
}

}  // namespace

NodeId network_forward(Tape<float>& tape, const ArchPlan& plan, const ForwardParams& params,
                       NodeId input, BnMode mode, const std::vector<BnStats<float>>& running,
                       const WarningSink& warn, ActivationTrace* trace) {
  const std::size_t L = plan.convs.size();
  if (params.kernels.size() != L || params.bn_gamma.size() != L ||
      params.bn_beta.size() != L || params.switches.size() != L || running.size() != L)
    throw ShapeError("network_forward: parameter slot count != conv layer count");

  auto conv_bn = [&](NodeId x, int i) {
    NodeId y = apply_conv(tape, plan.convs[i], x, params.kernels[i], params.switches[i], warn,
                          trace);
    return batchnorm(tape, y, params.bn_gamma[i], params.bn_beta[i], running[i], mode,
                     kBnMomentum, kBnEps);
  };

  NodeId x = relu(tape, conv_bn(input, plan.stem));
  for (const BlockPlan& blk : plan.blocks) {
    NodeId m = relu(tape, conv_bn(x, blk.c1));
    m = conv_bn(m, blk.c2);
    NodeId sk = (blk.proj >= 0) ? conv_bn(x, blk.proj) : x;
    x = relu(tape, add(tape, m, sk));
  }

  const Tensor4<float>& pre_pool = tape.val(x);
  NodeId pooled = avgpool2d(tape, x, pre_pool.h, pre_pool.w, 1);
  if (trace) {
    const Tensor4<float>& pv = tape.val(pooled);
    trace->entries.push_back({"pool",
                              plane_bytes(pre_pool.n, pre_pool.h, pre_pool.w, pre_pool.c),
                              plane_bytes(pv.n, pv.h, pv.w, pv.c)});
  }
  NodeId logits = dense(tape, pooled, params.head_w, params.head_b);
  if (trace) {
    const Tensor4<float>& pv = tape.val(pooled);
    const Tensor4<float>& lv = tape.val(logits);
    trace->entries.push_back({"head", plane_bytes(pv.n, pv.h, pv.w, pv.c),
                              plane_bytes(lv.n, lv.h, lv.w, lv.c)});
  }
  return logits;
}

namespace {

ForwardParams mount_adapter_impl(Tape<float>& tape, const Backbone& backbone,
                                 DomainAdapter& adapter, bool train_adapter,
                                 bool train_kernels, std::vector<BnStats<float>>& running) {
  const ArchPlan& plan = backbone.plan;
  const std::size_t L = plan.convs.size();
  if (adapter.switches.size() != L || adapter.bn.size() != L)
    throw ShapeError("mount_adapter: adapter layer count does not match the architecture");
  ForwardParams p;
  running.clear();
  for (std::size_t i = 0; i < L; ++i) {
    const ConvPlan& cp = plan.convs[i];
    if (adapter.switches[i].size() != cp.cin || adapter.bn[i].channels() != cp.cout)
      throw ShapeError("mount_adapter: layer " + cp.name + " shape mismatch");
    p.kernels.push_back(tape.leaf(backbone.kernels[i], train_kernels));
    p.bn_gamma.push_back(
        tape.leaf(tensor_from(adapter.bn[i].gamma, 1, 1, 1, cp.cout), train_adapter));
    p.bn_beta.push_back(
        tape.leaf(tensor_from(adapter.bn[i].beta, 1, 1, 1, cp.cout), train_adapter));
    if (cp.gated) {
      p.switches.push_back(tape.leaf(
          tensor_from(adapter.switches[i].scores(), 1, 1, 1, cp.cin), train_adapter));
    } else {
      p.switches.push_back(-1);
    }
    running.push_back(BnStats<float>{&adapter.bn[i].running_mean, &adapter.bn[i].running_var});
  }
  if (adapter.head.in_features != plan.feat_dim)
    throw ShapeError("mount_adapter: head expects " + std::to_string(adapter.head.in_features) +
                     " features, architecture provides " + std::to_string(plan.feat_dim));
  p.head_w = tape.leaf(
      tensor_from(adapter.head.w, 1, 1, adapter.head.in_features, adapter.head.out_features),
      train_adapter);
  p.head_b = tape.leaf(tensor_from(adapter.head.b, 1, 1, 1, adapter.head.out_features),
                       train_adapter);
  return p;
}

}  // namespace

ForwardParams mount_adapter(Tape<float>& tape, const Backbone& backbone, DomainAdapter& adapter,
                            bool train_adapter, std::vector<BnStats<float>>& running) {
  return mount_adapter_impl(tape, backbone, adapter, train_adapter, false, running);
}

ForwardParams mount_joint(Tape<float>& tape, const Backbone& backbone, DomainAdapter& adapter,
                          std::vector<BnStats<float>>& running) {
  return mount_adapter_impl(tape, backbone, adapter, true, true, running);
}

ForwardParams mount_backbone(Tape<float>& tape, Backbone& backbone, BackboneTrain train,
                             std::vector<BnStats<float>>& running) {
  const ArchPlan& plan = backbone.plan;
  const bool needs = train == BackboneTrain::Full;
  ForwardParams p;
  running.clear();
  for (std::size_t i = 0; i < plan.convs.size(); ++i) {
    const ConvPlan& cp = plan.convs[i];
    p.kernels.push_back(tape.leaf(backbone.kernels[i], needs));
    p.bn_gamma.push_back(tape.leaf(tensor_from(backbone.bn[i].gamma, 1, 1, 1, cp.cout), needs));
    p.bn_beta.push_back(tape.leaf(tensor_from(backbone.bn[i].beta, 1, 1, 1, cp.cout), needs));
    p.switches.push_back(-1);
    running.push_back(
        BnStats<float>{&backbone.bn[i].running_mean, &backbone.bn[i].running_var});
  }
  p.head_w = tape.leaf(
      tensor_from(backbone.head.w, 1, 1, backbone.head.in_features, backbone.head.out_features),
      needs);
  p.head_b =
      tape.leaf(tensor_from(backbone.head.b, 1, 1, 1, backbone.head.out_features), needs);
  return p;
}

MaskedConvResult masked_conv_forward(Tape<float>& tape, NodeId input,
                                     const AdaptedConvLayer& layer, bool train_switches,
                                     const WarningSink& warn) {
  if (!layer.kernel || !layer.switches)
    throw ConfigError("masked_conv_forward: layer view missing kernel or switches");
  if (layer.switches->size() != layer.kernel->w)
    throw ShapeError("masked_conv_forward: switch count != kernel C_in");
  MaskedConvResult r;
  r.kernel = tape.leaf(*layer.kernel, false);
  r.switches = tape.leaf(
      tensor_from(layer.switches->scores(), 1, 1, 1, layer.switches->size()), train_switches);
  if (layer.switches->active() == 0 && warn)
    warn(Warning{layer.name, "all_channels_gated",
                 "every input channel of layer " + layer.name +
                     " is switched off; output is all zeros"});
  r.out = masked_conv(tape, input, r.kernel, r.switches, layer.stride, layer.padding);
  return r;
}

Tensor4<float> adapter_logits(const Backbone& backbone, DomainAdapter& adapter,
                              const Tensor4<float>& input, ActivationTrace* trace) {
  Tape<float> tape;
  NodeId in = tape.leaf(input, false);
  std::vector<BnStats<float>> running;
  ForwardParams p = mount_adapter(tape, backbone, adapter, false, running);
  NodeId logits =
      network_forward(tape, backbone.plan, p, in, BnMode::Eval, running, WarningSink(), trace);
  return tape.val(logits);
}

Tensor4<float> backbone_logits(Backbone& backbone, const Tensor4<float>& input,
                               ActivationTrace* trace) {
  Tape<float> tape;
  NodeId in = tape.leaf(input, false);
  std::vector<BnStats<float>> running;
  ForwardParams p = mount_backbone(tape, backbone, BackboneTrain::None, running);
  NodeId logits =
      network_forward(tape, backbone.plan, p, in, BnMode::Eval, running, WarningSink(), trace);
  return tape.val(logits);
}

std::vector<float> snapshot_adapter(const DomainAdapter& a) {
  std::vector<float> out;
  for (const SwitchVector& s : a.switches)
    out.insert(out.end(), s.scores().begin(), s.scores().end());
  for (const BnParams& bn : a.bn) {
    out.insert(out.end(), bn.gamma.begin(), bn.gamma.end());
    out.insert(out.end(), bn.beta.begin(), bn.beta.end());
    out.insert(out.end(), bn.running_mean.begin(), bn.running_mean.end());
    out.insert(out.end(), bn.running_var.begin(), bn.running_var.end());
  }
  out.insert(out.end(), a.head.w.begin(), a.head.w.end());
  out.insert(out.end(), a.head.b.begin(), a.head.b.end());
  return out;
}

void restore_adapter(DomainAdapter& a, const std::vector<float>& snap) {
  std::size_t at = 0;
  auto take = [&](std::vector<float>& dst) {
    if (at + dst.size() > snap.size()) throw ShapeError("restore_adapter: snapshot too short");
    std::copy(snap.begin() + static_cast<std::ptrdiff_t>(at),
              snap.begin() + static_cast<std::ptrdiff_t>(at + dst.size()), dst.begin());
    at += dst.size();
  };
  for (SwitchVector& s : a.switches) {
    std::vector<float> scores(static_cast<std::size_t>(s.size()));
    take(scores);
    s.set_scores(std::move(scores));
  }
  for (BnParams& bn : a.bn) {
    take(bn.gamma);
    take(bn.beta);
    take(bn.running_mean);
    take(bn.running_var);
  }
  take(a.head.w);
  take(a.head.b);
  if (at != snap.size()) throw ShapeError("restore_adapter: snapshot size mismatch");
}

}  // namespace ba2
