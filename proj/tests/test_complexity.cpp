// Cost accounting: FLOP/parameter/footprint formulas, exact masked/unmasked
// proportionality (checked by integer cross-multiplication), and the
// instrumented-run oracles.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdint>
#include <map>

#include "json.hpp"

#include "ba2/complexity.hpp"
#include "ba2/net.hpp"
#include "testutil.hpp"

using namespace ba2;
using namespace ba2::test;

namespace {

ResidualCnnConfig small_cfg() {
  ResidualCnnConfig cfg;
  cfg.input_h = 8;
  cfg.input_w = 8;
  cfg.input_c = 1;
  cfg.stage_channels = {4, 8};
  cfg.blocks_per_stage = 1;
  return cfg;
}

// Instrumented loop-nest: walk the direct convolution over the PADDED input
// (padding is materialized zeros under this accounting convention) and count
// one multiply plus one accumulate per kernel tap over active channels.
std::uint64_t conv_flops_oracle(int kh, int kw, int cin, int active, int cout, int in_h,
                                int in_w, int stride, int pad) {
  const int oh = conv_out_dim(in_h, kh, stride, pad);
  const int ow = conv_out_dim(in_w, kw, stride, pad);
  std::uint64_t muls = 0, adds = 0;
  for (int oi = 0; oi < oh; ++oi)
    for (int oj = 0; oj < ow; ++oj)
      for (int o = 0; o < cout; ++o)
        for (int c = 0; c < cin; ++c) {
          if (c >= active) continue;  // which channels are active is irrelevant to the count
          for (int u = 0; u < kh; ++u)
            for (int v = 0; v < kw; ++v) {
              ++muls;
              ++adds;
            }
        }
  return muls + adds;
}

std::map<std::string, LayerCost> by_name(const ComplexityReport& r) {
  std::map<std::string, LayerCost> m;
  for (const LayerCost& lc : r.layers) m[lc.layer] = lc;
  return m;
}

}  // namespace

TEST_CASE("layer_complexity is the mean of the binary switches") {
  CHECK(layer_complexity({1, 1, 1, 1}) == 1.0);
  CHECK(layer_complexity({1, 0, 1, 1, 0, 0, 0, 0}) == 0.375);
  CHECK(layer_complexity({0, 0, 0}) == 0.0);
  CHECK_THROWS_AS(layer_complexity({}), ShapeError);
}

TEST_CASE("conv FLOP formula: convention pin and loop-nest oracle") {
  // One output pixel, 1x1 kernel, one in and one out channel: one multiply
  // plus one accumulate.
  CHECK(conv_layer_flops(1, 1, 1, 1, 1, 1) == 2);

  // Spec'd instance: 3x3 kernel, 8x8 output, 10 of 16 input channels active,
  // 32 outputs.
  CHECK(conv_layer_flops(3, 3, 10, 32, 8, 8) ==
        conv_flops_oracle(3, 3, 16, 10, 32, 8, 8, 1, 1));

  Rng rng(911);
  for (int t = 0; t < 20; ++t) {
    const int kh = 2 * rng.uniform_int(0, 2) + 1, kw = 2 * rng.uniform_int(0, 2) + 1;
    const int cin = rng.uniform_int(1, 12), cout = rng.uniform_int(1, 12);
    const int active = rng.uniform_int(0, cin);
    const int in_h = rng.uniform_int(kh, 14), in_w = rng.uniform_int(kw, 14);
    const int stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 2);
    const int oh = conv_out_dim(in_h, kh, stride, pad), ow = conv_out_dim(in_w, kw, stride, pad);
    if (active == 0) continue;  // conv_layer_flops(…, 0, …) is the zero count
    CHECK(conv_layer_flops(kh, kw, active, cout, oh, ow) ==
          conv_flops_oracle(kh, kw, cin, active, cout, in_h, in_w, stride, pad));
  }
}

TEST_CASE("masked/unmasked FLOPs and kernel bits are proportional as exact rationals") {
  Rng rng(333);
  for (int t = 0; t < 50; ++t) {
    const int kh = 2 * rng.uniform_int(0, 3) + 1, kw = 2 * rng.uniform_int(0, 3) + 1;
    const int cin = rng.uniform_int(1, 64), cout = rng.uniform_int(1, 64);
    const int active = rng.uniform_int(0, cin);
    const int oh = rng.uniform_int(1, 32), ow = rng.uniform_int(1, 32);
    const std::uint64_t masked = conv_layer_flops(kh, kw, active, cout, oh, ow);
    const std::uint64_t full = conv_layer_flops(kh, kw, cin, cout, oh, ow);
    // masked/full == active/cin, cross-multiplied in integers
    CHECK(masked * static_cast<std::uint64_t>(cin) ==
          full * static_cast<std::uint64_t>(active));
    const std::uint64_t kb_masked = 32ull * kh * kw * static_cast<std::uint64_t>(active) * cout;
    const std::uint64_t kb_full = 32ull * kh * kw * static_cast<std::uint64_t>(cin) * cout;
    CHECK(kb_masked * static_cast<std::uint64_t>(cin) ==
          kb_full * static_cast<std::uint64_t>(active));
  }
}

TEST_CASE("count_flops: per-layer proportionality and totals==sums on a real plan") {
  Backbone bb = make_backbone(small_cfg(), 3, 17);
  DomainAdapter ad = make_adapter(bb, "d", 0.5f, 3, 5);
  Rng rng(10);
  for (std::size_t i = 0; i < ad.switches.size(); ++i) {
    if (!ad.gated[i]) continue;
    std::vector<float> s(static_cast<std::size_t>(ad.switches[i].size()));
    for (auto& x : s) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    s[0] = 0.5f;  // keep at least one channel alive
    ad.switches[i].set_scores(std::move(s));
  }

  const ComplexityReport base = count_flops(bb.plan, nullptr, bb.classes);
  const ComplexityReport masked = count_flops(bb.plan, &ad, ad.classes);
  const auto base_by = by_name(base);

  for (const LayerCost& lc : masked.layers) {
    const LayerCost& ref = base_by.at(lc.layer);
    if (lc.kind == "conv") {
      CHECK(lc.flops * static_cast<std::uint64_t>(lc.total_in) ==
            ref.flops * static_cast<std::uint64_t>(lc.active_in));
      CHECK(lc.param_bits * static_cast<std::uint64_t>(lc.total_in) ==
            ref.param_bits * static_cast<std::uint64_t>(lc.active_in));
    } else {
      // BN/ReLU/add/pool/head costs do not depend on the mask.
      CHECK(lc.flops == ref.flops);
      CHECK(lc.param_bits == ref.param_bits);
    }
  }

  for (const ComplexityReport* r : {&base, &masked}) {
    std::uint64_t fl = 0, pb = 0, peak = 0;
    for (const LayerCost& lc : r->layers) {
      fl += lc.flops;
      pb += lc.param_bits;
      peak = std::max(peak, lc.activation_bytes);
    }
    CHECK(r->total_flops == fl);
    CHECK(r->total_param_bits == pb);
    CHECK(r->peak_activation_bytes == peak);
  }

  // Network complexity is the mean over gated convs of active/total.
  double want = 0.0;
  int gated = 0;
  for (std::size_t i = 0; i < bb.plan.convs.size(); ++i) {
    if (!bb.plan.convs[i].gated) continue;
    ++gated;
    want += static_cast<double>(ad.switches[i].active()) / bb.plan.convs[i].cin;
  }
  CHECK(masked.network_complexity == doctest::Approx(want / gated).epsilon(1e-12));
  CHECK(base.network_complexity == 1.0);

  CHECK_THROWS_AS(count_flops(bb.plan, nullptr, 0), ConfigError);
  DomainAdapter bad = ad;
  bad.switches.pop_back();
  CHECK_THROWS_AS(count_flops(bb.plan, &bad, 3), ShapeError);
}

TEST_CASE("monotonicity: turning a switch on never decreases any cost") {
  Backbone bb = make_backbone(small_cfg(), 3, 21);
  DomainAdapter ad = make_adapter(bb, "d", 0.5f, 3, 6);
  Rng rng(40);
  for (std::size_t i = 0; i < ad.switches.size(); ++i) {
    if (!ad.gated[i]) continue;
    std::vector<float> s(static_cast<std::size_t>(ad.switches[i].size()));
    for (auto& x : s) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    ad.switches[i].set_scores(std::move(s));
  }
  for (std::size_t i = 0; i < ad.switches.size(); ++i) {
    if (!ad.gated[i]) continue;
    for (int c = 0; c < ad.switches[i].size(); ++c) {
      if (ad.switches[i].bits()[static_cast<std::size_t>(c)]) continue;
      const ComplexityReport before = count_flops(bb.plan, &ad, 3);
      const float keep = ad.switches[i].scores()[static_cast<std::size_t>(c)];
      ad.switches[i].set_score(c, 1.0f);
      const ComplexityReport after = count_flops(bb.plan, &ad, 3);
      CHECK(after.total_flops >= before.total_flops);
      CHECK(after.total_param_bits >= before.total_param_bits);
      CHECK(after.peak_activation_bytes >= before.peak_activation_bytes);
      CHECK(memory_footprint(bb.plan, &ad, 3) >= before.peak_activation_bytes);
      ad.switches[i].set_score(c, keep);
    }
  }
}

TEST_CASE("relative FLOP metric") {
  // Averaging formula, backbone term included.
  CHECK(relative_flop_from_fractions({0.5, 0.7}) == (1.0 + 0.5 + 0.7) / 3.0);
  CHECK(relative_flop_from_fractions({1.0}) == 1.0);
  CHECK_THROWS_AS(relative_flop_from_fractions({}), ConfigError);

  Backbone bb = make_backbone(small_cfg(), 3, 30);
  DomainAdapter all_on = make_adapter(bb, "d0", 1.0f, 4, 1);
  CHECK(flop_fraction(bb.plan, all_on) == 1.0);
  CHECK(relative_flop(bb.plan, {&all_on}) == 1.0);

  // Head sizes differ between models; the metric is defined over the trunk,
  // so an all-on adapter sits at exactly 1 regardless of its class count.
  DomainAdapter ad = make_adapter(bb, "d1", 0.5f, 7, 2);
  for (std::size_t i = 0; i < ad.switches.size(); ++i) {
    if (!ad.gated[i]) continue;
    std::vector<float> s = ad.switches[i].scores();
    for (std::size_t c = 0; c < s.size(); c += 2) s[c] = -1.0f;
    ad.switches[i].set_scores(std::move(s));
  }
  const double frac = flop_fraction(bb.plan, ad);
  CHECK(frac < 1.0);
  CHECK(frac > 0.0);
  CHECK(relative_flop(bb.plan, {&all_on, &ad}) == (1.0 + 1.0 + frac) / 3.0);
  CHECK_THROWS_AS(relative_flop(bb.plan, {nullptr}), ConfigError);
}

TEST_CASE("relative parameter storage: 32-bit floats, 1-bit switches, heads excluded") {
  CHECK(relative_params_from_bits(32000, {}) == 1.0);
  // 1000 backbone floats; adapter adds 1000 switch bits and 20 BN floats.
  CHECK(relative_params_from_bits(32000, {1000 + 640}) == 1.05125);

  // Hand-computed counts for the small plan: convs are stem 3x3 1->4,
  // s0b0c1/c2 3x3 4->4, s1b0c1 3x3 4->8, s1b0c2 3x3 8->8, s1b0proj 1x1 4->8.
  Backbone bb = make_backbone(small_cfg(), 3, 2);
  const std::uint64_t kernel_floats = 36 + 144 + 144 + 288 + 576 + 32;
  const std::uint64_t bn_floats = 4ull * (4 + 4 + 4 + 8 + 8 + 8);
  CHECK(backbone_param_bits(bb.plan) == 32 * (kernel_floats + bn_floats));
  const std::uint64_t switch_bits = 1 + 4 + 4 + 4 + 8 + 4;
  CHECK(adapter_param_bits(bb.plan) == switch_bits + 32 * bn_floats);

  CHECK(relative_params(bb.plan, 0) == 1.0);
  const double two = relative_params(bb.plan, 2);
  const double want = static_cast<double>(32 * (kernel_floats + bn_floats) +
                                          2 * (switch_bits + 32 * bn_floats)) /
                      static_cast<double>(32 * (kernel_floats + bn_floats));
  CHECK(two == want);
  CHECK_THROWS_AS(relative_params_from_bits(0, {}), ConfigError);
}

TEST_CASE("memory footprint: all-on equals backbone; halving channels halves input terms") {
  ResidualCnnConfig cfg = small_cfg();
  cfg.input_c = 2;
  Backbone bb = make_backbone(cfg, 3, 3);
  DomainAdapter all_on = make_adapter(bb, "d", 1.0f, 3, 4);
  CHECK(memory_footprint(bb.plan, &all_on, 3) == memory_footprint(bb.plan, nullptr, 3));

  DomainAdapter half = make_adapter(bb, "h", 0.5f, 3, 4);
  for (std::size_t i = 0; i < half.switches.size(); ++i) {
    if (!half.gated[i]) continue;
    std::vector<float> s = half.switches[i].scores();
    REQUIRE(s.size() % 2 == 0);
    for (std::size_t c = 0; c < s.size() / 2; ++c) s[c] = -1.0f;
    half.switches[i].set_scores(std::move(s));
  }
  const auto base_by = by_name(count_flops(bb.plan, nullptr, 3));
  const ComplexityReport hr = count_flops(bb.plan, &half, 3);
  int checked = 0;
  for (const LayerCost& lc : hr.layers) {
    if (lc.kind != "conv" || lc.active_in == lc.total_in) continue;
    const LayerCost& ref = base_by.at(lc.layer);
    const ConvPlan* cp = nullptr;
    for (const ConvPlan& c : bb.plan.convs)
      if (c.name == lc.layer) cp = &c;
    REQUIRE(cp != nullptr);
    // The input term halves; the output term is untouched.
    const std::uint64_t full_in = 4ull * cp->in_h * cp->in_w * cp->cin;
    CHECK(ref.activation_bytes - lc.activation_bytes == full_in / 2);
    ++checked;
  }
  CHECK(checked > 0);
}

TEST_CASE("memory footprint equals the instrumented inference run") {
  Backbone bb = make_backbone(small_cfg(), 3, 55);
  DomainAdapter ad = make_adapter(bb, "d", 0.5f, 3, 9);
  Rng rng(71);
  for (std::size_t i = 0; i < ad.switches.size(); ++i) {
    if (!ad.gated[i]) continue;
    std::vector<float> s(static_cast<std::size_t>(ad.switches[i].size()));
    for (auto& x : s) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    s[s.size() / 2] = 0.3f;
    ad.switches[i].set_scores(std::move(s));
  }

  Tensor4<float> x = random_tensor<float>(rng, 1, 8, 8, 1);
  ActivationTrace trace;
  (void)adapter_logits(bb, ad, x, &trace);
  std::uint64_t oracle_peak = 0;
  for (const ActivationTrace::Entry& e : trace.entries)
    oracle_peak = std::max(oracle_peak, e.input_bytes + e.output_bytes);
  CHECK(memory_footprint(bb.plan, &ad, ad.classes) == oracle_peak);

  // And for the unmasked backbone.
  ActivationTrace bt;
  (void)backbone_logits(bb, x, &bt);
  std::uint64_t bpeak = 0;
  for (const ActivationTrace::Entry& e : bt.entries)
    bpeak = std::max(bpeak, e.input_bytes + e.output_bytes);
  CHECK(memory_footprint(bb.plan, nullptr, bb.classes) == bpeak);
}

TEST_CASE("relative FLOP equals the fraction of inference parameters on conv-uniform nets") {
  // Single stage, stride 1 everywhere: every conv shares the same spatial
  // size, so FLOPs and used-parameter bits are proportional layer by layer
  // with one shared constant, and the two network-level fractions coincide
  // exactly.
  ResidualCnnConfig cfg;
  cfg.input_h = 6;
  cfg.input_w = 6;
  cfg.input_c = 4;
  cfg.stage_channels = {4};
  cfg.blocks_per_stage = 2;
  Backbone bb = make_backbone(cfg, 2, 77);
  DomainAdapter ad = make_adapter(bb, "d", 0.5f, 2, 3);
  Rng rng(13);
  for (std::size_t i = 0; i < ad.switches.size(); ++i) {
    if (!ad.gated[i]) continue;
    std::vector<float> s(static_cast<std::size_t>(ad.switches[i].size()));
    for (auto& v : s) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    ad.switches[i].set_scores(std::move(s));
  }

  const ComplexityReport base = count_flops(bb.plan, nullptr, 2);
  const ComplexityReport masked = count_flops(bb.plan, &ad, 2);
  std::uint64_t f_base = 0, f_mask = 0, p_base = 0, p_mask = 0;
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    if (base.layers[i].kind != "conv") continue;
    f_base += base.layers[i].flops;
    f_mask += masked.layers[i].flops;
    p_base += base.layers[i].param_bits;
    p_mask += masked.layers[i].param_bits;
  }
  // f_mask/f_base == p_mask/p_base, cross-multiplied
  CHECK(f_mask * p_base == p_mask * f_base);
}

TEST_CASE("report emit: JSON schema and table") {
  Backbone bb = make_backbone(small_cfg(), 3, 1);
  const ComplexityReport r = count_flops(bb.plan, nullptr, 3);
  const nlohmann::json j = nlohmann::json::parse(report_json(r));
  REQUIRE(j.contains("layers"));
  REQUIRE(j.contains("totals"));
  REQUIRE(j["layers"].is_array());
  CHECK(j["layers"].size() == r.layers.size());
  for (const auto& e : j["layers"]) {
    CHECK(e.contains("layer"));
    CHECK(e.contains("kind"));
    CHECK(e.contains("active_in"));
    CHECK(e.contains("total_in"));
    CHECK(e.contains("flops"));
    CHECK(e.contains("param_bits"));
    CHECK(e.contains("activation_bytes"));
  }
  CHECK(j["totals"]["flops"].get<std::uint64_t>() == r.total_flops);
  CHECK(j["totals"]["param_bits"].get<std::uint64_t>() == r.total_param_bits);
  CHECK(j["totals"]["peak_activation_bytes"].get<std::uint64_t>() ==
        r.peak_activation_bytes);

  const std::string table = report_table(r);
  CHECK(table.find("stem") != std::string::npos);
  CHECK(table.find("head") != std::string::npos);
  CHECK(table.find("flops") != std::string::npos);
}
