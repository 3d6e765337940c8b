#include "ebnet/arch/arch.hpp"

namespace ebnet::arch {

namespace {

Index conv_out(Index len, Index k, Index s, Index p) { return (len + 2 * p - k) / s + 1; }

}  // namespace

NetworkPlan plan_network(const ArchSpec& spec) {
  spec.validate();
  NetworkPlan plan;
  plan.stem_channels = spec.stem_width();
  Index h = spec.input_resolution;
  Index w = spec.input_resolution;
  if (spec.stem == Stem::imagenet7x7) {
    plan.stem_kernel = 7;
    plan.stem_stride = 2;
    h = conv_out(h, 7, 2, 3);
    w = conv_out(w, 7, 2, 3);
    plan.stem_conv_h = h;
    plan.stem_conv_w = w;
    plan.stem_maxpool = true;
    h = conv_out(h, 3, 2, 1);
    w = conv_out(w, 3, 2, 1);
  } else {
    plan.stem_kernel = 3;
    plan.stem_stride = 1;
    plan.stem_conv_h = h;
    plan.stem_conv_w = w;
  }
  plan.stem_out_h = h;
  plan.stem_out_w = w;

  Index ci = plan.stem_channels;
  for (int s = 0; s < 4; ++s) {
    const Index co = spec.stage_width(s);
    for (int b = 0; b < spec.blocks[s]; ++b) {
      const std::string block = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      for (int u = 0; u < 2; ++u) {
        UnitPlan up;
        up.name = block + ".conv" + std::to_string(u);
        up.stage = s;
        up.block = b;
        up.in_channels = ci;
        up.out_channels = co;
        up.stride = (s > 0 && b == 0 && u == 0) ? 2 : 1;
        up.groups = spec.groups[s];
        up.in_h = h;
        up.in_w = w;
        up.out_h = conv_out(h, 3, up.stride, 1);
        up.out_w = conv_out(w, 3, up.stride, 1);
        up.projected_skip = up.stride != 1 || ci != co;
        up.skip_ratio = spec.downsample_ratio();
        plan.units.push_back(up);
        h = up.out_h;
        w = up.out_w;
        ci = co;
      }
      if (spec.mix_after(s)) {
        UnitPlan mix;
        mix.name = block + ".mix";
        mix.stage = s;
        mix.block = b;
        mix.group_mix = true;
        mix.in_channels = mix.out_channels = co;
        mix.kernel = 1;
        mix.in_h = mix.out_h = h;
        mix.in_w = mix.out_w = w;
        plan.units.push_back(mix);
      }
    }
  }
  plan.final_channels = ci;
  plan.final_h = h;
  plan.final_w = w;
  return plan;
}

}  // namespace ebnet::arch
