#include <sstream>

#include "json.hpp"

#include "ebnet/arch/arch.hpp"

namespace ebnet::arch {

namespace {

using U = std::uint64_t;

U u(Index v) { return static_cast<U>(v); }

// Eval-mode BN is exported folded: one scale and one shift per channel.
constexpr U kBnParams = 2;

void add_downsample(CostReport& r, const UnitPlan& up, DownsampleVariant variant) {
  const U ci = u(up.in_channels), co = u(up.out_channels);
  const U in_elems = u(up.in_h * up.in_w) * ci;
  const U hw = u(up.out_h * up.out_w);
  if (up.stride != 1) r.flops += in_elems;  // average pool
  const bool decomposed = up.skip_ratio > 1 && variant != DownsampleVariant::vanilla;
  if (!decomposed) {
    r.flops += hw * ci * co + hw * co;
    r.real_param_count += ci * co + co * kBnParams;
    return;
  }
  const U m = ci / u(up.skip_ratio);
  r.flops += hw * (ci * m + m * co) + hw * (m + co);
  r.real_param_count += ci * m + m * co + (m + co) * kBnParams;
  if (variant == DownsampleVariant::prelu) {
    r.flops += hw * m;
    r.real_param_count += m;
  } else if (variant == DownsampleVariant::relu) {
    r.flops += hw * m;
  }
}

}  // namespace

std::uint64_t conv_bops(Index out_h, Index out_w, Index in_channels, Index out_channels, Index groups, Index kernel_h,
                        Index kernel_w) {
  if (groups < 1 || in_channels % groups != 0) throw GeometryError("conv_bops: channels not divisible by groups");
  return u(out_h) * u(out_w) * u(out_channels) * u(in_channels / groups) * u(kernel_h) * u(kernel_w);
}

CostReport cost_model(const ArchSpec& spec) {
  const NetworkPlan plan = plan_network(spec);
  const U n_experts = u(spec.n_experts);
  CostReport r;

  // stem: conv, BN, PReLU, optional max-pool
  const U sc = u(plan.stem_channels);
  const U stem_hw = u(plan.stem_conv_h * plan.stem_conv_w);
  const U stem_k = u(plan.stem_kernel * plan.stem_kernel) * u(spec.in_channels);
  r.flops += stem_hw * sc * stem_k + 2 * stem_hw * sc;
  r.real_param_count += sc * stem_k + sc * (kBnParams + 1);
  if (plan.stem_maxpool) r.flops += u(plan.stem_out_h * plan.stem_out_w) * sc * 9;

  for (const UnitPlan& up : plan.units) {
    const U ci = u(up.in_channels), co = u(up.out_channels);
    const U in_elems = u(up.in_h * up.in_w) * ci;
    const U out_elems = u(up.out_h * up.out_w) * co;
    const U experts = up.group_mix ? 1 : n_experts;
    const U weights = co * (ci / u(up.groups)) * u(up.kernel * up.kernel);
    r.bops += conv_bops(up.out_h, up.out_w, up.in_channels, up.out_channels, up.groups, up.kernel, up.kernel);
    r.binary_param_bits += experts * weights;
    // BN in, alpha per expert, PReLU out
    r.real_param_count += ci * kBnParams + experts * co + co;
    r.flops += in_elems + out_elems;
    if (!up.group_mix) {
      r.real_param_count += ci * n_experts;  // omega
      r.flops += ci * n_experts;             // psi projection
    }
    if (up.projected_skip) add_downsample(r, up, spec.downsample);
  }

  const U fc = u(plan.final_channels);
  r.flops += fc * u(plan.final_h * plan.final_w) + fc * u(spec.classes);
  r.real_param_count += fc * u(spec.classes) + u(spec.classes);
  r.model_size_bytes = (r.binary_param_bits + 7) / 8 + 4 * r.real_param_count;
  return r;
}

std::uint64_t representational_states(Index c, Index h, Index w) {
  if (c < 1 || h < 1 || w < 1) throw ShapeError("representational_states: dimensions must be positive");
  return u(c) * u(h) * u(w);
}

std::string CostReport::to_text() const {
  std::ostringstream os;
  os << "bops=" << bops << "\nflops=" << flops << "\nbinary_param_bits=" << binary_param_bits
     << "\nreal_param_count=" << real_param_count << "\nmodel_size_bytes=" << model_size_bytes << '\n';
  return os.str();
}

std::string CostReport::to_json() const {
  const nlohmann::ordered_json j = {{"bops", bops},
                                    {"flops", flops},
                                    {"binary_param_bits", binary_param_bits},
                                    {"real_param_count", real_param_count},
                                    {"model_size_bytes", model_size_bytes}};
  return j.dump();
}

}  // namespace ebnet::arch
