#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ebnet/errors.hpp"
#include "ebnet/graph/layers.hpp"
#include "ebnet/tensor.hpp"

namespace ebnet::arch {

using graph::DownsampleVariant;

enum class Stem { imagenet7x7, cifar3x3 };

/// off: never; automatic: after every block of a stage with G > 1; all:
/// after every block.
enum class GroupMix { off, automatic, all };

struct ArchSpec {
  std::array<int, 4> blocks{2, 2, 2, 2};
  int expansion = 1;
  std::array<int, 4> groups{1, 1, 1, 1};
  int n_experts = 1;
  GroupMix group_mix = GroupMix::automatic;
  DownsampleVariant downsample = DownsampleVariant::prelu;
  int input_resolution = 224;
  Stem stem = Stem::imagenet7x7;
  int classes = 1000;
  int base_width = 64;
  int in_channels = 3;

  Index stage_width(int stage) const { return Index(base_width) * expansion * (Index(1) << stage); }
  Index stem_width() const { return base_width; }
  Index downsample_ratio() const { return expansion > 1 ? Index(expansion) * expansion : 1; }
  bool mix_after(int stage) const {
    return group_mix == GroupMix::all || (group_mix == GroupMix::automatic && groups[stage] > 1);
  }
  /// Throws ConfigError on any divisibility or range violation.
  void validate() const;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

/// `N0N1N2N3-E-G0:G1:G2:G3`. Only the DSL fields are set; the rest keep
/// their defaults. Throws ParseError (with position) or ConfigError.
ArchSpec parse_arch(std::string_view text);
std::string format_arch(const ArchSpec& spec);

std::string_view to_string(Stem s);
std::string_view to_string(GroupMix g);
std::string_view to_string(DownsampleVariant v);
Stem parse_stem(std::string_view s);
GroupMix parse_group_mix(std::string_view s);
DownsampleVariant parse_downsample(std::string_view s);

// ---- topology plan -----------------------------------------------------------------

/// One binary unit (EBConv unit or group-mix unit) with resolved shapes.
struct UnitPlan {
  std::string name;
  int stage = 0;
  int block = 0;
  bool group_mix = false;
  Index in_channels = 0;
  Index out_channels = 0;
  Index stride = 1;
  Index groups = 1;
  Index kernel = 3;
  Index in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  bool projected_skip = false;
  Index skip_ratio = 1;
};

struct NetworkPlan {
  Index stem_channels = 0;
  Index stem_kernel = 0;
  Index stem_stride = 0;
  Index stem_out_h = 0, stem_out_w = 0;  // after the optional max-pool
  Index stem_conv_h = 0, stem_conv_w = 0;
  bool stem_maxpool = false;
  std::vector<UnitPlan> units;
  Index final_channels = 0;
  Index final_h = 0, final_w = 0;
};

NetworkPlan plan_network(const ArchSpec& spec);

// ---- cost model ---------------------------------------------------------------------

struct CostReport {
  std::uint64_t bops = 0;
  std::uint64_t flops = 0;
  std::uint64_t binary_param_bits = 0;
  std::uint64_t real_param_count = 0;
  std::uint64_t model_size_bytes = 0;

  std::string to_text() const;
  std::string to_json() const;
};

/// H_out * W_out * C_out * (C_in / G) * k_h * k_w.
std::uint64_t conv_bops(Index out_h, Index out_w, Index in_channels, Index out_channels, Index groups, Index kernel_h,
                        Index kernel_w);

CostReport cost_model(const ArchSpec& spec);

/// log2 of the number of distinct binary tensors of shape (c, h, w).
std::uint64_t representational_states(Index c, Index h, Index w);

}  // namespace ebnet::arch
