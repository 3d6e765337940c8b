#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>

#include "ebnet/arch/builder.hpp"
#include "ebnet/data/augment.hpp"
#include "ebnet/trainer/trainer.hpp"

namespace ebnet::io {

inline constexpr char kMagic[4] = {'E', 'B', 'N', '1'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class CheckpointKind : std::uint32_t { training = 0, packed = 1 };
enum class RecordType : std::uint8_t { real64 = 0, real32 = 1, packed_bits = 2 };

struct CheckpointMeta {
  arch::ArchSpec spec;
  double tau = 1.0;
  std::uint64_t seed = 0;
  std::int32_t policy_step = 0;
  std::int32_t stage = 1;  // 1: real latent weights, 2: binary weights
  std::int32_t epoch = 0;
  double val_top1 = 0;
  double val_top5 = 0;
  data::Normalization norm;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::training;
  CheckpointMeta meta;
  std::unique_ptr<arch::Network<float>> net;
  std::optional<trainer::AdamState> adam;
};

/// Little-endian: magic, version, kind, meta, tensor records, optional Adam
/// state. Tensor names are parameter paths such as stage1.block0.conv0.ebconv.theta.
void save_checkpoint(std::ostream& os, arch::Network<float>& net, const CheckpointMeta& meta,
                     const trainer::AdamState* adam = nullptr);
void save_checkpoint(const std::filesystem::path& file, arch::Network<float>& net, const CheckpointMeta& meta,
                     const trainer::AdamState* adam = nullptr);

/// Inference model: binary weights as packed bit planes, BN folded to
/// scale/shift, every other parameter as real32.
void export_packed(std::ostream& os, arch::Network<float>& net, const CheckpointMeta& meta);
void export_packed(const std::filesystem::path& file, arch::Network<float>& net, const CheckpointMeta& meta);

/// Reads either kind. Unknown versions raise VersionError, malformed bytes
/// FormatError.
Checkpoint load_checkpoint(std::istream& is);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace ebnet::io
