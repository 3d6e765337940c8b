#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ebnet/data/augment.hpp"
#include "ebnet/rng.hpp"
#include "ebnet/tensor.hpp"

namespace ebnet::data {

enum class DatasetKind { cifar10, mnist, imagefolder };
enum class Split { train, test };

DatasetKind parse_dataset_kind(std::string_view s);
std::string_view to_string(DatasetKind k);

/// Decoded images kept as raw bytes (CIFAR-10, MNIST) or as file paths
/// decoded on demand (imagefolder).
struct Dataset {
  DatasetKind kind = DatasetKind::cifar10;
  Index channels = 0, height = 0, width = 0;
  int classes = 0;
  std::vector<std::uint8_t> pixels;  // N * C * H * W, planar per sample
  std::vector<std::string> files;
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  /// One sample in [0, 1] as (1, C, H, W), undecorated by augmentation.
  Tensor<float> image(Index i) const;
};

/// Parses one CIFAR-10 binary batch file (records of 1 label + 3072 bytes).
Dataset read_cifar10_file(const std::filesystem::path& file);
/// train = data_batch_1..5.bin, test = test_batch.bin; each must hold
/// exactly 10000 records. `root` may also point at its parent directory.
Dataset load_cifar10(const std::filesystem::path& root, Split split);
Dataset load_mnist(const std::filesystem::path& root, Split split);
/// root/{train,val}/<class>/<image>; class ids follow sorted directory names.
Dataset load_imagefolder(const std::filesystem::path& root, Split split);
Dataset load_dataset(DatasetKind kind, const std::filesystem::path& root, Split split);

/// Per-channel mean/std of a split in [0, 1] units.
Normalization compute_normalization(const Dataset& ds);

/// Permutation of [0, n) for `epoch`, derived only from (seed, epoch).
std::vector<Index> epoch_order(Index n, std::uint64_t seed, std::uint64_t epoch);

/// Stacks, augments (train) or applies the eval protocol, and normalizes.
Tensor<float> make_batch(const Dataset& ds, std::span<const Index> indices, const Normalization& norm,
                         bool train, Rng* rng);
std::vector<int> batch_labels(const Dataset& ds, std::span<const Index> indices);

}  // namespace ebnet::data
