#pragma once

#include <span>
#include <vector>

#include "ebnet/rng.hpp"
#include "ebnet/tensor.hpp"

namespace ebnet::graph {

template <typename Scalar>
struct MixupBatch {
  Tensor<Scalar> images;
  std::vector<int> label_a;
  std::vector<int> label_b;
  double lambda = 1.0;
};

/// Beta(a, a) via two gamma draws.
double sample_beta(double a, Rng& rng);

/// x~_i = lambda * x_i + (1 - lambda) * x_perm(i), lambda ~ Beta(alpha, alpha).
template <typename Scalar>
MixupBatch<Scalar> mixup_apply(const Tensor<Scalar>& images, std::span<const int> labels, double alpha, Rng& rng);

/// Deterministic core with an explicit lambda and permutation.
template <typename Scalar>
MixupBatch<Scalar> mixup_with(const Tensor<Scalar>& images, std::span<const int> labels, double lambda,
                              std::span<const Index> perm);

}  // namespace ebnet::graph
