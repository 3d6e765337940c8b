#include <algorithm>
#include <numeric>
#include <random>

#include "ebnet/graph/mixup.hpp"

namespace ebnet::graph {

double sample_beta(double a, Rng& rng) {
  if (!(a > 0)) throw ConfigError("mixup alpha must be positive");
  std::gamma_distribution<double> gamma(a, 1.0);
  const double x = gamma(rng);
  const double y = gamma(rng);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

template <typename Scalar>
MixupBatch<Scalar> mixup_with(const Tensor<Scalar>& images, std::span<const int> labels, double lambda,
                              std::span<const Index> perm) {
  const Index n = images.shape().n;
  if (static_cast<Index>(labels.size()) != n || static_cast<Index>(perm.size()) != n)
    throw ShapeError("mixup: labels/permutation do not match the batch");
  MixupBatch<Scalar> out;
  out.lambda = lambda;
  out.images = Tensor<Scalar>(images.shape());
  out.label_a.assign(labels.begin(), labels.end());
  out.label_b.resize(labels.size());
  const Index len = images.shape().sample_size();
  const auto l = static_cast<Scalar>(lambda);
  for (Index i = 0; i < n; ++i) {
    const Index j = perm[static_cast<std::size_t>(i)];
    out.label_b[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(j)];
    const Scalar* xi = images.sample(i);
    const Scalar* xj = images.sample(j);
    Scalar* dst = out.images.sample(i);
    for (Index k = 0; k < len; ++k) dst[k] = l * xi[k] + (Scalar(1) - l) * xj[k];
  }
  return out;
}

template <typename Scalar>
MixupBatch<Scalar> mixup_apply(const Tensor<Scalar>& images, std::span<const int> labels, double alpha, Rng& rng) {
  const double lambda = sample_beta(alpha, rng);
  std::vector<Index> perm(static_cast<std::size_t>(images.shape().n));
  std::iota(perm.begin(), perm.end(), Index(0));
  std::shuffle(perm.begin(), perm.end(), rng);
  return mixup_with(images, labels, lambda, perm);
}

template MixupBatch<float> mixup_apply<float>(const Tensor<float>&, std::span<const int>, double, Rng&);
template MixupBatch<double> mixup_apply<double>(const Tensor<double>&, std::span<const int>, double, Rng&);
template MixupBatch<float> mixup_with<float>(const Tensor<float>&, std::span<const int>, double, std::span<const Index>);
template MixupBatch<double> mixup_with<double>(const Tensor<double>&, std::span<const int>, double,
                                               std::span<const Index>);

}  // namespace ebnet::graph
