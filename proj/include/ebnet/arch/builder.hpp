#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ebnet/arch/arch.hpp"
#include "ebnet/graph/layers.hpp"

namespace ebnet::arch {

/// Real stem -> four stages of binary blocks (optional group-mix units) ->
/// global average pool -> real classifier.
template <typename Scalar>
class Network {
 public:
  explicit Network(ArchSpec spec, Scalar tau = Scalar(1));

  const ArchSpec& spec() const { return spec_; }
  const NetworkPlan& plan() const { return plan_; }
  graph::Sequential<Scalar>& root() { return *root_; }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, const graph::RunMode& mode) { return root_->forward(x, mode); }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) { return root_->backward(dy); }

  std::vector<graph::Param<Scalar>*> parameters() { return graph::parameters<Scalar>(*root_); }
  /// Throws ConfigError when no parameter has that name.
  graph::Param<Scalar>& param(const std::string& name);
  std::vector<graph::ExpertBinaryConv<Scalar>*> expert_convs();
  std::vector<graph::BinaryConv<Scalar>*> binary_convs();
  std::vector<graph::BatchNorm<Scalar>*> batch_norms();
  /// Every layer that owns packed-able binary weights, in traversal order.
  std::vector<graph::Layer<Scalar>*> binary_layers();

  void initialize(std::uint64_t seed) { graph::initialize<Scalar>(*root_, seed); }
  void set_tau(Scalar tau);
  void replicate_experts(std::uint64_t seed);
  void on_binarization_onset();
  void clamp_latent();
  void zero_grad();

  /// Copies parameters by name. Expert tensors of a smaller source fill the
  /// leading expert slots; every other parameter must match exactly.
  void load_from(Network& other);

 private:
  ArchSpec spec_;
  NetworkPlan plan_;
  std::unique_ptr<graph::Sequential<Scalar>> root_;
};

}  // namespace ebnet::arch
