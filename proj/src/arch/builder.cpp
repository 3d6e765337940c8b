#include <map>

#include "ebnet/arch/builder.hpp"

namespace ebnet::arch {

using namespace ebnet::graph;

template <typename Scalar>
Network<Scalar>::Network(ArchSpec spec, Scalar tau) : spec_(spec), plan_(plan_network(spec)) {
  root_ = std::make_unique<Sequential<Scalar>>("net");
  auto stem = std::make_unique<Sequential<Scalar>>("stem");
  const Index sc = plan_.stem_channels;
  stem->add(std::make_unique<Conv2d<Scalar>>(
      "stem.conv", ConvGeometry{spec_.in_channels, sc, plan_.stem_kernel, plan_.stem_kernel, plan_.stem_stride,
                                plan_.stem_kernel / 2, 1}));
  stem->add(std::make_unique<BatchNorm<Scalar>>("stem.bn", sc));
  stem->add(std::make_unique<PReLU<Scalar>>("stem.prelu", sc));
  if (plan_.stem_maxpool) stem->add(std::make_unique<MaxPool<Scalar>>("stem.pool", 3, 2, 1));
  root_->add(std::move(stem));

  for (std::size_t i = 0; i < plan_.units.size(); ++i) {
    const UnitPlan& up = plan_.units[i];
    const std::string block = "stage" + std::to_string(up.stage) + ".block" + std::to_string(up.block);
    if (up.group_mix) {
      root_->add(make_group_mix<Scalar>(block + ".mix", up.out_channels));
      continue;
    }
    if (up.name != block + ".conv0") continue;  // the block factory builds both units
    root_->add(make_binary_block<Scalar>(block, up.in_channels, up.out_channels, up.stride, up.groups,
                                         spec_.n_experts, tau, up.skip_ratio, spec_.downsample));
  }

  auto head = std::make_unique<Sequential<Scalar>>("head");
  head->add(std::make_unique<GlobalAvgPool<Scalar>>("head.pool"));
  head->add(std::make_unique<Linear<Scalar>>("head.fc", plan_.final_channels, spec_.classes));
  root_->add(std::move(head));
}

template <typename Scalar>
Param<Scalar>& Network<Scalar>::param(const std::string& name) {
  for (Param<Scalar>* p : parameters())
    if (p->name == name) return *p;
  throw ConfigError("no parameter named '" + name + "'");
}

template <typename Scalar>
std::vector<ExpertBinaryConv<Scalar>*> Network<Scalar>::expert_convs() {
  std::vector<ExpertBinaryConv<Scalar>*> out;
  walk<Scalar>(*root_, [&](Layer<Scalar>& l) {
    if (l.kind() == LayerKind::ebconv) out.push_back(static_cast<ExpertBinaryConv<Scalar>*>(&l));
  });
  return out;
}

template <typename Scalar>
std::vector<BinaryConv<Scalar>*> Network<Scalar>::binary_convs() {
  std::vector<BinaryConv<Scalar>*> out;
  walk<Scalar>(*root_, [&](Layer<Scalar>& l) {
    if (l.kind() == LayerKind::bconv) out.push_back(static_cast<BinaryConv<Scalar>*>(&l));
  });
  return out;
}

template <typename Scalar>
std::vector<BatchNorm<Scalar>*> Network<Scalar>::batch_norms() {
  std::vector<BatchNorm<Scalar>*> out;
  walk<Scalar>(*root_, [&](Layer<Scalar>& l) {
    if (l.kind() == LayerKind::bn) out.push_back(static_cast<BatchNorm<Scalar>*>(&l));
  });
  return out;
}

template <typename Scalar>
std::vector<Layer<Scalar>*> Network<Scalar>::binary_layers() {
  std::vector<Layer<Scalar>*> out;
  walk<Scalar>(*root_, [&](Layer<Scalar>& l) {
    if (l.kind() == LayerKind::bconv || l.kind() == LayerKind::ebconv) out.push_back(&l);
  });
  return out;
}

template <typename Scalar>
void Network<Scalar>::set_tau(Scalar tau) {
  for (auto* e : expert_convs()) e->set_tau(tau);
}

template <typename Scalar>
void Network<Scalar>::replicate_experts(std::uint64_t seed) {
  for (auto* e : expert_convs()) e->replicate_experts(seed);
}

template <typename Scalar>
void Network<Scalar>::on_binarization_onset() {
  for (auto* e : expert_convs()) e->on_binarization_onset();
  for (auto* b : binary_convs()) b->on_binarization_onset();
}

template <typename Scalar>
void Network<Scalar>::clamp_latent() {
  for (Param<Scalar>* p : parameters())
    if (p->role == ParamRole::latent_binary) p->value.values() = p->value.values().max(Scalar(-1)).min(Scalar(1));
}

template <typename Scalar>
void Network<Scalar>::zero_grad() {
  for (Param<Scalar>* p : parameters()) p->value.zero_grad();
}

template <typename Scalar>
void Network<Scalar>::load_from(Network& other) {
  std::map<std::string, Param<Scalar>*> src;
  for (Param<Scalar>* p : other.parameters()) src[p->name] = p;
  for (Param<Scalar>* p : parameters()) {
    auto it = src.find(p->name);
    if (it == src.end()) throw ConfigError("load: source has no parameter '" + p->name + "'");
    const Tensor<Scalar>& from = it->second->value;
    if (from.shape() == p->value.shape()) {
      p->value.values() = from.values();
      continue;
    }
    // Expert-stacked tensors: theta stacks along n, alpha along h.
    const Shape4 a = from.shape(), b = p->value.shape();
    const bool stacked = (a.c == b.c && a.h == b.h && a.w == b.w && a.n < b.n) ||
                         (a.n == b.n && a.c == b.c && a.w == b.w && a.h < b.h);
    if (p->role == ParamRole::gating) continue;  // redrawn by replicate_experts
    if (!stacked)
      throw ShapeError("load: shape mismatch for '" + p->name + "'");
    p->value.values().head(from.size()) = from.values();
  }
}

template class Network<float>;
template class Network<double>;

}  // namespace ebnet::arch
