#include <fstream>
#include <sstream>

#include "ebnet/io/binary.hpp"
#include "format.hpp"

namespace ebnet::io {

void export_packed(std::ostream& os, arch::Network<float>& net, const CheckpointMeta& meta) {
  if (!(meta.spec == net.spec())) throw ContractError("export metadata does not describe this network");
  detail::write_header(os, CheckpointKind::packed, meta);
  std::uint32_t count = 0;
  std::ostringstream body(std::ios::binary);
  graph::walk<float>(net.root(), [&](graph::Layer<float>& layer) {
    if (layer.kind() == graph::LayerKind::bn) {
      auto& bn = static_cast<graph::BatchNorm<float>&>(layer);
      const auto [scale, shift] = bn.folded_affine();
      detail::write_real32(body, bn.name() + ".scale", Tensor<float>({1, 1, 1, bn.channels()}, scale.array()));
      detail::write_real32(body, bn.name() + ".shift", Tensor<float>({1, 1, 1, bn.channels()}, shift.array()));
      count += 2;
      return;
    }
    std::vector<graph::Param<float>*> params;
    layer.collect_params(params);
    for (auto* p : params) {
      if (p->role == graph::ParamRole::buffer) continue;
      if (p->role == graph::ParamRole::latent_binary)
        detail::write_packed(body, p->name, graph::weight_binarize_ste(p->value));
      else
        detail::write_real32(body, p->name, p->value);
      ++count;
    }
  });
  put_u32(os, count);
  os << body.str();
  if (!os) throw FormatError("failed writing packed export");
}

void export_packed(const std::filesystem::path& file, arch::Network<float>& net, const CheckpointMeta& meta) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + file.string() + " for writing");
  export_packed(os, net, meta);
}

}  // namespace ebnet::io
