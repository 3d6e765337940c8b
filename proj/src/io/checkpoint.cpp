#include <fstream>
#include <map>

#include "ebnet/io/binary.hpp"
#include "format.hpp"

namespace fs = std::filesystem;

namespace ebnet::io {

namespace detail {

void write_header(std::ostream& os, CheckpointKind kind, const CheckpointMeta& meta) {
  os.write(kMagic, 4);
  put_u32(os, kFormatVersion);
  put_u32(os, static_cast<std::uint32_t>(kind));
  const arch::ArchSpec& s = meta.spec;
  put_string(os, arch::format_arch(s));
  put_u32(os, static_cast<std::uint32_t>(s.n_experts));
  put_u8(os, static_cast<std::uint8_t>(s.group_mix));
  put_u8(os, static_cast<std::uint8_t>(s.downsample));
  put_u32(os, static_cast<std::uint32_t>(s.input_resolution));
  put_u8(os, static_cast<std::uint8_t>(s.stem));
  put_u32(os, static_cast<std::uint32_t>(s.classes));
  put_u32(os, static_cast<std::uint32_t>(s.base_width));
  put_u32(os, static_cast<std::uint32_t>(s.in_channels));
  put_f64(os, meta.tau);
  put_u64(os, meta.seed);
  put_u32(os, static_cast<std::uint32_t>(meta.policy_step));
  put_u32(os, static_cast<std::uint32_t>(meta.stage));
  put_u32(os, static_cast<std::uint32_t>(meta.epoch));
  put_f64(os, meta.val_top1);
  put_f64(os, meta.val_top5);
  put_u32(os, static_cast<std::uint32_t>(meta.norm.mean.size()));
  for (double v : meta.norm.mean) put_f64(os, v);
  for (double v : meta.norm.std) put_f64(os, v);
}

void write_shape(std::ostream& os, const Shape4& s) {
  put_u32(os, static_cast<std::uint32_t>(s.n));
  put_u32(os, static_cast<std::uint32_t>(s.c));
  put_u32(os, static_cast<std::uint32_t>(s.h));
  put_u32(os, static_cast<std::uint32_t>(s.w));
}

void write_real32(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  put_string(os, name);
  put_u8(os, static_cast<std::uint8_t>(RecordType::real32));
  write_shape(os, t.shape());
  for (Index i = 0; i < t.size(); ++i) put_f32(os, t[i]);
}

void write_packed(std::ostream& os, const std::string& name, const BitPlaneTensor& b) {
  put_string(os, name);
  put_u8(os, static_cast<std::uint8_t>(RecordType::packed_bits));
  write_bitplane(os, b);
}

}  // namespace detail

namespace {

struct Record {
  RecordType type = RecordType::real32;
  Tensor<float> real;
  BitPlaneTensor bits;
};

template <typename E>
E checked_enum(std::uint8_t v, std::uint8_t max, const char* what) {
  if (v > max) throw FormatError(std::string("invalid ") + what + " code " + std::to_string(v));
  return static_cast<E>(v);
}

CheckpointMeta read_meta(std::istream& is) {
  CheckpointMeta m;
  m.spec = arch::parse_arch(get_string(is, 64));
  m.spec.n_experts = static_cast<int>(get_u32(is));
  m.spec.group_mix = checked_enum<arch::GroupMix>(get_u8(is), 2, "group-mix");
  m.spec.downsample = checked_enum<arch::DownsampleVariant>(get_u8(is), 3, "downsample");
  m.spec.input_resolution = static_cast<int>(get_u32(is));
  m.spec.stem = checked_enum<arch::Stem>(get_u8(is), 1, "stem");
  m.spec.classes = static_cast<int>(get_u32(is));
  m.spec.base_width = static_cast<int>(get_u32(is));
  m.spec.in_channels = static_cast<int>(get_u32(is));
  m.spec.validate();
  m.tau = get_f64(is);
  m.seed = get_u64(is);
  m.policy_step = static_cast<std::int32_t>(get_u32(is));
  m.stage = static_cast<std::int32_t>(get_u32(is));
  m.epoch = static_cast<std::int32_t>(get_u32(is));
  m.val_top1 = get_f64(is);
  m.val_top5 = get_f64(is);
  const std::uint32_t nc = get_u32(is);
  if (nc > 64) throw FormatError("implausible normalization channel count");
  for (std::uint32_t i = 0; i < nc; ++i) m.norm.mean.push_back(get_f64(is));
  for (std::uint32_t i = 0; i < nc; ++i) m.norm.std.push_back(get_f64(is));
  return m;
}

Shape4 read_shape(std::istream& is) {
  Shape4 s{get_u32(is), get_u32(is), get_u32(is), get_u32(is)};
  if (!s.live() || s.count() > (Index(1) << 31)) throw FormatError("tensor record has an implausible shape");
  return s;
}

std::map<std::string, Record> read_records(std::istream& is) {
  std::map<std::string, Record> out;
  const std::uint32_t count = get_u32(is);
  for (std::uint32_t r = 0; r < count; ++r) {
    std::string name = get_string(is, 4096);
    Record rec;
    rec.type = checked_enum<RecordType>(get_u8(is), 2, "record type");
    switch (rec.type) {
      case RecordType::real64: {
        rec.real = Tensor<float>(read_shape(is));
        for (Index i = 0; i < rec.real.size(); ++i) rec.real[i] = static_cast<float>(get_f64(is));
        rec.type = RecordType::real32;
        break;
      }
      case RecordType::real32: {
        rec.real = Tensor<float>(read_shape(is));
        for (Index i = 0; i < rec.real.size(); ++i) rec.real[i] = get_f32(is);
        break;
      }
      case RecordType::packed_bits:
        rec.bits = read_bitplane(is, PackAxis::sample);
        break;
    }
    if (!out.emplace(name, std::move(rec)).second) throw FormatError("duplicate tensor record '" + name + "'");
  }
  return out;
}

Record take(std::map<std::string, Record>& recs, const std::string& name) {
  auto it = recs.find(name);
  if (it == recs.end()) throw FormatError("missing tensor record '" + name + "'");
  Record r = std::move(it->second);
  recs.erase(it);
  return r;
}

void assign_real(graph::Param<float>& p, Record&& r) {
  if (r.type != RecordType::real32) throw FormatError("record '" + p.name + "' should be real-valued");
  if (!(r.real.shape() == p.value.shape())) throw FormatError("record '" + p.name + "' has the wrong shape");
  p.value.values() = r.real.values();
}

}  // namespace

void save_checkpoint(std::ostream& os, arch::Network<float>& net, const CheckpointMeta& meta,
                     const trainer::AdamState* adam) {
  if (!(meta.spec == net.spec())) throw ContractError("checkpoint metadata does not describe this network");
  detail::write_header(os, CheckpointKind::training, meta);
  const auto params = net.parameters();
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) detail::write_real32(os, p->name, p->value);
  put_u8(os, adam ? 1 : 0);
  if (adam) {
    put_u64(os, static_cast<std::uint64_t>(adam->step));
    put_u32(os, static_cast<std::uint32_t>(adam->slots.size()));
    for (const auto& s : adam->slots) {
      put_string(os, s.name);
      put_u32(os, static_cast<std::uint32_t>(s.m.size()));
      for (Index i = 0; i < s.m.size(); ++i) put_f32(os, s.m[i]);
      for (Index i = 0; i < s.v.size(); ++i) put_f32(os, s.v[i]);
    }
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

void save_checkpoint(const fs::path& file, arch::Network<float>& net, const CheckpointMeta& meta,
                     const trainer::AdamState* adam) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + file.string() + " for writing");
  save_checkpoint(os, net, meta, adam);
}

Checkpoint load_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4))
    throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = get_u32(is);
  if (version != kFormatVersion)
    throw VersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                       std::to_string(kFormatVersion) + ")");
  Checkpoint ck;
  const std::uint32_t kind = get_u32(is);
  if (kind > 1) throw FormatError("unknown checkpoint kind " + std::to_string(kind));
  ck.kind = static_cast<CheckpointKind>(kind);
  ck.meta = read_meta(is);
  ck.net = std::make_unique<arch::Network<float>>(ck.meta.spec, static_cast<float>(ck.meta.tau));
  auto records = read_records(is);

  if (ck.kind == CheckpointKind::training) {
    for (auto* p : ck.net->parameters()) assign_real(*p, take(records, p->name));
  } else {
    graph::walk<float>(ck.net->root(), [&](graph::Layer<float>& layer) {
      if (layer.kind() == graph::LayerKind::bn) {
        auto& bn = static_cast<graph::BatchNorm<float>&>(layer);
        Record scale = take(records, bn.name() + ".scale");
        Record shift = take(records, bn.name() + ".shift");
        if (scale.type != RecordType::real32 || shift.type != RecordType::real32 ||
            scale.real.size() != bn.channels() || shift.real.size() != bn.channels())
          throw FormatError("bad folded batch-norm records for '" + bn.name() + "'");
        bn.load_folded(Eigen::Map<Vec<float>>(scale.real.data(), bn.channels()),
                       Eigen::Map<Vec<float>>(shift.real.data(), bn.channels()));
        return;
      }
      std::vector<graph::Param<float>*> params;
      layer.collect_params(params);
      for (auto* p : params) {
        if (p->role == graph::ParamRole::buffer) continue;
        Record r = take(records, p->name);
        if (p->role == graph::ParamRole::latent_binary) {
          if (r.type != RecordType::packed_bits || !(r.bits.shape() == p->value.shape()))
            throw FormatError("record '" + p->name + "' should be a packed tensor of matching shape");
          p->value.values() = unpack<float>(r.bits).values();
        } else {
          assign_real(*p, std::move(r));
        }
      }
    });
  }
  if (!records.empty()) throw FormatError("unexpected tensor record '" + records.begin()->first + "'");

  if (ck.kind == CheckpointKind::training && get_u8(is) == 1) {
    trainer::AdamState st;
    st.step = static_cast<std::int64_t>(get_u64(is));
    const std::uint32_t n = get_u32(is);
    for (std::uint32_t i = 0; i < n; ++i) {
      trainer::AdamSlot slot;
      slot.name = get_string(is, 4096);
      const std::uint32_t len = get_u32(is);
      if (len > (1u << 31)) throw FormatError("implausible optimizer slot length");
      slot.m.resize(len);
      slot.v.resize(len);
      for (std::uint32_t k = 0; k < len; ++k) slot.m[k] = get_f32(is);
      for (std::uint32_t k = 0; k < len; ++k) slot.v[k] = get_f32(is);
      st.slots.push_back(std::move(slot));
    }
    ck.adam = std::move(st);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint payload");
  return ck;
}

Checkpoint load_checkpoint(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + file.string());
  return load_checkpoint(is);
}

}  // namespace ebnet::io
