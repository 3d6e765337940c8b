#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <vector>

#include "ebnet/arch/builder.hpp"
#include "ebnet/data/dataset.hpp"
#include "ebnet/graph/layers.hpp"
#include "ebnet/rng.hpp"

namespace ebnet::testing {

template <typename Scalar>
Tensor<Scalar> random_tensor(Shape4 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<Scalar> t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(d(rng));
  return t;
}

template <typename Scalar>
void randomize(Tensor<Scalar>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(d(rng));
}

inline Index pick(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

/// max |a - n| / max(max |n|, floor)
inline double rel_error(const Eigen::ArrayXd& analytic, const Eigen::ArrayXd& numeric, double floor = 1e-6) {
  if (analytic.size() == 0) return 0;
  const double scale = std::max(numeric.abs().maxCoeff(), floor);
  return (analytic - numeric).abs().maxCoeff() / scale;
}

struct GradReport {
  double worst = 0;
  std::string worst_name;
};

/// Central finite differences of L = <layer(x), R> against the analytic
/// backward pass, for the input and every trainable parameter. At most
/// `probe` coordinates per tensor are checked. Errors are relative to the
/// largest probed gradient, floored at 1e-4: a BN right after a layer makes
/// some gradients exactly zero and the difference quotient is then noise.
inline GradReport check_gradients(graph::Layer<double>& layer, Tensor<double> x, const graph::RunMode& mode, Rng& rng,
                                  Index probe = 40, double h = 1e-6) {
  const Tensor<double> y0 = layer.forward(x, mode);
  const Tensor<double> r = random_tensor<double>(y0.shape(), rng);
  const auto loss = [&](const Tensor<double>& in) { return (layer.forward(in, mode).values() * r.values()).sum(); };
  auto params = graph::parameters<double>(layer);
  layer.forward(x, mode);
  for (auto* p : params) p->value.drop_grad();
  const Tensor<double> dx = layer.backward(r);

  GradReport rep;
  const auto probe_tensor = [&](const std::string& name, Tensor<double>& t, const Eigen::ArrayXd& analytic,
                                const std::function<double()>& eval) {
    std::vector<Index> idx(static_cast<std::size_t>(t.size()));
    for (Index i = 0; i < t.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(std::min<Index>(probe, t.size())));
    Eigen::ArrayXd a(static_cast<Index>(idx.size())), n(static_cast<Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Index i = idx[k];
      const double keep = t[i];
      t[i] = keep + h;
      const double lp = eval();
      t[i] = keep - h;
      const double lm = eval();
      t[i] = keep;
      n[Index(k)] = (lp - lm) / (2 * h);
      a[Index(k)] = analytic[i];
    }
    const double e = rel_error(a, n, 1e-4);
    if (e > rep.worst) {
      rep.worst = e;
      rep.worst_name = name;
    }
  };
  probe_tensor("input", x, dx.values(), [&] { return loss(x); });
  for (auto* p : params) {
    if (!p->trainable()) continue;
    const Eigen::ArrayXd g = p->value.has_grad() ? Eigen::ArrayXd(*p->value.maybe_grad())
                                                 : Eigen::ArrayXd::Zero(p->value.size());
    probe_tensor(p->name, p->value, g, [&] { return loss(x); });
  }
  return rep;
}

/// In-memory labelled images whose class is encoded in a per-class mean
/// pattern plus noise; learnable by a small network. The prototypes depend
/// only on `seed`, so splits drawn with different `stream`s share them.
inline data::Dataset synthetic_dataset(Index n, int classes, Index channels, Index hw, std::uint64_t seed,
                                       double noise = 40.0, std::uint64_t stream = 0) {
  data::Dataset ds;
  ds.kind = data::DatasetKind::mnist;  // no augmentation path
  ds.channels = channels;
  ds.height = ds.width = hw;
  ds.classes = classes;
  Rng proto_rng(derive_seed(seed, 1));
  std::uniform_real_distribution<double> u(40, 215);
  std::vector<std::vector<double>> protos(static_cast<std::size_t>(classes));
  for (auto& p : protos) {
    p.resize(static_cast<std::size_t>(channels * hw * hw));
    for (auto& v : p) v = u(proto_rng);
  }
  Rng rng(derive_seed(seed, 2, stream));
  std::normal_distribution<double> g(0, noise);
  for (Index i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);
    ds.labels.push_back(c);
    for (double v : protos[static_cast<std::size_t>(c)])
      ds.pixels.push_back(static_cast<std::uint8_t>(std::clamp(v + g(rng), 0.0, 255.0)));
  }
  return ds;
}

/// Small network for fast tests: base width 8, CIFAR stem.
inline arch::ArchSpec tiny_spec(int experts = 1, const char* text = "1111-1-1:1:1:1", int hw = 8, int classes = 4,
                                int in_channels = 3) {
  arch::ArchSpec s = arch::parse_arch(text);
  s.base_width = 8;
  s.n_experts = experts;
  s.stem = arch::Stem::cifar3x3;
  s.input_resolution = hw;
  s.classes = classes;
  s.in_channels = in_channels;
  s.validate();
  return s;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("ebnet_test_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// CIFAR-10 binary batch: `records` x (label, 3072 pixels).
inline std::vector<std::uint8_t> cifar_bytes(Index records, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(records * 3073));
  for (Index r = 0; r < records; ++r) {
    out.push_back(static_cast<std::uint8_t>(r % 10));
    for (int i = 0; i < 3072; ++i) out.push_back(static_cast<std::uint8_t>(rng() & 0xFF));
  }
  return out;
}

inline void put_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
  for (int s = 24; s >= 0; s -= 8) v.push_back(static_cast<std::uint8_t>(x >> s));
}

/// MNIST idx pair (prefix "train" or "t10k") holding a learnable synthetic
/// 28x28 problem with `classes` classes.
inline void write_mnist(const std::filesystem::path& dir, const std::string& prefix, Index n, int classes,
                        std::uint64_t seed) {
  const data::Dataset ds = synthetic_dataset(n, classes, 1, 28, seed, 30.0, prefix == "train" ? 0 : 1);
  std::vector<std::uint8_t> img, lbl;
  put_be32(img, 0x803);
  put_be32(img, static_cast<std::uint32_t>(n));
  put_be32(img, 28);
  put_be32(img, 28);
  img.insert(img.end(), ds.pixels.begin(), ds.pixels.end());
  put_be32(lbl, 0x801);
  put_be32(lbl, static_cast<std::uint32_t>(n));
  for (int l : ds.labels) lbl.push_back(static_cast<std::uint8_t>(l));
  write_bytes(dir / (prefix + "-images-idx3-ubyte"), img);
  write_bytes(dir / (prefix + "-labels-idx1-ubyte"), lbl);
}

}  // namespace ebnet::testing
