#pragma once

// Check batteries shared by the unit tests and the acceptance binary.

#include <string>
#include <vector>

#include "support.hpp"

namespace ebnet::testing {

struct GradCase {
  std::string layer;
  Shape4 input;
  GradReport report;
};

/// Uniform draws for every trainable parameter; BN scales and PReLU slopes
/// stay away from zero so no path is silently dead.
inline void randomize_params(graph::Layer<double>& layer, Rng& rng) {
  for (auto* p : graph::parameters<double>(layer)) {
    if (!p->trainable()) continue;
    if (p->role == graph::ParamRole::norm_affine && p->name.ends_with("gamma"))
      randomize(p->value, rng, 0.5, 1.5);
    else if (p->role == graph::ParamRole::gating)
      randomize(p->value, rng, -2.0, 2.0);
    else
      randomize(p->value, rng);
  }
}

/// Every layer in surrogate mode (identity sign, softmax gating), `shapes`
/// random small configurations each.
inline std::vector<GradCase> gradient_suite(int shapes, std::uint64_t seed) {
  using namespace graph;
  std::vector<GradCase> out;
  Rng rng(seed);
  const RunMode mode = RunMode::surrogate();
  const auto run = [&](const std::string& what, Layer<double>& layer, Shape4 in) {
    randomize_params(layer, rng);
    out.push_back({what, in, check_gradients(layer, random_tensor<double>(in, rng), mode, rng)});
  };
  const auto groups = [&] { return Index(1) << pick(rng, 0, 2); };

  for (int t = 0; t < shapes; ++t) {
    const Index n = pick(rng, 2, 3), h = pick(rng, 3, 6), w = pick(rng, 3, 6);
    {
      const Index g = groups();
      const Index k = pick(rng, 0, 1) ? 3 : 1;
      Conv2d<double> l("conv", {g * pick(rng, 1, 3), g * pick(rng, 1, 3), k, k, pick(rng, 1, 2), k / 2, g});
      run("conv2d", l, {n, l.geometry().in_channels, h, w});
    }
    {
      const Index c = pick(rng, 1, 5);
      BatchNorm<double> l("bn", c);
      run("batchnorm", l, {n, c, h, w});
    }
    {
      const Index c = pick(rng, 1, 5);
      PReLU<double> l("prelu", c);
      run("prelu", l, {n, c, h, w});
    }
    {
      ReLU<double> l("relu");
      run("relu", l, {n, pick(rng, 1, 4), h, w});
    }
    {
      MaxPool<double> l("maxpool", 3, 2, 1);
      run("maxpool", l, {n, pick(rng, 1, 3), h, w});
    }
    {
      AvgPool<double> l("avgpool", 2, 2);
      run("avgpool", l, {n, pick(rng, 1, 3), h, w});
    }
    {
      GlobalAvgPool<double> l("gap");
      run("global_avgpool", l, {n, pick(rng, 1, 4), h, w});
    }
    {
      const Index c = pick(rng, 1, 6);
      Linear<double> l("fc", c * 2, pick(rng, 1, 5));
      run("linear", l, {n, c, 2, 1});
    }
    {
      const Index g = groups();
      const Index k = pick(rng, 0, 1) ? 3 : 1;
      BinaryConv<double> l("bconv", {g * pick(rng, 1, 3), g * pick(rng, 1, 3), k, k, pick(rng, 1, 2), k / 2, g});
      run("bconv", l, {n, l.geometry().in_channels, h, w});
    }
    {
      const Index g = groups();
      const double taus[] = {0.5, 1.0, 5.0};
      ExpertBinaryConv<double> l("ebconv", {g * pick(rng, 1, 3), g * pick(rng, 1, 3), 3, 3, pick(rng, 1, 2), 1, g},
                                 pick(rng, 1, 4), taus[pick(rng, 0, 2)]);
      run("ebconv", l, {n, l.geometry().in_channels, h, w});
    }
    {
      const Index r = Index(1) << pick(rng, 0, 2);
      const Index c = r * pick(rng, 1, 2);
      const DownsampleVariant v = static_cast<DownsampleVariant>(pick(rng, 0, 3));
      DownsampleBlock<double> l("down", c, 2 * c, pick(rng, 1, 2), v == DownsampleVariant::vanilla ? 1 : r, v);
      run("downsample", l, {n, c, h, w});
    }
    {
      const Index g = groups();
      const Index ci = g * pick(rng, 1, 2), co = ci * pick(rng, 1, 2);
      auto block = make_binary_block<double>("block", ci, co, pick(rng, 1, 2), g, pick(rng, 1, 3), 1.0, 1,
                                             DownsampleVariant::prelu);
      run("binary_block", *block, {n, ci, h, w});
    }
    {
      const Index c = pick(rng, 2, 6);
      auto mix = make_group_mix<double>("mix", c);
      run("group_mix", *mix, {n, c, h, w});
    }
  }
  return out;
}

/// Jacobian of Softmax(z / tau) applied through gate_backward against
/// central differences of the softmax itself.
inline double gate_jacobian_error(Index n, double tau, Rng& rng) {
  Vec<double> z(n), up(n);
  std::uniform_real_distribution<double> u(-2, 2);
  for (Index i = 0; i < n; ++i) {
    z[i] = tau * u(rng);
    up[i] = u(rng);
  }
  const Vec<double> analytic = graph::gate_backward<double>(z, up, tau);
  Eigen::ArrayXd a(n), num(n);
  const double h = 1e-6 * tau;
  for (Index j = 0; j < n; ++j) {
    Vec<double> zp = z, zm = z;
    zp[j] += h;
    zm[j] -= h;
    num[j] = (graph::softmax<double>(zp, tau) - graph::softmax<double>(zm, tau)).dot(up) / (2 * h);
    a[j] = analytic[j];
  }
  return rel_error(a, num);
}

/// Mixed-target cross-entropy against central differences of the loss.
inline double xent_error(Rng& rng) {
  const Index n = pick(rng, 1, 4), k = pick(rng, 2, 6);
  auto logits = random_tensor<double>({n, k, 1, 1}, rng, -3, 3);
  std::vector<int> a, b;
  for (Index i = 0; i < n; ++i) {
    a.push_back(static_cast<int>(pick(rng, 0, k - 1)));
    b.push_back(static_cast<int>(pick(rng, 0, k - 1)));
  }
  const double lambda = std::uniform_real_distribution<double>(0, 1)(rng);
  graph::SoftmaxXent<double> loss;
  loss.forward(logits, a, b, lambda);
  const Tensor<double> g = loss.backward();
  Eigen::ArrayXd num(logits.size());
  for (Index i = 0; i < logits.size(); ++i) {
    const double keep = logits[i];
    graph::SoftmaxXent<double> l2;
    logits[i] = keep + 1e-6;
    const double lp = l2.forward(logits, a, b, lambda);
    logits[i] = keep - 1e-6;
    const double lm = l2.forward(logits, a, b, lambda);
    logits[i] = keep;
    num[i] = (lp - lm) / 2e-6;
  }
  return rel_error(g.values(), num);
}

}  // namespace ebnet::testing
