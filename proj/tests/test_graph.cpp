#include <array>

#include "doctest.h"
#include "ebnet/graph/mixup.hpp"
#include "suites.hpp"

using namespace ebnet;
using namespace ebnet::graph;
using ebnet::testing::pick;
using ebnet::testing::random_tensor;

namespace {

template <typename S>
void copy_values(Param<S>& dst, const Param<S>& src) {
  REQUIRE(dst.value.size() == src.value.size());
  dst.value.values() = src.value.values();
}

// Eval-mode, binary-weight run; both operands binarized.
const RunMode kEval = RunMode::stage2(false);

}  // namespace

TEST_CASE("sign STE forward and backward") {
  Tensor<double> x({1, 1, 1, 3});
  x[0] = 0.4;
  x[1] = -2.0;
  x[2] = 0.0;
  const auto y = sign_ste_forward(x);
  CHECK(y[0] == 1.0);
  CHECK(y[1] == -1.0);
  CHECK(y[2] == 1.0);
  const auto g = sign_ste_backward(x, Tensor<double>({1, 1, 1, 3}, 1.0));
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 1.0);

  Tensor<float> theta({1, 1, 1, 2});
  theta[0] = 0.2f;
  theta[1] = -0.9f;
  const auto b = weight_binarize_ste(theta);
  CHECK(b.bit(0, 0, 0, 0));
  CHECK_FALSE(b.bit(0, 0, 0, 1));
}

TEST_CASE("STE through a binary conv equals mask times the conv input gradient") {
  Rng rng(12);
  const ConvGeometry g{3, 4, 3, 3, 1, 1, 1};
  BinaryConv<double> l("bconv", g);
  initialize<double>(l, 1);
  const auto x = random_tensor<double>({2, 3, 5, 5}, rng, -2, 2);
  const auto dy = random_tensor<double>(g.output_shape(x.shape()), rng);
  l.forward(x, RunMode::stage1(true));
  const auto dx = l.backward(dy);

  // manual chain rule: y = alpha * conv(sign(x), theta), pad -1
  Tensor<double> dyc = dy;
  for (Index n = 0; n < 2; ++n)
    for (Index o = 0; o < 4; ++o)
      for (Index i = 0; i < 25; ++i) dyc.at(n, o, i / 5, i % 5) *= l.alpha().value[o];
  const auto dconv = conv2d_backward<double>(sign_ste_forward(x), l.weight().value, g, -1.0, dyc, nullptr);
  const auto expect = sign_ste_backward(x, dconv);
  for (Index i = 0; i < x.size(); ++i) REQUIRE(dx[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("aggregate_psi") {
  Tensor<double> x({1, 2, 2, 2});
  for (Index i = 0; i < 4; ++i) {
    x[i] = i < 2 ? 0.5 : 1.5;  // mean 1
    x[4 + i] = -1.0;
  }
  Mat<double> eye = Mat<double>::Identity(2, 2);
  const auto z = aggregate_psi<double>(x.data(), x.shape(), ConstMatMap<double>(eye.data(), 2, 2));
  CHECK(z[0] == doctest::Approx(1.0));
  CHECK(z[1] == doctest::Approx(-1.0));

  const Tensor<double> c({1, 3, 4, 4}, 2.5);
  Rng rng(1);
  Mat<double> om = Mat<double>::Random(3, 4);
  const auto zc = aggregate_psi<double>(c.data(), c.shape(), ConstMatMap<double>(om.data(), 3, 4));
  for (Index j = 0; j < 4; ++j) CHECK(zc[j] == doctest::Approx(2.5 * om.col(j).sum()));

  // naive loops
  const auto xr = random_tensor<double>({3, 5, 3, 4}, rng);
  Mat<double> omr = Mat<double>::Random(5, 3);
  const Mat<double> zb = aggregate_psi<double>(xr, ConstMatMap<double>(omr.data(), 5, 3));
  for (Index n = 0; n < 3; ++n)
    for (Index j = 0; j < 3; ++j) {
      double acc = 0;
      for (Index ch = 0; ch < 5; ++ch) {
        double m = 0;
        for (Index i = 0; i < 12; ++i) m += xr.at(n, ch, i / 4, i % 4);
        acc += m / 12 * omr(ch, j);
      }
      CHECK(zb(n, j) == doctest::Approx(acc).epsilon(1e-6));
    }
}

TEST_CASE("gate_forward") {
  const std::array<double, 4> z{0.1, -2.0, 3.5, 0.0};
  const auto s = gate_forward(z);
  CHECK(s.selected == 2);
  CHECK(s.onehot == std::vector<double>{0, 0, 1, 0});
  const std::array<double, 2> tie{5, 5};
  CHECK(gate_forward(tie).selected == 0);
  CHECK_THROWS(gate_forward(std::span<const double>()));

  Rng rng(4);
  std::uniform_real_distribution<double> u(-5, 5), pos(0.01, 10);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> v(static_cast<std::size_t>(pick(rng, 1, 8)));
    for (auto& e : v) e = u(rng);
    const double sc = pos(rng), c = u(rng);
    std::vector<double> w = v;
    for (auto& e : w) e = sc * e + c;
    REQUIRE(gate_forward(v).selected == gate_forward(w).selected);
  }
}

TEST_CASE("gate_backward") {
  Vec<double> z = Vec<double>::Zero(2), up(2);
  up << 1, 0;
  const auto g = gate_backward<double>(z, up, 1.0);
  CHECK(g[0] == doctest::Approx(0.25));
  CHECK(g[1] == doctest::Approx(-0.25));

  Rng rng(8);
  for (double tau : {0.02, 1.0, 5.0, 25.0}) {
    const Vec<double> zr = Vec<double>::Random(5) * tau;
    const Vec<double> flat = Vec<double>::Constant(5, 0.7);
    CHECK(gate_backward<double>(zr, flat, tau).cwiseAbs().maxCoeff() < 1e-12);
    for (int t = 0; t < 20; ++t) CHECK(ebnet::testing::gate_jacobian_error(pick(rng, 2, 6), tau, rng) < 1e-5);
  }
}

TEST_CASE("analytic gradients match finite differences in surrogate mode") {
  for (const auto& c : ebnet::testing::gradient_suite(4, 99)) {
    INFO(c.layer << " " << c.input << " worst at " << c.report.worst_name);
    CHECK(c.report.worst < 1e-4);
  }
  Rng rng(3);
  for (int t = 0; t < 20; ++t) CHECK(ebnet::testing::xent_error(rng) < 1e-6);
}

TEST_CASE("EBConv weight gradient is the softmax share of the composed-weight gradient") {
  Rng rng(21);
  const ConvGeometry g{4, 4, 3, 3, 1, 1, 1};
  for (const double tau : {1.0, 1e6}) {
    ExpertBinaryConv<double> e("eb", g, 3, tau);
    initialize<double>(e, 5);
    ebnet::testing::randomize_params(e, rng);
    const auto x = random_tensor<double>({1, 4, 4, 4}, rng);
    e.forward(x, RunMode::stage1(true));
    e.backward(random_tensor<double>(g.output_shape(x.shape()), rng));
    const Index per = 4 * g.reduction_length();
    const auto& dth = *e.theta().value.maybe_grad();
    const Vec<double> z = aggregate_psi<double>(x.data(), x.shape(), ConstMatMap<double>(e.omega().value.data(), 4, 3));
    const Vec<double> s = softmax<double>(z, tau);
    const Index sel = e.last_gates()[0].selected;
    // dTheta_i = s_i * dW  ->  dTheta_i / s_i identical across experts
    for (Index i = 0; i < 3; ++i)
      for (Index k = 0; k < per; k += 7)
        CHECK(dth[i * per + k] / s[i] == doctest::Approx(dth[sel * per + k] / s[sel]).epsilon(1e-9));
    if (tau > 1e3)
      for (Index k = 0; k < per; k += 7) CHECK(dth[k] == doctest::Approx(dth[per + k]).epsilon(1e-5));
  }

  // N = 1: the whole composed-weight gradient, no gating signal
  ExpertBinaryConv<double> one("eb1", g, 1);
  BinaryConv<double> plain("b", g);
  initialize<double>(one, 5);
  copy_values(plain.weight(), one.theta());
  copy_values(plain.alpha(), one.alpha());
  const auto x = random_tensor<double>({2, 4, 4, 4}, rng);
  const auto dy = random_tensor<double>(g.output_shape(x.shape()), rng);
  one.forward(x, RunMode::stage1(true));
  plain.forward(x, RunMode::stage1(true));
  const auto dx1 = one.backward(dy);
  const auto dx2 = plain.backward(dy);
  CHECK((*one.theta().value.maybe_grad() == *plain.weight().value.maybe_grad()).all());
  CHECK(one.omega().value.maybe_grad()->abs().maxCoeff() == 0.0);
  CHECK((dx1.values() - dx2.values()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("EBConv with one expert equals BConv exactly") {
  Rng rng(31);
  for (int t = 0; t < 20; ++t) {
    const Index gr = Index(1) << pick(rng, 0, 2);
    const ConvGeometry g{gr * pick(rng, 1, 4), gr * pick(rng, 1, 4), 3, 3, pick(rng, 1, 2), 1, gr};
    ExpertBinaryConv<float> e("eb", g, 1);
    BinaryConv<float> b("b", g);
    initialize<float>(e, static_cast<std::uint64_t>(t));
    ebnet::testing::randomize(e.alpha().value, rng);
    copy_values(b.weight(), e.theta());
    copy_values(b.alpha(), e.alpha());
    const auto x = random_tensor<float>({pick(rng, 1, 3), g.in_channels, 6, 6}, rng);
    for (const RunMode m : {RunMode::stage1(false), RunMode::stage2(false), RunMode::stage1(true)}) {
      const auto y1 = e.forward(x, m), y2 = b.forward(x, m);
      REQUIRE((y1.values() == y2.values()).all());
    }
  }
}

TEST_CASE("replicated experts make the output independent of omega") {
  Rng rng(41);
  const ConvGeometry g{8, 8, 3, 3, 1, 1, 2};
  ExpertBinaryConv<float> e("eb", g, 4);
  initialize<float>(e, 3);
  e.replicate_experts(17);
  const auto x = random_tensor<float>({4, 8, 5, 5}, rng);
  for (const RunMode m : {RunMode::stage1(false), kEval}) {
    const auto y0 = e.forward(x, m);
    const auto keep = e.omega().value;
    ebnet::testing::randomize(e.omega().value, rng, -5, 5);
    const auto y1 = e.forward(x, m);
    e.omega().value = keep;
    CHECK((y0.values() == y1.values()).all());
  }
}

TEST_CASE("EBConv routes each sample through exactly its selected expert") {
  Rng rng(51);
  const ConvGeometry g{6, 4, 3, 3, 1, 1, 1};
  const Index per = 4 * g.reduction_length();
  for (int t = 0; t < 10; ++t) {
    ExpertBinaryConv<double> e("eb", g, 4);
    initialize<double>(e, static_cast<std::uint64_t>(t));
    ebnet::testing::randomize_params(e, rng);
    const auto x = random_tensor<double>({3, 6, 5, 5}, rng);
    const auto y = e.forward(x, kEval);

    for (Index n = 0; n < 3; ++n) {
      // manual oracle: argmax of psi, then a plain BConv with that expert
      Vec<double> z = Vec<double>::Zero(4);
      for (Index c = 0; c < 6; ++c) {
        double m = 0;
        for (Index i = 0; i < 25; ++i) m += x.at(n, c, i / 5, i % 5);
        for (Index j = 0; j < 4; ++j) z[j] += m / 25 * e.omega().value[c * 4 + j];
      }
      Index best = 0;
      for (Index j = 1; j < 4; ++j)
        if (z[j] > z[best]) best = j;
      REQUIRE(e.last_gates()[std::size_t(n)].selected == best);

      BinaryConv<double> b("b", g);
      b.weight().value.values() = e.theta().value.values().segment(best * per, per);
      for (Index o = 0; o < 4; ++o) b.alpha().value[o] = e.alpha().value[best * 4 + o];
      Tensor<double> xn({1, 6, 5, 5});
      std::copy(x.sample(n), x.sample(n) + 150, xn.data());
      const auto yn = b.forward(xn, kEval);
      for (Index i = 0; i < yn.size(); ++i) REQUIRE(yn[i] == y.sample(n)[i]);
    }

    // zero every expert nobody selected; outputs must not move
    std::vector<bool> used(4, false);
    for (const auto& gs : e.last_gates()) used[std::size_t(gs.selected)] = true;
    for (Index i = 0; i < 4; ++i)
      if (!used[std::size_t(i)]) e.theta().value.values().segment(i * per, per).setZero();
    const auto y2 = e.forward(x, kEval);
    REQUIRE((y.values() == y2.values()).all());
  }
}

TEST_CASE("packed inference equals the dense +-1 forward exactly") {
  Rng rng(61);
  const ConvGeometry g{16, 8, 3, 3, 2, 1, 4};
  ExpertBinaryConv<float> e("eb", g, 3);
  initialize<float>(e, 2);
  ebnet::testing::randomize(e.omega().value, rng, -2, 2);
  // alpha powers of two keep float products exact regardless of order
  for (Index i = 0; i < e.alpha().value.size(); ++i) e.alpha().value[i] = std::ldexp(1.0f, int(pick(rng, -3, 3)));
  const auto x = random_tensor<float>({5, 16, 7, 7}, rng);
  RunMode packed = kEval;
  packed.packed_kernels = true;
  const auto a = e.forward(x, kEval), b = e.forward(x, packed);
  CHECK((a.values() == b.values()).all());
}

TEST_CASE("binary block") {
  Rng rng(71);
  auto block = make_binary_block<double>("blk", 16, 16, 1, 1, 2, 1.0, 1, DownsampleVariant::prelu);
  initialize<double>(*block, 4);
  CHECK(block->output_shape({1, 16, 32, 32}) == Shape4{1, 16, 32, 32});
  for (auto* p : parameters<double>(*block))
    if (p->name.ends_with("alpha")) p->value.values().setZero();
  const auto x = random_tensor<double>({2, 16, 6, 6}, rng);
  CHECK((block->forward(x, RunMode::stage1(false)).values() == x.values()).all());

  // the skip still carries gradient with alpha = 0
  auto small = make_binary_block<double>("blk", 4, 4, 1, 1, 2, 1.0, 1, DownsampleVariant::prelu);
  for (auto* p : parameters<double>(*small))
    if (p->name.ends_with("alpha")) p->value.values().setZero();
  const auto rep = ebnet::testing::check_gradients(*small, random_tensor<double>({2, 4, 4, 4}, rng),
                                                   RunMode::surrogate(), rng);
  CHECK(rep.worst < 1e-4);

  auto down = make_binary_block<double>("blk", 8, 16, 2, 1, 1, 1.0, 4, DownsampleVariant::prelu);
  CHECK(down->output_shape({1, 8, 8, 8}) == Shape4{1, 16, 4, 4});
}

TEST_CASE("group mix makes channel 0 sensitive to every group") {
  Rng rng(81);
  const Index c = 8, groups = 4;
  auto build = [&](bool mix) {
    auto seq = std::make_unique<Sequential<double>>("s");
    seq->add(make_binary_block<double>("blk", c, c, 1, groups, 1, 1.0, 1, DownsampleVariant::prelu));
    if (mix) seq->add(make_group_mix<double>("mix", c));
    initialize<double>(*seq, 6);
    return seq;
  };
  for (const bool mix : {false, true}) {
    auto net = build(mix);
    const auto x = random_tensor<double>({1, c, 5, 5}, rng);
    const auto y0 = net->forward(x, RunMode::stage1(false));
    int sensitive = 0;
    for (Index grp = 1; grp < groups; ++grp) {
      auto xp = x;
      for (Index ch = grp * 2; ch < grp * 2 + 2; ++ch)
        for (Index i = 0; i < 25; ++i) xp.at(0, ch, i / 5, i % 5) = -xp.at(0, ch, i / 5, i % 5) - 0.1;
      const auto y1 = net->forward(xp, RunMode::stage1(false));
      bool moved = false;
      for (Index i = 0; i < 25; ++i) moved |= y0[i] != y1[i];
      sensitive += moved;
    }
    CHECK(sensitive == (mix ? groups - 1 : 0));
  }
}

TEST_CASE("downsample block shapes and cost ratio") {
  const Index c = 16;
  DownsampleBlock<float> dec("d", c, c, 1, 4, DownsampleVariant::prelu);
  DownsampleBlock<float> van("v", c, c, 1, 1, DownsampleVariant::vanilla);
  const auto conv_weights = [](Layer<float>& l) {
    Index n = 0;
    for (auto* p : parameters<float>(l))
      if (p->role == ParamRole::real_weight) n += p->value.size();
    return n;
  };
  // 1x1 convs: multiply-adds per pixel equal the weight count
  CHECK(double(conv_weights(dec)) / double(conv_weights(van)) == 0.5);
  DownsampleBlock<float> r1("r", c, c, 1, 1, DownsampleVariant::prelu);
  CHECK(conv_weights(r1) == 2 * c * c);
  DownsampleBlock<float> stage("s", c, 2 * c, 2, 4, DownsampleVariant::prelu);
  CHECK(stage.output_shape({1, c, 8, 8}) == Shape4{1, 2 * c, 4, 4});
  CHECK_THROWS_AS(DownsampleBlock<float>("x", 6, 12, 2, 4, DownsampleVariant::prelu), ConfigError);
}

TEST_CASE("standard layer examples") {
  Rng rng(91);
  PReLU<double> p("p", 3, 1.0);
  const auto x = random_tensor<double>({2, 3, 4, 4}, rng);
  CHECK((p.forward(x, RunMode::stage1(false)).values() == x.values()).all());

  BatchNorm<double> bn("bn", 2);
  Tensor<double> c({3, 2, 2, 2}, 4.0);
  for (Index i = 0; i < c.size(); i += 2) c[i] = -1.5;
  const auto y = bn.forward(c, RunMode::stage1(true));
  for (Index ch = 0; ch < 2; ++ch) {
    double m = 0;
    for (Index n = 0; n < 3; ++n)
      for (Index i = 0; i < 4; ++i) m += y.at(n, ch, i / 2, i % 2);
    CHECK(std::abs(m) < 1e-9);
  }
}

TEST_CASE("mixup") {
  Rng rng(5);
  const auto x = random_tensor<float>({4, 2, 3, 3}, rng);
  const std::vector<int> labels{0, 1, 2, 3};
  const std::vector<Index> perm{1, 0, 3, 2};
  const auto same = mixup_with<float>(x, labels, 1.0, perm);
  CHECK((same.images.values() == x.values()).all());
  CHECK(same.label_a == labels);

  auto opp = x;
  for (Index i = 0; i < 18; ++i) opp.sample(1)[i] = -opp.sample(0)[i];
  const auto zero = mixup_with<float>(opp, labels, 0.5, perm);
  for (Index i = 0; i < 18; ++i) CHECK(zero.images.sample(0)[i] == 0.0f);
  CHECK(zero.label_b == std::vector<int>{1, 0, 3, 2});

  double mean = 0;
  Rng brng(123);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) mean += sample_beta(0.2, brng);
  CHECK(std::abs(mean / draws - 0.5) < 0.01);

  const auto m = mixup_apply<float>(x, labels, 0.2, rng);
  CHECK(m.lambda >= 0.0);
  CHECK(m.lambda <= 1.0);
}
