// Acceptance checks, one line per criterion:
//   acceptance [--criterion N]
// Exit status: 0 all selected criteria pass, 1 a failure, 77 nothing
// failed but at least one criterion could not run here.

#include <chrono>
#include <cstdlib>
#include <functional>
#include <map>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ebnet/io/checkpoint.hpp"
#include "ebnet/parallel.hpp"
#include "suites.hpp"

using namespace ebnet;
using ebnet::testing::pick;
using ebnet::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

enum class Verdict { pass, fail, not_run };

struct Outcome {
  Verdict verdict;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Verdict::pass : Verdict::fail, std::move(detail)}; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1: packed kernel vs reference --------------------------------------------------

Outcome kernel_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(20240601);
  Index mismatches = 0, outputs = 0;
  for (int t = 0; t < 1000; ++t) {
    const Index groups = Index(1) << pick(rng, 0, 3);
    const Index k = pick(rng, 0, 2) == 0 ? 1 : (pick(rng, 0, 3) == 0 ? 5 : 3);
    const ConvGeometry g{groups * pick(rng, 1, 40), groups * pick(rng, 1, 8), k, k, pick(rng, 1, 2),
                         pick(rng, 0, k / 2), groups};
    const Index h = pick(rng, k, 10), w = pick(rng, k, 10);
    const auto x = random_tensor<double>({pick(rng, 1, 2), g.in_channels, h, w}, rng);
    const auto wt = random_tensor<double>(g.weight_shape(), rng);
    const BitPlaneTensor xb = binarize_pack(x, PackAxis::channel), wb = binarize_pack(wt, PackAxis::sample);
    const IntTensor acc = bconv2d_accumulate(xb, wb, g);
    const auto ref = conv2d_reference<double>(unpack<double>(xb), unpack<double>(wb), g, -1.0);
    if (!(acc.shape == ref.shape())) return verdict(false, "shape mismatch at geometry " + std::to_string(t));
    for (Index i = 0; i < ref.size(); ++i) mismatches += double(acc.values[std::size_t(i)]) != ref[i];
    outputs += ref.size();
  }
  const double secs = seconds_since(t0);
  return verdict(mismatches == 0 && secs < 60, "1000 geometries, " + std::to_string(outputs) + " outputs, " +
                                                   std::to_string(mismatches) + " mismatches, " + fmt(secs, 3) +
                                                   " s (limit 60 s)");
}

// ---- 2: gradients ------------------------------------------------------------------------

Outcome gradient_suite() {
  constexpr double tol = 1e-4;
  std::map<std::string, std::pair<double, int>> worst;  // layer -> (error, cases)
  for (const auto& c : ebnet::testing::gradient_suite(20, 777)) {
    auto& w = worst[c.layer];
    w.first = std::max(w.first, c.report.worst);
    ++w.second;
  }
  Rng rng(778);
  for (double tau : {0.02, 1.0, 5.0, 25.0}) {
    auto& w = worst["gate_backward tau=" + fmt(tau)];
    for (int t = 0; t < 20; ++t, ++w.second)
      w.first = std::max(w.first, ebnet::testing::gate_jacobian_error(pick(rng, 2, 8), tau, rng));
  }
  auto& xw = worst["softmax_xent"];
  for (int t = 0; t < 20; ++t, ++xw.second) xw.first = std::max(xw.first, ebnet::testing::xent_error(rng));

  bool ok = true;
  std::string detail;
  double overall = 0;
  std::string culprit;
  for (const auto& [name, w] : worst) {
    ok = ok && w.first < tol && w.second >= 20;
    if (w.first >= overall) {
      overall = w.first;
      culprit = name;
    }
  }
  detail = std::to_string(worst.size()) + " layers/ops x >=20 shapes, worst rel error " + fmt(overall, 3) + " (" +
           culprit + "), tolerance 1e-4";
  return verdict(ok, detail);
}

// ---- 3: cost model regression --------------------------------------------------------------

Outcome cost_regression() {
  const auto within = [](double v, double target, double tol) { return std::abs(v / target - 1) <= tol; };
  const arch::CostReport r18 = arch::cost_model(arch::parse_arch("2222-1-1:1:1:1"));
  arch::ArchSpec big = arch::parse_arch("1262-2-4:8:8:16");
  big.n_experts = 4;
  const arch::CostReport cb = arch::cost_model(big);
  std::uint64_t lo = UINT64_MAX, hi = 0;
  for (const char* t : {"1133-1-1:1:1:1", "1142-1-1:1:1:1", "1124-1-1:1:1:1", "2222-1-1:1:1:1"}) {
    const std::uint64_t b = arch::cost_model(arch::parse_arch(t)).bops;
    lo = std::min(lo, b);
    hi = std::max(hi, b);
  }
  const double size_mb = double(cb.model_size_bytes) / 1e6;
  const bool a = within(double(r18.bops), 1.7e9, 0.03);
  const bool b = within(double(cb.bops), 1.7e9, 0.05);
  const bool c = within(double(cb.flops), 1.1e8, 0.15);
  const bool d = within(size_mb, 7.8, 0.10);
  const bool e = double(hi) / double(lo) - 1 <= 0.01;
  const auto mark = [](bool ok) { return ok ? "ok" : "MISS"; };
  return verdict(a && b && c && d && e,
                 std::string("2222 BOPs ") + fmt(double(r18.bops) / 1e9) + "e9 [" + mark(a) + "]; 1262 BOPs " +
                     fmt(double(cb.bops) / 1e9) + "e9 [" + mark(b) + "], FLOPs " + fmt(double(cb.flops) / 1e8) +
                     "e8 vs 1.1e8+-15% [" + mark(c) + "], size " + fmt(size_mb) + " MB vs 7.8+-10% [" + mark(d) +
                     "]; arrangements spread " + fmt(100.0 * (double(hi) / double(lo) - 1), 3) + "% [" + mark(e) +
                     "]");
}

// ---- 4: BOP invariance ---------------------------------------------------------------------

Outcome bop_invariance() {
  Rng rng(4);
  int checked = 0, broken = 0;
  for (int t = 0; t < 10000; ++t) {
    const Index g = pick(rng, 1, 8);
    const Index ci = 12 * g * pick(rng, 1, 16), co = 12 * g * pick(rng, 1, 16);  // 12: divisible by 2, 3, 4
    const Index h = pick(rng, 1, 112), w = pick(rng, 1, 112), kh = pick(rng, 1, 7), kw = pick(rng, 1, 7);
    const std::uint64_t base = arch::conv_bops(h, w, ci, co, g, kh, kw);
    for (Index k = 2; k <= 4; ++k, ++checked) broken += arch::conv_bops(h, w, k * ci, k * co, k * k * g, kh, kw) != base;
  }
  return verdict(broken == 0, std::to_string(checked) + " widened layers, " + std::to_string(broken) + " changed");
}

// ---- 5: EBConv semantics ---------------------------------------------------------------------

Outcome ebconv_semantics() {
  Rng rng(5);
  int n1 = 0, rep = 0, single = 0;
  const graph::RunMode modes[] = {graph::RunMode::stage1(false), graph::RunMode::stage2(false)};
  for (int t = 0; t < 100; ++t) {
    const Index gr = Index(1) << pick(rng, 0, 2);
    const ConvGeometry g{gr * pick(rng, 1, 6), gr * pick(rng, 1, 6), 3, 3, pick(rng, 1, 2), 1, gr};
    const auto x = random_tensor<float>({pick(rng, 1, 4), g.in_channels, pick(rng, 3, 8), pick(rng, 3, 8)}, rng);
    const graph::RunMode& mode = modes[t % 2];

    graph::ExpertBinaryConv<float> one("eb", g, 1);
    graph::BinaryConv<float> plain("b", g);
    graph::initialize<float>(one, std::uint64_t(t));
    ebnet::testing::randomize(one.alpha().value, rng);
    plain.weight().value.values() = one.theta().value.values();
    plain.alpha().value.values() = one.alpha().value.values();
    n1 += (one.forward(x, mode).values() == plain.forward(x, mode).values()).all();

    graph::ExpertBinaryConv<float> four("eb4", g, 4);
    graph::initialize<float>(four, std::uint64_t(t) + 1000);
    four.replicate_experts(std::uint64_t(t));
    const auto y0 = four.forward(x, mode);
    ebnet::testing::randomize(four.omega().value, rng, -5, 5);
    rep += (four.forward(x, mode).values() == y0.values()).all();

    graph::ExpertBinaryConv<float> mixed("ebm", g, 4);
    graph::initialize<float>(mixed, std::uint64_t(t) + 2000);
    ebnet::testing::randomize(mixed.omega().value, rng, -3, 3);
    ebnet::testing::randomize(mixed.alpha().value, rng);
    const auto ym = mixed.forward(x, mode);
    const Index per = g.out_channels * g.reduction_length();
    std::vector<bool> used(4, false);
    for (const auto& s : mixed.last_gates()) used[std::size_t(s.selected)] = true;
    for (Index i = 0; i < 4; ++i)
      if (!used[std::size_t(i)]) mixed.theta().value.values().segment(i * per, per).setZero();
    single += (mixed.forward(x, mode).values() == ym.values()).all();
  }
  return verdict(n1 == 100 && rep == 100 && single == 100,
                 "N=1==BConv " + std::to_string(n1) + "/100, replication invariance " + std::to_string(rep) +
                     "/100, single-expert activity " + std::to_string(single) + "/100 (exact)");
}

// ---- 6 / 7: desk-scale training -----------------------------------------------------------------

struct DeskRun {
  double step3 = 0;
  double step4 = 0;
  double best13 = 0;
};

fs::path workdir() {
  if (const char* w = std::getenv("EBNET_ACCEPT_WORKDIR")) return w;
  return fs::temp_directory_path() / "ebnet_acceptance";
}

arch::ArchSpec desk_spec(int experts) {
  arch::ArchSpec s = arch::parse_arch("2222-1-4:4:4:4");
  s.n_experts = experts;
  s.stem = arch::Stem::cifar3x3;
  s.input_resolution = 32;
  s.classes = 10;
  s.validate();
  return s;
}

DeskRun desk_run(const fs::path& cifar, int experts, std::uint64_t seed, int last_step) {
  const data::Dataset tr = data::load_cifar10(cifar, data::Split::train);
  const data::Dataset va = data::load_cifar10(cifar, data::Split::test);
  const data::Normalization norm = data::compute_normalization(tr);
  trainer::PolicyConfig cfg;
  cfg.stage1.seed = cfg.stage2.seed = seed;
  cfg.last_step = last_step;
  cfg.out_dir = workdir() / ("n" + std::to_string(experts) + "_seed" + std::to_string(seed));
  fs::create_directories(cfg.out_dir);
  trainer::PolicyResult r = trainer::train_policy(desk_spec(experts), cfg, tr, va, norm);
  DeskRun out;
  for (const auto& s : r.steps) {
    if (s.step <= 3)
      for (const auto& e : s.metrics.epochs) out.best13 = std::max(out.best13, e.val_top1);
    if (s.step == 3) out.step3 = s.final_val.top1;
    if (s.step == 4) out.step4 = s.final_val.top1;
  }
  return out;
}

const char* cifar_dir() { return std::getenv("EBNET_CIFAR10_DIR"); }

Outcome desk_training() {
  const char* dir = cifar_dir();
  if (!dir) return {Verdict::not_run, "EBNET_CIFAR10_DIR not set (needs CIFAR-10 binaries and hours of compute)"};
  double mean1 = 0, mean4 = 0;
  DeskRun first;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const DeskRun four = desk_run(dir, 4, seed, 4);
    const DeskRun one = desk_run(dir, 1, seed, 3);
    if (seed == 0) first = four;
    mean4 += four.step3 / 3;
    mean1 += one.step3 / 3;
  }
  const bool a = first.best13 >= 80.0, b = first.step4 >= 72.0, c = mean4 - mean1 >= 0.0;
  return verdict(a && b && c, "steps 1-3 best top-1 " + fmt(first.best13) + "% (>=80), step 4 " + fmt(first.step4) +
                                  "% (>=72), mean step-3 N=4 " + fmt(mean4) + "% vs N=1 " + fmt(mean1) + "%");
}

Outcome specialization() {
  const char* dir = cifar_dir();
  if (!dir) return {Verdict::not_run, "EBNET_CIFAR10_DIR not set (needs a trained 4-expert CIFAR-10 model)"};
  const fs::path ckpt = workdir() / "n4_seed0" / "step4.ckpt";
  if (!fs::exists(ckpt)) desk_run(dir, 4, 0, 4);
  io::Checkpoint ck = io::load_checkpoint(ckpt);
  const data::Dataset va = data::load_cifar10(dir, data::Split::test);
  trainer::EvalOptions opt;
  opt.binary_weights = true;
  const auto util = trainer::expert_utilization(*ck.net, va, ck.meta.norm, opt);
  const auto& last = util.back();
  const double low = *std::min_element(last.begin(), last.end());
  std::string hist;
  for (double u : last) hist += (hist.empty() ? "" : "/") + fmt(100 * u, 3);
  return verdict(low >= 0.01, "final EBConv utilization % " + hist + " (each >= 1)");
}

// ---- 8: speed --------------------------------------------------------------------------------

template <typename F>
double median_seconds(int iters, F&& fn) {
  std::vector<double> t;
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t.push_back(seconds_since(t0));
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

Outcome kernel_speed() {
  set_max_threads(1);
  const ConvGeometry g{512, 512, 3, 3, 1, 1, 1};
  Rng rng(8);
  const auto x = random_tensor<float>({1, 512, 16, 16}, rng);
  const auto w = random_tensor<float>(g.weight_shape(), rng);
  const Tensor<float> xs = unpack<float>(binarize_pack(x, PackAxis::channel));
  const Tensor<float> ws = unpack<float>(binarize_pack(w, PackAxis::sample));
  const BitPlaneTensor wb = binarize_pack(w, PackAxis::sample);
  const Vec<float> alpha = Vec<float>::Ones(512);
  // packed timing includes binarizing the activations
  const auto packed = [&] { return bconv2d_packed<float>(binarize_pack(x, PackAxis::channel), wb, g, alpha); };
  const auto ref = [&] { return conv2d_reference<float>(xs, ws, g, -1.0f); };
  if (!(packed().values() == ref().values()).all()) return verdict(false, "packed output differs from reference");
  const double tp = median_seconds(7, packed), tr = median_seconds(3, ref);
  return verdict(tr / tp >= 5.0, "512->512 3x3 @16x16, 1 thread: packed " + fmt(tp * 1e3, 3) + " ms, reference " +
                                     fmt(tr * 1e3, 4) + " ms, speedup " + fmt(tr / tp, 3) + "x (>=5)");
}

// ---- 9: export round trip --------------------------------------------------------------------

Outcome export_round_trip() {
  arch::ArchSpec spec = arch::parse_arch("1262-2-4:8:8:16");
  spec.n_experts = 4;
  spec.input_resolution = 32;  // weights do not depend on resolution; keeps the forward cheap
  arch::Network<float> net(spec);
  net.initialize(9);
  Rng rng(9);
  for (auto* bn : net.batch_norms()) {
    ebnet::testing::randomize(bn->running_mean().value, rng, -0.5, 0.5);
    ebnet::testing::randomize(bn->running_var().value, rng, 0.5, 2.0);
  }
  for (auto* e : net.expert_convs()) ebnet::testing::randomize(e->omega().value, rng);
  io::CheckpointMeta meta;
  meta.spec = spec;
  meta.stage = 2;
  meta.policy_step = 4;

  std::stringstream ss;
  io::export_packed(ss, net, meta);
  const std::size_t file_bytes = ss.str().size();
  io::Checkpoint ck = io::load_checkpoint(ss);
  const auto x = random_tensor<float>({32, 3, 32, 32}, rng, -2, 2);
  graph::RunMode packed = graph::RunMode::stage2(false);
  packed.packed_kernels = true;
  const auto before = net.forward(x, graph::RunMode::stage2(false));
  const bool exact = (ck.net->forward(x, packed).values() == before.values()).all();

  // per-layer payload: bit planes vs real32 of the same tensor
  double worst_ratio = 0;
  bool ratios_ok = true;
  for (auto* l : net.binary_layers()) {
    std::vector<graph::Param<float>*> ps;
    l->collect_params(ps);
    for (auto* p : ps) {
      if (p->role != graph::ParamRole::latent_binary) continue;
      const Shape4 s = p->value.shape();
      const double real32 = 4.0 * double(s.count());
      const double packed_bytes = 8.0 * double(s.n * words_for_bits(s.sample_size()));
      const double ratio = packed_bytes / real32;
      worst_ratio = std::max(worst_ratio, ratio);
      ratios_ok = ratios_ok && packed_bytes >= real32 / 32 && packed_bytes <= real32 / 32 + 8.0 * double(s.n);
    }
  }
  const double predicted = double(arch::cost_model(spec).model_size_bytes);
  const double size_err = double(file_bytes) / predicted - 1;
  return verdict(exact && ratios_ok && std::abs(size_err) <= 0.02,
                 std::string("reload forward ") + (exact ? "exact" : "DIFFERS") + " on 32 inputs; worst payload ratio " +
                     fmt(worst_ratio, 4) + " (1/32 = 0.03125 + word padding); file " + std::to_string(file_bytes) +
                     " B vs cost model " + fmt(predicted, 8) + " B (" + fmt(100 * size_err, 3) + "%)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"kernel/oracle equivalence", kernel_equivalence},
      {"gradient suite", gradient_suite},
      {"cost-model regression", cost_regression},
      {"BOP invariance", bop_invariance},
      {"EBConv semantics", ebconv_semantics},
      {"desk-scale training", desk_training},
      {"expert specialization", specialization},
      {"packed kernel speed", kernel_speed},
      {"export round trip", export_round_trip},
  };
  bool failed = false, skipped = false;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && int(i) + 1 != only) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {Verdict::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : o.verdict == Verdict::fail ? "FAIL" : "NOT RUN";
    std::cout << "criterion " << i + 1 << " [" << criteria[i].first << "]: " << tag << " - " << o.detail << std::endl;
    failed |= o.verdict == Verdict::fail;
    skipped |= o.verdict == Verdict::not_run;
  }
  return failed ? 1 : skipped ? 77 : 0;
}
