#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "ebnet/arch/search.hpp"
#include "ebnet/cli/commands.hpp"
#include "ebnet/io/checkpoint.hpp"
#include "ebnet/parallel.hpp"
#include "ebnet/trainer/trainer.hpp"

namespace fs = std::filesystem;

namespace ebnet::cli {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

int to_int(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("bad integer '" + s + "' in " + what);
  }
}

std::array<int, 4> parse_quad(const std::string& s, char sep, const std::string& what) {
  std::vector<std::string> parts;
  if (sep == 0) {
    for (char c : s) parts.emplace_back(1, c);
  } else {
    parts = split(s, sep);
  }
  if (parts.size() != 4) throw ConfigError(what + " '" + s + "' needs four values");
  std::array<int, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) out[i] = to_int(parts[i], what);
  return out;
}

/// Proportional shrink of the 30/45/55-of-60 milestone layout.
std::vector<int> scaled_milestones(int epochs) {
  std::vector<int> out;
  for (double f : {0.5, 0.75, 55.0 / 60.0}) {
    const int m = static_cast<int>(std::lround(f * epochs));
    if (m > 0 && m < epochs && (out.empty() || m > out.back())) out.push_back(m);
  }
  return out;
}

struct DatasetOpts {
  std::string dataset = "cifar10";
  std::string data_dir;
};

void adapt_spec_to_dataset(arch::ArchSpec& spec, const data::Dataset& ds) {
  spec.in_channels = static_cast<int>(ds.channels);
  spec.classes = ds.classes;
  if (ds.kind == data::DatasetKind::imagefolder) {
    spec.stem = arch::Stem::imagenet7x7;
    spec.input_resolution = 224;
  } else {
    spec.stem = arch::Stem::cifar3x3;
    spec.input_resolution = static_cast<int>(ds.height);
  }
}

void print_cost(std::ostream& out, const arch::ArchSpec& spec, const arch::CostReport& r, bool json) {
  if (json) {
    out << r.to_json() << '\n';
    return;
  }
  out << "arch=" << arch::format_arch(spec) << "\nexperts=" << spec.n_experts
      << "\ninput=" << spec.input_resolution << "\ngroup_mix=" << arch::to_string(spec.group_mix) << '\n'
      << r.to_text();
  out << std::setprecision(4) << "bops_e9=" << double(r.bops) / 1e9 << "\nflops_e8=" << double(r.flops) / 1e8
      << "\nsize_mb=" << double(r.model_size_bytes) / 1e6 << '\n';
}

// Bench geometry "in=512,out=512,k=3,hw=16,stride=1,groups=1,batch=1".
struct BenchGeometry {
  ConvGeometry geom{512, 512, 3, 3, 1, 1, 1};
  Index hw = 16;
  Index batch = 1;
};

BenchGeometry parse_bench_geometry(const std::string& text) {
  BenchGeometry b;
  for (const auto& kv : split(text, ',')) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("geometry item '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq);
    const int v = to_int(kv.substr(eq + 1), "geometry");
    if (key == "in") b.geom.in_channels = v;
    else if (key == "out") b.geom.out_channels = v;
    else if (key == "k") b.geom.kernel_h = b.geom.kernel_w = v;
    else if (key == "hw") b.hw = v;
    else if (key == "stride") b.geom.stride = v;
    else if (key == "groups") b.geom.groups = v;
    else if (key == "pad") b.geom.padding = v;
    else if (key == "batch") b.batch = v;
    else throw ConfigError("unknown geometry key '" + key + "'");
  }
  if (text.find("pad=") == std::string::npos) b.geom.padding = b.geom.kernel_h / 2;
  b.geom.validate();
  if (b.hw < 1 || b.batch < 1) throw ConfigError("geometry sizes must be positive");
  return b;
}

template <typename Fn>
double median_ns(int iters, Fn&& fn) {
  std::vector<double> t;
  for (int i = 0; i < iters; ++i) {
    const auto a = std::chrono::steady_clock::now();
    fn();
    const auto b = std::chrono::steady_clock::now();
    t.push_back(std::chrono::duration<double, std::nano>(b - a).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

int cmd_bench(const std::string& geometry, int iters, int threads, std::ostream& out) {
  if (iters < 1) throw ConfigError("--iters must be >= 1");
  if (threads > 0) set_max_threads(threads);
  const BenchGeometry bg = parse_bench_geometry(geometry);
  const ConvGeometry& g = bg.geom;
  Rng rng(7);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  Tensor<float> x({bg.batch, g.in_channels, bg.hw, bg.hw});
  Tensor<float> w(g.weight_shape());
  for (Index i = 0; i < x.size(); ++i) x[i] = sign_plus(u(rng));
  for (Index i = 0; i < w.size(); ++i) w[i] = sign_plus(u(rng));
  Vec<float> alpha = Vec<float>::Ones(g.out_channels);
  const BitPlaneTensor xb = binarize_pack(x, PackAxis::channel);
  const BitPlaneTensor wb = binarize_pack(w, PackAxis::sample);

  const Tensor<float> packed = bconv2d_packed<float>(xb, wb, g, alpha);
  const Tensor<float> ref = conv2d_reference<float>(x, w, g, -1.0f);
  if (!(packed.shape() == ref.shape()) || !(packed.values() == ref.values()).all())
    throw ContractError("bench: packed kernel disagrees with the reference; refusing to time");

  const double t_packed = median_ns(iters, [&] { (void)bconv2d_packed<float>(xb, wb, g, alpha); });
  const double t_ref = median_ns(iters, [&] { (void)conv2d_reference<float>(x, w, g, -1.0f); });
  out << "kernel,median_ns\n"
      << "packed," << std::fixed << std::setprecision(0) << t_packed << '\n'
      << "reference," << t_ref << '\n'
      << std::setprecision(2) << "speedup=" << t_ref / t_packed << "\nthreads=" << max_threads() << '\n';
  return ok;
}

trainer::PolicyConfig policy_config(int epochs, int stage2_epochs, std::uint64_t seed, int batch, double lr,
                                    double mixup, int warmup, Index max_train, Index max_val) {
  trainer::PolicyConfig pc;
  for (trainer::TrainConfig* tc : {&pc.stage1, &pc.stage2}) {
    tc->epochs = tc == &pc.stage2 && stage2_epochs >= 0 ? stage2_epochs : epochs;
    tc->milestones = scaled_milestones(tc->epochs);
    tc->seed = seed;
    tc->batch_size = batch;
    tc->base_lr = lr;
    tc->mixup_alpha = mixup;
    tc->warmup_epochs = std::min(warmup, std::max(tc->epochs - 1, 0));
    tc->max_train_samples = max_train;
    tc->max_val_samples = max_val;
  }
  return pc;
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const GeometryError*>(&e))
    return usage;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const VersionError*>(&e)) return data_error;
  return failure;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Expert binary convolution toolkit"};
  app.require_subcommand(1);

  // cost
  auto* cost = app.add_subcommand("cost", "BOPs / FLOPs / size of an architecture");
  std::string arch_text;
  int input = 224, experts = 1, classes = 1000, base_width = 64;
  std::string group_mix = "auto", stem = "imagenet7x7", downsample = "prelu";
  bool json = false;
  cost->add_option("--arch", arch_text, "N0N1N2N3-E-G0:G1:G2:G3")->required();
  cost->add_option("--input", input, "input resolution");
  cost->add_option("--experts", experts, "experts per EBConv");
  cost->add_option("--group-mix", group_mix, "off | auto | all (true/false accepted)");
  cost->add_option("--stem", stem, "imagenet7x7 | cifar3x3");
  cost->add_option("--classes", classes);
  cost->add_option("--downsample", downsample, "vanilla | linear | relu | prelu");
  cost->add_option("--base-width", base_width);
  cost->add_flag("--json", json, "emit JSON");

  // train
  auto* train = app.add_subcommand("train", "run the four-step training policy");
  DatasetOpts dso;
  std::string out_dir, policy = "full", resume;
  int epochs = 60, stage2_epochs = -1, batch = 128, warmup = 5;
  std::uint64_t seed = 0;
  double lr = 1e-3, mixup = 0.2, tau = 1.0;
  Index max_train = 0, max_val = 0;
  train->add_option("--arch", arch_text)->required();
  train->add_option("--dataset", dso.dataset, "cifar10 | mnist | imagefolder");
  train->add_option("--data-dir", dso.data_dir)->required();
  train->add_option("--experts", experts);
  train->add_option("--epochs", epochs);
  train->add_option("--stage2-epochs", stage2_epochs, "defaults to --epochs");
  train->add_option("--seed", seed);
  train->add_option("--out", out_dir)->required();
  train->add_option("--policy", policy, "full | stage1 | stage2")->check(CLI::IsMember({"full", "stage1", "stage2"}));
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--batch-size", batch);
  train->add_option("--lr", lr);
  train->add_option("--mixup", mixup, "Beta(alpha, alpha); 0 disables");
  train->add_option("--warmup", warmup);
  train->add_option("--tau", tau, "gating softmax temperature");
  train->add_option("--group-mix", group_mix);
  train->add_option("--downsample", downsample);
  train->add_option("--base-width", base_width);
  train->add_option("--max-train", max_train, "cap on training samples (0 = all)");
  train->add_option("--max-val", max_val, "cap on validation samples (0 = all)");

  // eval
  auto* eval = app.add_subcommand("eval", "accuracy and expert utilization of a checkpoint");
  std::string ckpt;
  bool packed = false;
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--dataset", dso.dataset);
  eval->add_option("--data-dir", dso.data_dir)->required();
  eval->add_option("--max-val", max_val);
  eval->add_flag("--packed", packed, "use the packed kernels (Stage II models)");

  // search
  auto* search = app.add_subcommand("search", "coordinate-wise architecture search");
  double budget_bops = 0, budget_flops = 0;  // 1.7e9 style accepted
  std::string directions = "depth,groups", proxy = "mock", group_opts, depth_opts, width_opts, block_opts;
  int proxy_epochs = 2, rounds = 4, keep_top = 2;
  search->add_option("--seed-arch", arch_text)->required();
  search->add_option("--budget-bops", budget_bops)->required();
  search->add_option("--budget-flops", budget_flops)->required();
  search->add_option("--directions", directions, "comma list of blocks, depth, width, groups");
  search->add_option("--proxy", proxy, "mock | cifar10")->check(CLI::IsMember({"mock", "cifar10"}));
  search->add_option("--proxy-epochs", proxy_epochs);
  search->add_option("--data-dir", dso.data_dir, "CIFAR-10 directory for the cifar10 proxy");
  search->add_option("--rounds", rounds);
  search->add_option("--keep-top", keep_top);
  search->add_option("--group-options", group_opts, "e.g. 4:4:8:16,4:4:16:32");
  search->add_option("--depth-options", depth_opts, "e.g. 4,6,8");
  search->add_option("--width-options", width_opts, "e.g. 1,2,3");
  search->add_option("--block-options", block_opts, "e.g. 1133,1142,2222");
  search->add_option("--experts", experts);
  search->add_option("--input", input);
  search->add_option("--group-mix", group_mix);
  search->add_option("--max-train", max_train);
  search->add_option("--max-val", max_val);
  search->add_option("--seed", seed);
  search->add_option("--out", out_dir, "directory for per-round CSVs");

  // export
  auto* exp = app.add_subcommand("export", "packed inference model from a Stage II checkpoint");
  bool force = false, pack = true;
  exp->add_option("--ckpt", ckpt)->required();
  exp->add_option("--out", out_dir, "output file")->required();
  exp->add_flag("--pack,!--no-pack", pack, "store binary weights as bit planes");
  exp->add_flag("--force", force, "export a Stage I checkpoint anyway");

  // bench
  auto* bench = app.add_subcommand("bench", "packed kernel vs float reference timing");
  std::string geometry = "in=512,out=512,k=3,hw=16";
  int iters = 10, threads = 0;
  bench->add_option("--geometry", geometry, "in=,out=,k=,hw=,stride=,groups=,batch=");
  bench->add_option("--iters", iters);
  bench->add_option("--threads", threads, "0 = EBNET_THREADS / hardware");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return usage;
  }

  try {
    const auto make_spec = [&] {
      arch::ArchSpec spec = arch::parse_arch(arch_text);
      spec.n_experts = experts;
      spec.group_mix = arch::parse_group_mix(group_mix);
      spec.downsample = arch::parse_downsample(downsample);
      spec.base_width = base_width;
      spec.input_resolution = input;
      spec.classes = classes;
      spec.stem = arch::parse_stem(stem);
      spec.validate();
      return spec;
    };

    if (cost->parsed()) {
      const arch::ArchSpec spec = make_spec();
      print_cost(out, spec, arch::cost_model(spec), json);
      return ok;
    }

    if (train->parsed()) {
      const auto kind = data::parse_dataset_kind(dso.dataset);
      const data::Dataset train_set = data::load_dataset(kind, dso.data_dir, data::Split::train);
      const data::Dataset val_set = data::load_dataset(kind, dso.data_dir, data::Split::test);
      arch::ArchSpec spec = make_spec();
      adapt_spec_to_dataset(spec, train_set);
      spec.validate();
      trainer::PolicyConfig pc =
          policy_config(epochs, stage2_epochs, seed, batch, lr, mixup, warmup, max_train, max_val);
      pc.tau = tau;
      pc.out_dir = out_dir;
      data::Normalization norm = data::compute_normalization(train_set);
      std::unique_ptr<arch::Network<float>> start;
      int resumed_step = 0;
      if (!resume.empty()) {
        io::Checkpoint ck = io::load_checkpoint(fs::path(resume));
        if (ck.kind != io::CheckpointKind::training) throw VersionError("cannot resume from a packed export");
        arch::ArchSpec expect = spec;
        expect.n_experts = ck.meta.spec.n_experts;
        if (!(ck.meta.spec == expect))
          throw VersionError("checkpoint architecture " + arch::format_arch(ck.meta.spec) +
                             " does not match the requested " + arch::format_arch(spec));
        resumed_step = ck.meta.policy_step;
        norm = ck.meta.norm;
        start = std::move(ck.net);
      }
      if (policy == "stage1") {
        pc.first_step = 1;
        pc.last_step = 1;
      } else if (policy == "stage2") {
        pc.first_step = pc.last_step = 4;
        if (!start) throw ConfigError("--policy stage2 needs --resume with a Stage I checkpoint");
      } else {
        pc.first_step = resumed_step + 1;
        pc.last_step = 4;
        if (pc.first_step > 4) throw ConfigError("checkpoint already completed the policy");
      }
      const trainer::PolicyResult res =
          trainer::train_policy(spec, pc, train_set, val_set, norm, std::move(start));
      for (const auto& s : res.steps)
        out << "step" << s.step << " val_top1=" << s.final_val.top1 << " val_top5=" << s.final_val.top5
            << " checkpoint=" << s.checkpoint.string() << '\n';
      return ok;
    }

    if (eval->parsed()) {
      io::Checkpoint ck = io::load_checkpoint(fs::path(ckpt));
      const auto kind = data::parse_dataset_kind(dso.dataset);
      const data::Dataset val_set = data::load_dataset(kind, dso.data_dir, data::Split::test);
      if (val_set.classes != ck.meta.spec.classes)
        throw ConfigError("dataset has " + std::to_string(val_set.classes) + " classes, model has " +
                          std::to_string(ck.meta.spec.classes));
      if (val_set.channels != ck.meta.spec.in_channels) throw ConfigError("dataset channel count differs from the model");
      trainer::EvalOptions eo;
      eo.max_samples = max_val;
      eo.binary_weights = ck.meta.stage == 2 || ck.kind == io::CheckpointKind::packed;
      eo.packed = packed;
      const trainer::Accuracy acc = trainer::evaluate(*ck.net, val_set, ck.meta.norm, eo);
      out << std::setprecision(10) << "top1=" << acc.top1 << "\ntop5=" << acc.top5 << "\nsamples=" << acc.samples
          << '\n';
      const auto util = trainer::expert_utilization(*ck.net, val_set, ck.meta.norm, eo);
      const auto convs = ck.net->expert_convs();
      for (std::size_t i = 0; i < util.size(); ++i) {
        out << "utilization " << convs[i]->name();
        for (double v : util[i]) out << ' ' << v;
        out << '\n';
      }
      return ok;
    }

    if (search->parsed()) {
      const arch::ArchSpec seed_spec = make_spec();
      arch::SearchConfig sc;
      const auto budget = [](double v, const char* what) {
        if (!(v >= 1 && v < 1.8e19)) throw ConfigError(std::string(what) + " must be a positive count");
        return static_cast<std::uint64_t>(v);
      };
      sc.max_bops = budget(budget_bops, "--budget-bops");
      sc.max_flops = budget(budget_flops, "--budget-flops");
      sc.rounds = rounds;
      sc.keep_top = keep_top;
      sc.directions.clear();
      for (const auto& d : split(directions, ',')) sc.directions.push_back(arch::parse_direction(d));
      for (const auto& g : split(group_opts, ',')) sc.group_options.push_back(parse_quad(g, ':', "group option"));
      for (const auto& b : split(block_opts, ',')) sc.block_options.push_back(parse_quad(b, 0, "block option"));
      for (const auto& d : split(depth_opts, ',')) sc.depth_options.push_back(to_int(d, "depth option"));
      for (const auto& w : split(width_opts, ',')) sc.width_options.push_back(to_int(w, "width option"));

      arch::ProxyEval proxy_fn = arch::mock_proxy;
      data::Dataset ptrain, pval;
      data::Normalization pnorm;
      if (proxy == "cifar10") {
        if (dso.data_dir.empty()) throw ConfigError("--proxy cifar10 needs --data-dir");
        ptrain = data::load_cifar10(dso.data_dir, data::Split::train);
        pval = data::load_cifar10(dso.data_dir, data::Split::test);
        pnorm = data::compute_normalization(ptrain);
        proxy_fn = [&](const arch::ArchSpec& s) {
          arch::ArchSpec desk = s;
          adapt_spec_to_dataset(desk, ptrain);
          arch::Network<float> net(desk);
          net.initialize(seed);
          trainer::TrainConfig tc = trainer::TrainConfig::desk(trainer::Stage::I);
          tc.epochs = proxy_epochs;
          tc.milestones = {};
          tc.warmup_epochs = std::min(1, proxy_epochs);
          tc.seed = seed;
          tc.max_train_samples = max_train;
          tc.max_val_samples = max_val;
          trainer::Adam opt;
          const auto run = trainer::train(net, ptrain, pval, pnorm, tc, opt);
          return run.epochs.empty() ? 0.0 : run.epochs.back().val_top1;
        };
      }
      const arch::SearchResult res = arch::search(seed_spec, sc, proxy_fn);
      if (res.empty) {
        err << "search: no candidate satisfies the budget\n";
        return infeasible;
      }
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        for (const auto& ph : res.phases) {
          std::ofstream f(fs::path(out_dir) / ("round" + std::to_string(ph.round) + ".csv"));
          arch::write_candidates_csv(f, ph.rows);
        }
        std::ofstream f(fs::path(out_dir) / "ranking.csv");
        arch::write_candidates_csv(f, res.ranking);
      }
      arch::write_candidates_csv(out, res.ranking);
      return ok;
    }

    if (exp->parsed()) {
      io::Checkpoint ck = io::load_checkpoint(fs::path(ckpt));
      if (ck.kind != io::CheckpointKind::training) throw ConfigError("checkpoint is already a packed export");
      if (ck.meta.stage != 2 && !force)
        throw ConfigError("checkpoint holds Stage I (real) weights; pass --force to binarize them anyway");
      if (!pack) throw ConfigError("only packed exports are supported");
      io::export_packed(fs::path(out_dir), *ck.net, ck.meta);
      const auto size = fs::file_size(out_dir);
      const auto expected = arch::cost_model(ck.meta.spec).model_size_bytes;
      out << "file_bytes=" << size << "\ncost_model_bytes=" << expected << std::setprecision(4)
          << "\nratio=" << double(size) / double(expected) << '\n';
      return ok;
    }

    if (bench->parsed()) return cmd_bench(geometry, iters, threads, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return usage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"ebnet"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace ebnet::cli
