#include <fstream>

#include "ebnet/io/checkpoint.hpp"
#include "ebnet/trainer/trainer.hpp"

namespace fs = std::filesystem;

namespace ebnet::trainer {

namespace {

struct StepContext {
  const arch::ArchSpec& spec;
  const PolicyConfig& cfg;
  const data::Dataset& train_set;
  const data::Dataset& val_set;
  const data::Normalization& norm;
};

void finish_step(const StepContext& ctx, Network<float>& net, StepResult& res, int stage, const Adam* opt) {
  if (res.metrics.epochs.empty()) {
    EvalOptions eo;
    eo.max_samples = ctx.cfg.stage1.max_val_samples;
    eo.binary_weights = stage == 2;
    res.final_val = evaluate(net, ctx.val_set, ctx.norm, eo);
  } else {
    const EpochMetrics& last = res.metrics.epochs.back();
    res.final_val = {last.val_top1, last.val_top5, 0};
  }
  if (ctx.cfg.out_dir.empty()) return;
  io::CheckpointMeta meta;
  meta.spec = net.spec();
  meta.tau = ctx.cfg.tau;
  meta.seed = ctx.cfg.stage1.seed;
  meta.policy_step = res.step;
  meta.stage = stage;
  meta.epoch = static_cast<std::int32_t>(res.metrics.epochs.size());
  meta.val_top1 = res.final_val.top1;
  meta.val_top5 = res.final_val.top5;
  meta.norm = ctx.norm;
  res.checkpoint = ctx.cfg.out_dir / ("step" + std::to_string(res.step) + ".ckpt");
  io::save_checkpoint(res.checkpoint, net, meta, opt ? &opt->state() : nullptr);
}

StepResult run_training(const StepContext& ctx, Network<float>& net, int step, const TrainConfig& tc, int stage) {
  StepResult res;
  res.step = step;
  Adam opt;
  std::ofstream csv;
  if (!ctx.cfg.out_dir.empty()) {
    csv.open(ctx.cfg.out_dir / ("metrics_step" + std::to_string(step) + ".csv"));
    if (!csv) throw ConfigError("cannot write metrics into " + ctx.cfg.out_dir.string());
  }
  res.metrics = train(net, ctx.train_set, ctx.val_set, ctx.norm, tc, opt, csv.is_open() ? &csv : nullptr);
  finish_step(ctx, net, res, stage, &opt);
  return res;
}

}  // namespace

PolicyResult train_policy(const arch::ArchSpec& spec, const PolicyConfig& cfg, const data::Dataset& train_set,
                          const data::Dataset& val_set, const data::Normalization& norm,
                          std::unique_ptr<Network<float>> resume) {
  if (cfg.first_step < 1 || cfg.last_step > 4 || cfg.first_step > cfg.last_step)
    throw ConfigError("policy steps must satisfy 1 <= first <= last <= 4");
  if (cfg.first_step > 1 && !resume) throw ConfigError("starting after step 1 needs a checkpoint to resume from");
  if (cfg.stage2.stage != Stage::II || cfg.stage1.stage != Stage::I) throw ConfigError("policy stage configs swapped");
  if (train_set.classes > spec.classes) throw ConfigError("dataset has more classes than the model");
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  const StepContext ctx{spec, cfg, train_set, val_set, norm};
  const auto tau = static_cast<float>(cfg.tau);

  PolicyResult out;
  std::unique_ptr<Network<float>> net = std::move(resume);
  for (int step = cfg.first_step; step <= cfg.last_step; ++step) {
    switch (step) {
      case 1: {
        arch::ArchSpec single = spec;
        single.n_experts = 1;
        net = std::make_unique<Network<float>>(single, tau);
        net->initialize(cfg.stage1.seed);
        out.steps.push_back(run_training(ctx, *net, 1, cfg.stage1, 1));
        break;
      }
      case 2: {
        auto multi = std::make_unique<Network<float>>(spec, tau);
        multi->initialize(cfg.stage1.seed);
        multi->load_from(*net);
        multi->replicate_experts(derive_seed(cfg.stage1.seed, 2));
        net = std::move(multi);
        recalibrate_bn(*net, train_set, norm, cfg.stage1.batch_size, cfg.recal_batches, cfg.stage1.seed);
        StepResult res;
        res.step = 2;
        finish_step(ctx, *net, res, 1, nullptr);
        out.steps.push_back(std::move(res));
        break;
      }
      case 3:
        if (!(net->spec() == spec)) throw VersionError("step 3 needs a model with the requested architecture");
        out.steps.push_back(run_training(ctx, *net, 3, cfg.stage1, 1));
        break;
      case 4:
        if (!(net->spec() == spec)) throw VersionError("step 4 needs a model with the requested architecture");
        net->on_binarization_onset();
        out.steps.push_back(run_training(ctx, *net, 4, cfg.stage2, 2));
        break;
      default:
        break;
    }
  }
  out.model = std::move(net);
  return out;
}

}  // namespace ebnet::trainer
