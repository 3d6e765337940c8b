#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ebnet/arch/builder.hpp"
#include "ebnet/data/dataset.hpp"

namespace ebnet::trainer {

using arch::Network;

enum class Stage { I, II };

struct TrainConfig {
  Stage stage = Stage::I;
  int epochs = 60;
  double base_lr = 1e-3;
  std::vector<int> milestones{30, 45, 55};
  double decay = 0.1;
  double weight_decay = 1e-5;
  int warmup_epochs = 5;
  double mixup_alpha = 0.2;  // 0 disables mixup
  int batch_size = 128;
  std::uint64_t seed = 0;
  // Desk-scale caps (0 = whole split).
  Index max_train_samples = 0;
  Index max_val_samples = 0;

  void validate() const;
  /// CIFAR-10 recipe: 60 epochs, milestones 30/45/55, batch 128, warmup 5;
  /// weight decay 1e-5 in Stage I and 0 in Stage II.
  static TrainConfig desk(Stage stage);
};

/// Linear warmup from base/warmup to base, then base * decay^(milestones passed).
double lr_schedule(int epoch, const TrainConfig& cfg);

// ---- optimizer ------------------------------------------------------------------

struct AdamSlot {
  std::string name;
  Tensor<float>::Array m, v;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<AdamSlot> slots;
};

/// Adam with a classic L2 term (grad += wd * w on decayed parameters); latent
/// binary weights are clamped to [-1, 1] after every step.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Stage II contract: any non-zero weight decay raises ContractError.
  void require_zero_decay(bool on) { zero_decay_ = on; }
  bool zero_decay_required() const { return zero_decay_; }

  void step(const std::vector<graph::Param<float>*>& params, double lr, double weight_decay);

  AdamState& state() { return state_; }
  const AdamState& state() const { return state_; }

 private:
  double beta1_, beta2_, eps_;
  bool zero_decay_ = false;
  AdamState state_;
};

// ---- training and evaluation --------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_top1 = 0;
  double val_top5 = 0;
};

struct Accuracy {
  double top1 = 0;
  double top5 = 0;
  Index samples = 0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  /// Per EBConv layer: fraction of validation samples routed to each expert.
  std::vector<std::vector<double>> utilization;
};

struct EvalOptions {
  Index batch_size = 256;
  Index max_samples = 0;
  bool binary_weights = false;
  bool packed = false;
};

graph::RunMode eval_mode(const EvalOptions& opt);

Accuracy evaluate(Network<float>& net, const data::Dataset& ds, const data::Normalization& norm,
                  const EvalOptions& opt);

/// Routing fractions per EBConv layer; rows sum to 1.
std::vector<std::vector<double>> expert_utilization(Network<float>& net, const data::Dataset& ds,
                                                    const data::Normalization& norm, const EvalOptions& opt);

/// Top-1 / top-5 hit counts of a logits batch.
std::pair<Index, Index> topk_hits(const Tensor<float>& logits, std::span<const int> labels);

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const EpochMetrics& m);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs cfg.epochs epochs of minibatch Adam with mixup, evaluating on `val`
/// after every epoch.
RunMetrics train(Network<float>& net, const data::Dataset& train_set, const data::Dataset& val_set,
                 const data::Normalization& norm, const TrainConfig& cfg, Adam& opt, std::ostream* metrics = nullptr,
                 const EpochCallback& on_epoch = {});

/// One pass of cumulative-average BN statistics over up to `max_batches`.
void recalibrate_bn(Network<float>& net, const data::Dataset& ds, const data::Normalization& norm, Index batch_size,
                    Index max_batches, std::uint64_t seed);

// ---- four-step policy ------------------------------------------------------------------

struct PolicyConfig {
  TrainConfig stage1 = TrainConfig::desk(Stage::I);
  TrainConfig stage2 = TrainConfig::desk(Stage::II);
  int first_step = 1;
  int last_step = 4;
  double tau = 1.0;
  Index recal_batches = 100;
  std::filesystem::path out_dir;  // empty: no checkpoints or metrics files
};

struct StepResult {
  int step = 0;
  RunMetrics metrics;
  Accuracy final_val;
  std::filesystem::path checkpoint;
};

struct PolicyResult {
  std::unique_ptr<Network<float>> model;
  std::vector<StepResult> steps;
};

/// Steps: (1) Stage I with one expert; (2) replicate into N experts, fresh
/// omega, BN recalibration; (3) Stage I with N experts; (4) Stage II.
/// `resume` (optional) supplies the model after step first_step - 1.
PolicyResult train_policy(const arch::ArchSpec& spec, const PolicyConfig& cfg, const data::Dataset& train_set,
                          const data::Dataset& val_set, const data::Normalization& norm,
                          std::unique_ptr<Network<float>> resume = nullptr);

}  // namespace ebnet::trainer
