#include <cmath>

#include "ebnet/trainer/trainer.hpp"

namespace ebnet::trainer {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (i > 0 && milestones[i] <= milestones[i - 1]) throw ConfigError("milestones must be strictly increasing");
    if (epochs > 0 && milestones[i] >= epochs) throw ConfigError("milestones must be < epochs");
  }
  if (!(decay > 0 && decay < 1)) throw ConfigError("lr decay must lie in (0, 1)");
  if (!(base_lr > 0)) throw ConfigError("base learning rate must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (stage == Stage::II && weight_decay != 0) throw ConfigError("Stage II trains without weight decay");
  if (warmup_epochs < 0) throw ConfigError("warmup epochs must be non-negative");
  if (mixup_alpha < 0) throw ConfigError("mixup alpha must be non-negative");
  if (batch_size < 2) throw ConfigError("batch size must be >= 2 (batch-norm statistics)");
}

TrainConfig TrainConfig::desk(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  c.weight_decay = stage == Stage::I ? 1e-5 : 0.0;
  return c;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || (cfg.epochs > 0 && epoch >= cfg.epochs)) throw RangeError("epoch outside the schedule");
  if (epoch < cfg.warmup_epochs) return cfg.base_lr * double(epoch + 1) / double(cfg.warmup_epochs);
  int passed = 0;
  for (int m : cfg.milestones)
    if (epoch >= m) ++passed;
  return cfg.base_lr * std::pow(cfg.decay, passed);
}

}  // namespace ebnet::trainer
