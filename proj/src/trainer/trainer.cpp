#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "ebnet/graph/mixup.hpp"
#include "ebnet/trainer/trainer.hpp"

namespace ebnet::trainer {

namespace {

Index capped(Index n, Index cap) { return cap > 0 ? std::min(n, cap) : n; }

template <typename Fn>
void for_each_batch(Index n, Index batch, Fn&& fn) {
  std::vector<Index> idx;
  for (Index start = 0; start < n; start += batch) {
    idx.resize(static_cast<std::size_t>(std::min(batch, n - start)));
    std::iota(idx.begin(), idx.end(), start);
    fn(std::span<const Index>(idx));
  }
}

}  // namespace

graph::RunMode eval_mode(const EvalOptions& opt) {
  graph::RunMode m = opt.binary_weights ? graph::RunMode::stage2(false) : graph::RunMode::stage1(false);
  m.packed_kernels = opt.packed && opt.binary_weights;
  return m;
}

std::pair<Index, Index> topk_hits(const Tensor<float>& logits, std::span<const int> labels) {
  const Index n = logits.shape().n;
  const Index k = logits.shape().sample_size();
  Index top1 = 0, top5 = 0;
  for (Index i = 0; i < n; ++i) {
    const float* row = logits.sample(i);
    const int y = labels[static_cast<std::size_t>(i)];
    // rank = number of classes strictly better, ties resolved toward lower index
    Index rank = 0;
    for (Index j = 0; j < k; ++j)
      if (row[j] > row[y] || (row[j] == row[y] && j < y)) ++rank;
    top1 += rank == 0;
    top5 += rank < 5;
  }
  return {top1, top5};
}

Accuracy evaluate(Network<float>& net, const data::Dataset& ds, const data::Normalization& norm,
                  const EvalOptions& opt) {
  const Index n = capped(ds.size(), opt.max_samples);
  if (n == 0) throw ConfigError("cannot evaluate on an empty split");
  if (ds.classes > net.spec().classes) throw ConfigError("dataset has more classes than the model");
  const graph::RunMode mode = eval_mode(opt);
  Index top1 = 0, top5 = 0;
  for_each_batch(n, opt.batch_size, [&](std::span<const Index> idx) {
    const Tensor<float> x = data::make_batch(ds, idx, norm, false, nullptr);
    const auto labels = data::batch_labels(ds, idx);
    const auto [a, b] = topk_hits(net.forward(x, mode), labels);
    top1 += a;
    top5 += b;
  });
  return {100.0 * double(top1) / double(n), 100.0 * double(top5) / double(n), n};
}

std::vector<std::vector<double>> expert_utilization(Network<float>& net, const data::Dataset& ds,
                                                    const data::Normalization& norm, const EvalOptions& opt) {
  const Index n = capped(ds.size(), opt.max_samples);
  if (n == 0) throw ConfigError("cannot measure utilization on an empty split");
  auto convs = net.expert_convs();
  for (auto* c : convs) c->reset_selection_counts();
  graph::RunMode mode = eval_mode(opt);
  mode.record_gates = true;
  for_each_batch(n, opt.batch_size, [&](std::span<const Index> idx) {
    net.forward(data::make_batch(ds, idx, norm, false, nullptr), mode);
  });
  std::vector<std::vector<double>> out;
  for (auto* c : convs) {
    const auto& counts = c->selection_counts();
    const double total = double(std::accumulate(counts.begin(), counts.end(), std::int64_t(0)));
    std::vector<double> row;
    for (auto v : counts) row.push_back(double(v) / total);
    out.push_back(std::move(row));
  }
  return out;
}

void write_metrics_header(std::ostream& os) {
  os << "# ebnet metrics v1\n" << "epoch,lr,train_loss,val_top1,val_top5\n";
}

void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  os << m.epoch << ',' << std::setprecision(9) << m.lr << ',' << m.train_loss << ',' << m.val_top1 << ','
     << m.val_top5 << '\n'
     << std::flush;
}

RunMetrics train(Network<float>& net, const data::Dataset& train_set, const data::Dataset& val_set,
                 const data::Normalization& norm, const TrainConfig& cfg, Adam& opt, std::ostream* metrics,
                 const EpochCallback& on_epoch) {
  cfg.validate();
  const bool stage2 = cfg.stage == Stage::II;
  opt.require_zero_decay(stage2);
  const graph::RunMode mode = stage2 ? graph::RunMode::stage2(true) : graph::RunMode::stage1(true);
  EvalOptions eval_opt;
  eval_opt.max_samples = cfg.max_val_samples;
  eval_opt.binary_weights = stage2;
  const Index n = capped(train_set.size(), cfg.max_train_samples);
  if (n < 2) throw ConfigError("training split needs at least two samples");
  auto params = net.parameters();
  graph::SoftmaxXent<float> loss;

  RunMetrics run;
  if (metrics) write_metrics_header(*metrics);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    const std::vector<Index> order = data::epoch_order(n, cfg.seed, std::uint64_t(epoch));
    Rng rng(derive_seed(cfg.seed, 0xA116ULL, std::uint64_t(epoch)));
    double loss_sum = 0;
    Index seen = 0;
    for (Index start = 0; start + 1 < n; start += cfg.batch_size) {
      const Index len = std::min<Index>(cfg.batch_size, n - start);
      if (len < 2) break;  // batch-norm needs two samples
      const std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(len));
      Tensor<float> x = data::make_batch(train_set, idx, norm, true, &rng);
      std::vector<int> labels = data::batch_labels(train_set, idx);
      float value;
      if (cfg.mixup_alpha > 0) {
        auto mixed = graph::mixup_apply(x, labels, cfg.mixup_alpha, rng);
        const Tensor<float> logits = net.forward(mixed.images, mode);
        value = loss.forward(logits, mixed.label_a, mixed.label_b, mixed.lambda);
      } else {
        const Tensor<float> logits = net.forward(x, mode);
        value = loss.forward(logits, labels);
      }
      if (!std::isfinite(value)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      net.zero_grad();
      net.backward(loss.backward());
      opt.step(params, lr, cfg.weight_decay);
      loss_sum += double(value) * double(len);
      seen += len;
    }
    const Accuracy val = evaluate(net, val_set, norm, eval_opt);
    EpochMetrics m{epoch + 1, lr, loss_sum / double(std::max<Index>(seen, 1)), val.top1, val.top5};
    run.epochs.push_back(m);
    if (metrics) write_metrics_row(*metrics, m);
    if (on_epoch) on_epoch(m);
  }
  if (!net.expert_convs().empty()) run.utilization = expert_utilization(net, val_set, norm, eval_opt);
  return run;
}

void recalibrate_bn(Network<float>& net, const data::Dataset& ds, const data::Normalization& norm, Index batch_size,
                    Index max_batches, std::uint64_t seed) {
  auto bns = net.batch_norms();
  for (auto* bn : bns) bn->begin_recalibration();
  const std::vector<Index> order = data::epoch_order(ds.size(), seed, 0xBA7C4ULL);
  Rng rng(derive_seed(seed, 0xBA7C4ULL));
  const graph::RunMode mode = graph::RunMode::stage1(true);
  Index batches = 0;
  for (Index start = 0; start + 1 < ds.size() && (max_batches <= 0 || batches < max_batches);
       start += batch_size, ++batches) {
    const Index len = std::min<Index>(batch_size, ds.size() - start);
    if (len < 2) break;
    const std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(len));
    net.forward(data::make_batch(ds, idx, norm, true, &rng), mode);
  }
  for (auto* bn : bns) bn->end_recalibration();
}

}  // namespace ebnet::trainer
