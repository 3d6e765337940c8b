#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ebnet/bitcore.hpp"
#include "ebnet/graph/ops.hpp"

namespace ebnet::graph {

enum class LayerKind {
  real_conv,
  bconv,
  ebconv,
  bn,
  prelu,
  relu,
  maxpool,
  avgpool,
  global_avgpool,
  linear,
  add,
  group_mix,
  downsample,
  conv_unit,
  binary_block,
  sequential,
};

std::string_view to_string(LayerKind kind);

/// How a forward pass treats binarization, gating and normalization.
struct RunMode {
  bool training = false;
  bool binary_activations = true;
  bool binary_weights = false;
  // Softmax mixing of experts instead of winner-take-all. Only for
  // finite-difference testing.
  bool soft_gating = false;
  // Eval-only: route fully binary convolutions through the packed kernel.
  bool packed_kernels = false;
  bool record_gates = false;

  static RunMode stage1(bool training) { return {training, true, false, false, false, false}; }
  static RunMode stage2(bool training) { return {training, true, true, false, false, false}; }
  /// Sign replaced by identity, WTA replaced by softmax mixing.
  static RunMode surrogate() { return {true, false, false, true, false, false}; }
};

enum class ParamRole { real_weight, latent_binary, scale, norm_affine, slope, gating, bias, buffer };

template <typename Scalar>
struct Param {
  std::string name;
  Tensor<Scalar> value;
  ParamRole role = ParamRole::real_weight;

  bool trainable() const { return role != ParamRole::buffer; }
  bool decayed() const {
    return role == ParamRole::real_weight || role == ParamRole::latent_binary || role == ParamRole::gating;
  }
  typename Tensor<Scalar>::Array& grad() { return value.grad(); }
};

template <typename Scalar>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  virtual LayerKind kind() const = 0;
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) = 0;
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& dy) = 0;
  virtual Shape4 output_shape(const Shape4& in) const = 0;
  virtual void collect_params(std::vector<Param<Scalar>*>&) {}
  virtual void collect_children(std::vector<Layer*>&) {}

  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

template <typename Scalar>
using LayerPtr = std::unique_ptr<Layer<Scalar>>;

/// Pre-order traversal over a layer tree.
template <typename Scalar>
void walk(Layer<Scalar>& root, const std::function<void(Layer<Scalar>&)>& fn) {
  fn(root);
  std::vector<Layer<Scalar>*> kids;
  root.collect_children(kids);
  for (auto* k : kids) walk(*k, fn);
}

template <typename Scalar>
std::vector<Param<Scalar>*> parameters(Layer<Scalar>& root) {
  std::vector<Param<Scalar>*> out;
  walk<Scalar>(root, [&](Layer<Scalar>& l) { l.collect_params(out); });
  return out;
}

// ---- real-valued plumbing --------------------------------------------------

template <typename Scalar>
class Conv2d : public Layer<Scalar> {
 public:
  Conv2d(std::string name, ConvGeometry geom);
  LayerKind kind() const override { return LayerKind::real_conv; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return geom_.output_shape(in); }
  void collect_params(std::vector<Param<Scalar>*>& out) override { out.push_back(&weight_); }

  const ConvGeometry& geometry() const { return geom_; }
  Param<Scalar>& weight() { return weight_; }

 private:
  ConvGeometry geom_;
  Param<Scalar> weight_;
  Tensor<Scalar> x_;
};

template <typename Scalar>
class BatchNorm : public Layer<Scalar> {
 public:
  BatchNorm(std::string name, Index channels, Scalar eps = Scalar(1e-5), Scalar momentum = Scalar(0.1));
  LayerKind kind() const override { return LayerKind::bn; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return in; }
  void collect_params(std::vector<Param<Scalar>*>& out) override;

  /// Running statistics become the plain average of every batch seen until
  /// end_recalibration().
  void begin_recalibration();
  void end_recalibration();

  /// Eval-mode affine: y = x * scale + shift.
  std::pair<Vec<Scalar>, Vec<Scalar>> folded_affine() const;
  /// Freeze to a precomputed affine (packed inference models).
  void load_folded(Vec<Scalar> scale, Vec<Scalar> shift);
  bool folded() const { return frozen_.has_value(); }

  Index channels() const { return channels_; }
  Param<Scalar>& gamma() { return gamma_; }
  Param<Scalar>& beta() { return beta_; }
  Param<Scalar>& running_mean() { return running_mean_; }
  Param<Scalar>& running_var() { return running_var_; }

 private:
  Index channels_;
  Scalar eps_;
  Scalar momentum_;
  Param<Scalar> gamma_, beta_, running_mean_, running_var_;
  std::optional<std::pair<Vec<Scalar>, Vec<Scalar>>> frozen_;
  Index recal_batches_ = -1;
  bool train_cache_ = false;
  Tensor<Scalar> xhat_;
  Vec<Scalar> inv_std_;
  Vec<Scalar> eval_scale_;
};

template <typename Scalar>
class PReLU : public Layer<Scalar> {
 public:
  PReLU(std::string name, Index channels, Scalar init = Scalar(0.25));
  LayerKind kind() const override { return LayerKind::prelu; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return in; }
  void collect_params(std::vector<Param<Scalar>*>& out) override { out.push_back(&slope_); }
  Param<Scalar>& slope() { return slope_; }

 private:
  Param<Scalar> slope_;
  Tensor<Scalar> x_;
};

template <typename Scalar>
class ReLU : public Layer<Scalar> {
 public:
  using Layer<Scalar>::Layer;
  LayerKind kind() const override { return LayerKind::relu; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return in; }

 private:
  Tensor<Scalar> x_;
};

template <typename Scalar>
class MaxPool : public Layer<Scalar> {
 public:
  MaxPool(std::string name, Index kernel, Index stride, Index padding);
  LayerKind kind() const override { return LayerKind::maxpool; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override;

 private:
  Index kernel_, stride_, padding_;
  Shape4 in_shape_{};
  std::vector<Index> argmax_;
};

/// Average pooling with ceil-mode output size; each window averages only
/// the taps that fall inside the input.
template <typename Scalar>
class AvgPool : public Layer<Scalar> {
 public:
  AvgPool(std::string name, Index kernel, Index stride);
  LayerKind kind() const override { return LayerKind::avgpool; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override;

 private:
  Index kernel_, stride_;
  Shape4 in_shape_{};
};

template <typename Scalar>
class GlobalAvgPool : public Layer<Scalar> {
 public:
  using Layer<Scalar>::Layer;
  LayerKind kind() const override { return LayerKind::global_avgpool; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return {in.n, in.c, 1, 1}; }

 private:
  Shape4 in_shape_{};
};

template <typename Scalar>
class Linear : public Layer<Scalar> {
 public:
  Linear(std::string name, Index in_features, Index out_features);
  LayerKind kind() const override { return LayerKind::linear; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return {in.n, out_, 1, 1}; }
  void collect_params(std::vector<Param<Scalar>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  Param<Scalar>& weight() { return weight_; }
  Param<Scalar>& bias() { return bias_; }

 private:
  Index in_, out_;
  Param<Scalar> weight_, bias_;
  Tensor<Scalar> x_;
};

// ---- binary convolutions ----------------------------------------------------

/// BConv: sign(x) convolved with sign(theta) (or the real latent theta in
/// Stage I), scaled per output channel by a learned alpha.
template <typename Scalar>
class BinaryConv : public Layer<Scalar> {
 public:
  BinaryConv(std::string name, ConvGeometry geom);
  LayerKind kind() const override { return LayerKind::bconv; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return geom_.output_shape(in); }
  void collect_params(std::vector<Param<Scalar>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&alpha_);
  }

  const ConvGeometry& geometry() const { return geom_; }
  Param<Scalar>& weight() { return weight_; }
  Param<Scalar>& alpha() { return alpha_; }
  /// alpha[o] *= mean |theta[o]|, applied once when weights turn binary.
  void on_binarization_onset();

 private:
  ConvGeometry geom_;
  Param<Scalar> weight_, alpha_;
  RunMode mode_{};
  Tensor<Scalar> x_, xs_, w_eff_, conv_;
};

/// Expert Binary Convolution: N expert banks, one selected per sample by
/// WTA over psi(x) = spatial means projected by omega. The backward pass
/// approximates the gate with Softmax(z / tau).
template <typename Scalar>
class ExpertBinaryConv : public Layer<Scalar> {
 public:
  ExpertBinaryConv(std::string name, ConvGeometry geom, Index n_experts, Scalar tau = Scalar(1));
  LayerKind kind() const override { return LayerKind::ebconv; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return geom_.output_shape(in); }
  void collect_params(std::vector<Param<Scalar>*>& out) override {
    out.push_back(&theta_);
    out.push_back(&omega_);
    out.push_back(&alpha_);
  }

  const ConvGeometry& geometry() const { return geom_; }
  Index n_experts() const { return n_experts_; }
  Scalar tau() const { return tau_; }
  void set_tau(Scalar tau);

  /// (N * out, in/G, kh, kw): expert i occupies rows [i*out, (i+1)*out).
  Param<Scalar>& theta() { return theta_; }
  /// (1, 1, in, N)
  Param<Scalar>& omega() { return omega_; }
  /// (1, 1, N, out)
  Param<Scalar>& alpha() { return alpha_; }

  /// Copies expert 0 (weights and alpha) into every slot and draws a fresh
  /// omega ~ U(-1/sqrt(C), 1/sqrt(C)).
  void replicate_experts(std::uint64_t seed);
  void on_binarization_onset();

  const std::vector<GateState>& last_gates() const { return gates_; }
  const std::vector<std::int64_t>& selection_counts() const { return counts_; }
  void reset_selection_counts() { std::fill(counts_.begin(), counts_.end(), 0); }

 private:
  Tensor<Scalar> expert_weights(Index i) const;

  ConvGeometry geom_;
  Index n_experts_;
  Scalar tau_;
  Param<Scalar> theta_, omega_, alpha_;
  std::vector<std::int64_t> counts_;

  RunMode mode_{};
  Tensor<Scalar> x_, xs_, conv_;
  std::vector<GateState> gates_;
  std::vector<Vec<Scalar>> z_;
  std::vector<Tensor<Scalar>> w_eff_;     // per expert (WTA) or per sample (soft)
  std::vector<Vec<Scalar>> alpha_eff_;    // per sample
};

// ---- composites ------------------------------------------------------------------

template <typename Scalar>
class Sequential : public Layer<Scalar> {
 public:
  Sequential(std::string name, LayerKind kind = LayerKind::sequential) : Layer<Scalar>(std::move(name)), kind_(kind) {}
  LayerKind kind() const override { return kind_; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override;
  void collect_children(std::vector<Layer<Scalar>*>& out) override {
    for (auto& l : layers_) out.push_back(l.get());
  }

  template <typename L>
  L& add(std::unique_ptr<L> layer) {
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  std::size_t size() const { return layers_.size(); }
  Layer<Scalar>& at(std::size_t i) { return *layers_[i]; }

 private:
  LayerKind kind_;
  std::vector<LayerPtr<Scalar>> layers_;
};

enum class DownsampleVariant { vanilla, linear, relu, prelu };

/// Real-valued skip path used wherever the channel count or resolution
/// changes: optional 2x2 average pooling, then either a single 1x1 conv + BN
/// or the decomposition Conv1x1(C_in -> C_in/r) -> BN -> act ->
/// Conv1x1(C_in/r -> C_out) -> BN.
template <typename Scalar>
class DownsampleBlock : public Layer<Scalar> {
 public:
  DownsampleBlock(std::string name, Index in_channels, Index out_channels, Index stride, Index ratio,
                  DownsampleVariant variant);
  LayerKind kind() const override { return LayerKind::downsample; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override { return body_.forward(x, mode); }
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override { return body_.backward(dy); }
  Shape4 output_shape(const Shape4& in) const override { return body_.output_shape(in); }
  void collect_children(std::vector<Layer<Scalar>*>& out) override { out.push_back(&body_); }

 private:
  Sequential<Scalar> body_;
};

/// One double-skip binary unit: x + PReLU(conv(BN(x))), where conv binarizes
/// its own input. The skip is the identity unless a projection is supplied.
template <typename Scalar>
class ConvUnit : public Layer<Scalar> {
 public:
  ConvUnit(std::string name, Index in_channels, LayerPtr<Scalar> conv, Index out_channels, LayerPtr<Scalar> skip,
           LayerKind kind = LayerKind::conv_unit);
  LayerKind kind() const override { return kind_; }
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const RunMode& mode) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& dy) override;
  Shape4 output_shape(const Shape4& in) const override { return conv_->output_shape(in); }
  void collect_children(std::vector<Layer<Scalar>*>& out) override;

  BatchNorm<Scalar>& bn() { return bn_; }
  Layer<Scalar>& conv() { return *conv_; }
  PReLU<Scalar>& prelu() { return prelu_; }
  Layer<Scalar>* skip() { return skip_.get(); }

 private:
  LayerKind kind_;
  BatchNorm<Scalar> bn_;
  LayerPtr<Scalar> conv_;
  PReLU<Scalar> prelu_;
  LayerPtr<Scalar> skip_;
};

/// Two chained units; the first may downsample and change width.
template <typename Scalar>
std::unique_ptr<Sequential<Scalar>> make_binary_block(const std::string& name, Index in_channels, Index out_channels,
                                                      Index stride, Index groups, Index n_experts, Scalar tau,
                                                      Index downsample_ratio, DownsampleVariant variant);

/// Ungrouped binary 1x1 unit that mixes information across groups.
template <typename Scalar>
std::unique_ptr<ConvUnit<Scalar>> make_group_mix(const std::string& name, Index channels);

/// Deterministic initialization of every parameter under `root`.
template <typename Scalar>
void initialize(Layer<Scalar>& root, std::uint64_t seed);

}  // namespace ebnet::graph
