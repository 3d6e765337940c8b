#include <algorithm>
#include <cmath>
#include <limits>

#include "ebnet/graph/layers.hpp"
#include "ebnet/rng.hpp"

namespace ebnet::graph {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::real_conv: return "real_conv";
    case LayerKind::bconv: return "bconv";
    case LayerKind::ebconv: return "ebconv";
    case LayerKind::bn: return "bn";
    case LayerKind::prelu: return "prelu";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::global_avgpool: return "global_avgpool";
    case LayerKind::linear: return "linear";
    case LayerKind::add: return "add";
    case LayerKind::group_mix: return "group_mix";
    case LayerKind::downsample: return "downsample";
    case LayerKind::conv_unit: return "conv_unit";
    case LayerKind::binary_block: return "binary_block";
    case LayerKind::sequential: return "sequential";
  }
  return "unknown";
}

namespace {

template <typename Scalar>
Param<Scalar> make_param(const std::string& layer, const char* field, Shape4 shape, ParamRole role, Scalar fill = 0) {
  return Param<Scalar>{layer + "." + field, Tensor<Scalar>(shape, fill), role};
}

// Shared by BinaryConv and ExpertBinaryConv so that one expert and a plain
// BConv run bit-identical arithmetic.
template <typename Scalar>
void conv_sample(const Scalar* x, const Shape4& one, const Scalar* w, const ConvGeometry& g, Scalar pad, Mat<Scalar>& col,
                 Scalar* out) {
  im2col(x, one, g, pad, col);
  const ConstMatMap<Scalar> wm(w, g.out_channels, g.reduction_length());
  grouped_gemm(wm, col, g, MatMap<Scalar>(out, g.out_channels, g.out_h(one.h) * g.out_w(one.w)));
}

/// dL/dw for one sample (accumulated into dw) and dL/dx_sample into dx.
template <typename Scalar>
void conv_sample_backward(const Scalar* x, const Shape4& one, const Scalar* w, const ConvGeometry& g, Scalar pad,
                          const Scalar* dout, Mat<Scalar>& dw, Scalar* dx) {
  Mat<Scalar> col, dcol;
  im2col(x, one, g, pad, col);
  const ConstMatMap<Scalar> wm(w, g.out_channels, g.reduction_length());
  const ConstMatMap<Scalar> dm(dout, g.out_channels, col.cols());
  grouped_gemm_backward(wm, col, g, dm, &dw, &dcol);
  col2im_add(dcol, one, g, dx);
}

template <typename Scalar>
void scale_channels(Tensor<Scalar>& y, const Scalar* alpha, Index n) {
  const Shape4& s = y.shape();
  for (Index c = 0; c < s.c; ++c) {
    Scalar* p = y.sample(n) + c * s.plane();
    for (Index i = 0; i < s.plane(); ++i) p[i] = p[i] * alpha[c];
  }
}

template <typename Scalar>
Tensor<Scalar> signed_copy(const Tensor<Scalar>& x) {
  return sign_ste_forward(x);
}

template <typename Scalar>
Vec<Scalar> to_vec(const std::vector<double>& v) {
  Vec<Scalar> out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Index>(i)] = static_cast<Scalar>(v[i]);
  return out;
}

}  // namespace

// ---- Conv2d ----------------------------------------------------------------------

template <typename Scalar>
Conv2d<Scalar>::Conv2d(std::string name, ConvGeometry geom)
    : Layer<Scalar>(name), geom_(geom), weight_(make_param<Scalar>(name, "weight", geom.weight_shape(), ParamRole::real_weight)) {
  geom_.validate();
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  if (mode.training) x_ = x;
  return conv2d_forward(x, weight_.value, geom_, Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> Conv2d<Scalar>::backward(const Tensor<Scalar>& dy) {
  if (x_.empty()) throw ContractError(this->name() + ": backward without a training forward");
  return conv2d_backward(x_, weight_.value, geom_, Scalar(0), dy, &weight_.grad());
}

// ---- BatchNorm ----------------------------------------------------------------

template <typename Scalar>
BatchNorm<Scalar>::BatchNorm(std::string name, Index channels, Scalar eps, Scalar momentum)
    : Layer<Scalar>(name),
      channels_(channels),
      eps_(eps),
      momentum_(momentum),
      gamma_(make_param<Scalar>(name, "gamma", {1, 1, 1, channels}, ParamRole::norm_affine, Scalar(1))),
      beta_(make_param<Scalar>(name, "beta", {1, 1, 1, channels}, ParamRole::norm_affine)),
      running_mean_(make_param<Scalar>(name, "running_mean", {1, 1, 1, channels}, ParamRole::buffer)),
      running_var_(make_param<Scalar>(name, "running_var", {1, 1, 1, channels}, ParamRole::buffer, Scalar(1))) {
  if (!(eps > Scalar(0))) throw ConfigError("batch norm epsilon must be positive");
}

template <typename Scalar>
void BatchNorm<Scalar>::collect_params(std::vector<Param<Scalar>*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

template <typename Scalar>
void BatchNorm<Scalar>::begin_recalibration() {
  recal_batches_ = 0;
}

template <typename Scalar>
void BatchNorm<Scalar>::end_recalibration() {
  recal_batches_ = -1;
}

template <typename Scalar>
std::pair<Vec<Scalar>, Vec<Scalar>> BatchNorm<Scalar>::folded_affine() const {
  if (frozen_) return *frozen_;
  Vec<Scalar> scale(channels_), shift(channels_);
  for (Index c = 0; c < channels_; ++c) {
    scale[c] = gamma_.value[c] / std::sqrt(running_var_.value[c] + eps_);
    shift[c] = beta_.value[c] - running_mean_.value[c] * scale[c];
  }
  return {scale, shift};
}

template <typename Scalar>
void BatchNorm<Scalar>::load_folded(Vec<Scalar> scale, Vec<Scalar> shift) {
  if (scale.size() != channels_ || shift.size() != channels_) throw ShapeError(this->name() + ": folded affine size");
  frozen_ = std::make_pair(std::move(scale), std::move(shift));
}

template <typename Scalar>
Tensor<Scalar> BatchNorm<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  const Shape4& s = x.shape();
  if (s.c != channels_) throw ShapeError(this->name() + ": channel mismatch");
  Tensor<Scalar> y(s);
  const Index plane = s.plane();
  train_cache_ = mode.training && !frozen_;
  if (!train_cache_) {
    const auto [scale, shift] = folded_affine();
    eval_scale_ = scale;
    for (Index n = 0; n < s.n; ++n)
      for (Index c = 0; c < s.c; ++c) {
        const Scalar* src = x.sample(n) + c * plane;
        Scalar* dst = y.sample(n) + c * plane;
        for (Index i = 0; i < plane; ++i) dst[i] = src[i] * scale[c] + shift[c];
      }
    if (mode.training) xhat_ = x;
    return y;
  }
  const Scalar m = Scalar(s.n * plane);
  inv_std_.resize(s.c);
  xhat_ = Tensor<Scalar>(s);
  for (Index c = 0; c < s.c; ++c) {
    Scalar mean = 0;
    for (Index n = 0; n < s.n; ++n) mean += x.sample_matrix(n).row(c).sum();
    mean /= m;
    Scalar var = 0;
    for (Index n = 0; n < s.n; ++n) var += (x.sample_matrix(n).row(c).array() - mean).square().sum();
    var /= m;
    const Scalar inv = Scalar(1) / std::sqrt(var + eps_);
    inv_std_[c] = inv;
    for (Index n = 0; n < s.n; ++n) {
      const Scalar* src = x.sample(n) + c * plane;
      Scalar* xh = xhat_.sample(n) + c * plane;
      Scalar* dst = y.sample(n) + c * plane;
      for (Index i = 0; i < plane; ++i) {
        xh[i] = (src[i] - mean) * inv;
        dst[i] = gamma_.value[c] * xh[i] + beta_.value[c];
      }
    }
    const Scalar unbiased = m > 1 ? var * m / (m - 1) : var;
    if (recal_batches_ >= 0) {
      const Scalar k = Scalar(recal_batches_);
      running_mean_.value[c] = (running_mean_.value[c] * k + mean) / (k + 1);
      running_var_.value[c] = (running_var_.value[c] * k + unbiased) / (k + 1);
    } else {
      running_mean_.value[c] = (1 - momentum_) * running_mean_.value[c] + momentum_ * mean;
      running_var_.value[c] = (1 - momentum_) * running_var_.value[c] + momentum_ * unbiased;
    }
  }
  if (recal_batches_ >= 0) ++recal_batches_;
  return y;
}

template <typename Scalar>
Tensor<Scalar> BatchNorm<Scalar>::backward(const Tensor<Scalar>& dy) {
  const Shape4& s = dy.shape();
  if (xhat_.empty()) throw ContractError(this->name() + ": backward without a training forward");
  const Index plane = s.plane();
  Tensor<Scalar> dx(s);
  auto& dgamma = gamma_.grad();
  auto& dbeta = beta_.grad();
  if (!train_cache_) {
    // Eval-mode statistics are constants; xhat_ holds the raw input here.
    for (Index c = 0; c < s.c; ++c) {
      const Scalar inv = Scalar(1) / std::sqrt(running_var_.value[c] + eps_);
      for (Index n = 0; n < s.n; ++n) {
        const Scalar* g = dy.sample(n) + c * plane;
        const Scalar* xi = xhat_.sample(n) + c * plane;
        Scalar* d = dx.sample(n) + c * plane;
        for (Index i = 0; i < plane; ++i) {
          d[i] = g[i] * eval_scale_[c];
          dgamma[c] += g[i] * (xi[i] - running_mean_.value[c]) * inv;
          dbeta[c] += g[i];
        }
      }
    }
    return dx;
  }
  const Scalar m = Scalar(s.n * plane);
  for (Index c = 0; c < s.c; ++c) {
    Scalar sum_dy = 0, sum_dy_xhat = 0;
    for (Index n = 0; n < s.n; ++n) {
      const Scalar* g = dy.sample(n) + c * plane;
      const Scalar* xh = xhat_.sample(n) + c * plane;
      for (Index i = 0; i < plane; ++i) {
        sum_dy += g[i];
        sum_dy_xhat += g[i] * xh[i];
      }
    }
    dgamma[c] += sum_dy_xhat;
    dbeta[c] += sum_dy;
    const Scalar k = gamma_.value[c] * inv_std_[c] / m;
    for (Index n = 0; n < s.n; ++n) {
      const Scalar* g = dy.sample(n) + c * plane;
      const Scalar* xh = xhat_.sample(n) + c * plane;
      Scalar* d = dx.sample(n) + c * plane;
      for (Index i = 0; i < plane; ++i) d[i] = k * (m * g[i] - sum_dy - xh[i] * sum_dy_xhat);
    }
  }
  return dx;
}

// ---- PReLU / ReLU ----------------------------------------------------------------

template <typename Scalar>
PReLU<Scalar>::PReLU(std::string name, Index channels, Scalar init)
    : Layer<Scalar>(name), slope_(make_param<Scalar>(name, "slope", {1, 1, 1, channels}, ParamRole::slope, init)) {}

template <typename Scalar>
Tensor<Scalar> PReLU<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  const Shape4& s = x.shape();
  if (s.c != slope_.value.size()) throw ShapeError(this->name() + ": channel mismatch");
  if (mode.training) x_ = x;
  Tensor<Scalar> y(s);
  const Index plane = s.plane();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      const Scalar a = slope_.value[c];
      const Scalar* src = x.sample(n) + c * plane;
      Scalar* dst = y.sample(n) + c * plane;
      for (Index i = 0; i < plane; ++i) dst[i] = src[i] > 0 ? src[i] : a * src[i];
    }
  return y;
}

template <typename Scalar>
Tensor<Scalar> PReLU<Scalar>::backward(const Tensor<Scalar>& dy) {
  if (x_.empty()) throw ContractError(this->name() + ": backward without a training forward");
  const Shape4& s = dy.shape();
  Tensor<Scalar> dx(s);
  auto& da = slope_.grad();
  const Index plane = s.plane();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      const Scalar a = slope_.value[c];
      const Scalar* g = dy.sample(n) + c * plane;
      const Scalar* xi = x_.sample(n) + c * plane;
      Scalar* d = dx.sample(n) + c * plane;
      for (Index i = 0; i < plane; ++i) {
        if (xi[i] > 0) {
          d[i] = g[i];
        } else {
          d[i] = a * g[i];
          da[c] += g[i] * xi[i];
        }
      }
    }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  if (mode.training) x_ = x;
  Tensor<Scalar> y(x.shape());
  y.values() = x.values().max(Scalar(0));
  return y;
}

template <typename Scalar>
Tensor<Scalar> ReLU<Scalar>::backward(const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(dy.shape());
  dx.values() = (x_.values() > Scalar(0)).select(dy.values(), Scalar(0));
  return dx;
}

// ---- pooling ------------------------------------------------------------------

template <typename Scalar>
MaxPool<Scalar>::MaxPool(std::string name, Index kernel, Index stride, Index padding)
    : Layer<Scalar>(std::move(name)), kernel_(kernel), stride_(stride), padding_(padding) {}

template <typename Scalar>
Shape4 MaxPool<Scalar>::output_shape(const Shape4& in) const {
  return {in.n, in.c, (in.h + 2 * padding_ - kernel_) / stride_ + 1, (in.w + 2 * padding_ - kernel_) / stride_ + 1};
}

template <typename Scalar>
Tensor<Scalar> MaxPool<Scalar>::forward(const Tensor<Scalar>& x, const RunMode&) {
  const Shape4& s = x.shape();
  in_shape_ = s;
  const Shape4 os = output_shape(s);
  Tensor<Scalar> y(os);
  argmax_.assign(static_cast<std::size_t>(os.count()), -1);
  Index o = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index oy = 0; oy < os.h; ++oy)
        for (Index ox = 0; ox < os.w; ++ox, ++o) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          Index arg = -1;
          for (Index ky = 0; ky < kernel_; ++ky)
            for (Index kx = 0; kx < kernel_; ++kx) {
              const Index iy = oy * stride_ - padding_ + ky;
              const Index ix = ox * stride_ - padding_ + kx;
              if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) continue;
              const Index idx = ((n * s.c + c) * s.h + iy) * s.w + ix;
              if (x[idx] > best) {
                best = x[idx];
                arg = idx;
              }
            }
          y[o] = best;
          argmax_[static_cast<std::size_t>(o)] = arg;
        }
  return y;
}

template <typename Scalar>
Tensor<Scalar> MaxPool<Scalar>::backward(const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(in_shape_);
  for (Index o = 0; o < dy.size(); ++o) dx[argmax_[static_cast<std::size_t>(o)]] += dy[o];
  return dx;
}

template <typename Scalar>
AvgPool<Scalar>::AvgPool(std::string name, Index kernel, Index stride)
    : Layer<Scalar>(std::move(name)), kernel_(kernel), stride_(stride) {}

template <typename Scalar>
Shape4 AvgPool<Scalar>::output_shape(const Shape4& in) const {
  const auto ceil_out = [&](Index len) { return (std::max<Index>(len - kernel_, 0) + stride_ - 1) / stride_ + 1; };
  return {in.n, in.c, ceil_out(in.h), ceil_out(in.w)};
}

template <typename Scalar>
Tensor<Scalar> AvgPool<Scalar>::forward(const Tensor<Scalar>& x, const RunMode&) {
  const Shape4& s = x.shape();
  in_shape_ = s;
  const Shape4 os = output_shape(s);
  Tensor<Scalar> y(os);
  Index o = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index oy = 0; oy < os.h; ++oy)
        for (Index ox = 0; ox < os.w; ++ox, ++o) {
          Scalar acc = 0;
          Index cnt = 0;
          for (Index iy = oy * stride_; iy < std::min(s.h, oy * stride_ + kernel_); ++iy)
            for (Index ix = ox * stride_; ix < std::min(s.w, ox * stride_ + kernel_); ++ix, ++cnt)
              acc += x.at(n, c, iy, ix);
          y[o] = acc / Scalar(cnt);
        }
  return y;
}

template <typename Scalar>
Tensor<Scalar> AvgPool<Scalar>::backward(const Tensor<Scalar>& dy) {
  const Shape4& s = in_shape_;
  const Shape4& os = dy.shape();
  Tensor<Scalar> dx(s);
  Index o = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index oy = 0; oy < os.h; ++oy)
        for (Index ox = 0; ox < os.w; ++ox, ++o) {
          const Index y1 = std::min(s.h, oy * stride_ + kernel_);
          const Index x1 = std::min(s.w, ox * stride_ + kernel_);
          const Scalar g = dy[o] / Scalar((y1 - oy * stride_) * (x1 - ox * stride_));
          for (Index iy = oy * stride_; iy < y1; ++iy)
            for (Index ix = ox * stride_; ix < x1; ++ix) dx.at(n, c, iy, ix) += g;
        }
  return dx;
}

template <typename Scalar>
Tensor<Scalar> GlobalAvgPool<Scalar>::forward(const Tensor<Scalar>& x, const RunMode&) {
  in_shape_ = x.shape();
  Tensor<Scalar> y(output_shape(in_shape_));
  for (Index n = 0; n < in_shape_.n; ++n)
    Eigen::Map<Vec<Scalar>>(y.sample(n), in_shape_.c) =
        x.sample_matrix(n).rowwise().sum() / Scalar(in_shape_.plane());
  return y;
}

template <typename Scalar>
Tensor<Scalar> GlobalAvgPool<Scalar>::backward(const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx(in_shape_);
  const Scalar inv = Scalar(1) / Scalar(in_shape_.plane());
  for (Index n = 0; n < in_shape_.n; ++n)
    for (Index c = 0; c < in_shape_.c; ++c) dx.sample_matrix(n).row(c).setConstant(dy[n * in_shape_.c + c] * inv);
  return dx;
}

// ---- Linear ---------------------------------------------------------------------

template <typename Scalar>
Linear<Scalar>::Linear(std::string name, Index in_features, Index out_features)
    : Layer<Scalar>(name),
      in_(in_features),
      out_(out_features),
      weight_(make_param<Scalar>(name, "weight", {out_features, in_features, 1, 1}, ParamRole::real_weight)),
      bias_(make_param<Scalar>(name, "bias", {1, 1, 1, out_features}, ParamRole::bias)) {}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  const Index n = x.shape().n;
  if (x.shape().sample_size() != in_) throw ShapeError(this->name() + ": feature count mismatch");
  if (mode.training) x_ = x;
  Tensor<Scalar> y({n, out_, 1, 1});
  const ConstMatMap<Scalar> xm(x.data(), n, in_);
  const ConstMatMap<Scalar> wm(weight_.value.data(), out_, in_);
  MatMap<Scalar> ym(y.data(), n, out_);
  ym.noalias() = xm * wm.transpose();
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias_.value.data(), out_);
  return y;
}

template <typename Scalar>
Tensor<Scalar> Linear<Scalar>::backward(const Tensor<Scalar>& dy) {
  if (x_.empty()) throw ContractError(this->name() + ": backward without a training forward");
  const Index n = dy.shape().n;
  const ConstMatMap<Scalar> dym(dy.data(), n, out_);
  const ConstMatMap<Scalar> xm(x_.data(), n, in_);
  const ConstMatMap<Scalar> wm(weight_.value.data(), out_, in_);
  MatMap<Scalar> dw(weight_.grad().data(), out_, in_);
  dw.noalias() += dym.transpose() * xm;
  Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias_.grad().data(), out_) += dym.colwise().sum();
  Tensor<Scalar> dx(x_.shape());
  MatMap<Scalar>(dx.data(), n, in_).noalias() = dym * wm;
  return dx;
}

// ---- BinaryConv -------------------------------------------------------------------

template <typename Scalar>
BinaryConv<Scalar>::BinaryConv(std::string name, ConvGeometry geom)
    : Layer<Scalar>(name),
      geom_(geom),
      weight_(make_param<Scalar>(name, "weight", geom.weight_shape(), ParamRole::latent_binary)),
      alpha_(make_param<Scalar>(name, "alpha", {1, 1, 1, geom.out_channels}, ParamRole::scale, Scalar(1))) {
  geom_.validate();
}

template <typename Scalar>
Tensor<Scalar> BinaryConv<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  const Shape4& s = x.shape();
  if (s.c != geom_.in_channels) throw GeometryError(this->name() + ": input channel mismatch");
  const Vec<Scalar> alpha = Eigen::Map<const Vec<Scalar>>(alpha_.value.data(), geom_.out_channels);
  if (!mode.training && mode.packed_kernels && mode.binary_activations && mode.binary_weights) {
    return bconv2d_packed<Scalar>(binarize_pack(x, PackAxis::channel), weight_binarize_ste(weight_.value), geom_,
                                  alpha);
  }
  mode_ = mode;
  const Scalar pad = mode.binary_activations ? Scalar(-1) : Scalar(0);
  Tensor<Scalar> xs = mode.binary_activations ? signed_copy(x) : x;
  Tensor<Scalar> w = mode.binary_weights ? signed_copy(weight_.value) : weight_.value;
  const Shape4 os = geom_.output_shape(s);
  Tensor<Scalar> conv(os);
  const Shape4 one{1, s.c, s.h, s.w};
  Mat<Scalar> col;
  for (Index n = 0; n < s.n; ++n) conv_sample(xs.sample(n), one, w.data(), geom_, pad, col, conv.sample(n));
  Tensor<Scalar> y = conv;
  for (Index n = 0; n < s.n; ++n) scale_channels(y, alpha.data(), n);
  if (mode.training) {
    x_ = x;
    xs_ = std::move(xs);
    w_eff_ = std::move(w);
    conv_ = std::move(conv);
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> BinaryConv<Scalar>::backward(const Tensor<Scalar>& dy) {
  if (x_.empty()) throw ContractError(this->name() + ": backward without a training forward");
  const Shape4& s = x_.shape();
  const Shape4 one{1, s.c, s.h, s.w};
  const Index plane = dy.shape().plane();
  const Scalar pad = mode_.binary_activations ? Scalar(-1) : Scalar(0);
  auto& dalpha = alpha_.grad();
  Mat<Scalar> dw = Mat<Scalar>::Zero(geom_.out_channels, geom_.reduction_length());
  Tensor<Scalar> dxs(s);
  Tensor<Scalar> dconv(dy.shape());
  for (Index n = 0; n < s.n; ++n) {
    for (Index o = 0; o < geom_.out_channels; ++o) {
      const Scalar* g = dy.sample(n) + o * plane;
      const Scalar* cv = conv_.sample(n) + o * plane;
      Scalar* dc = dconv.sample(n) + o * plane;
      Scalar acc = 0;
      for (Index i = 0; i < plane; ++i) {
        acc += g[i] * cv[i];
        dc[i] = g[i] * alpha_.value[o];
      }
      dalpha[o] += acc;
    }
    conv_sample_backward(xs_.sample(n), one, w_eff_.data(), geom_, pad, dconv.sample(n), dw, dxs.sample(n));
  }
  weight_.grad() += Eigen::Map<const typename Tensor<Scalar>::Array>(dw.data(), dw.size());
  return mode_.binary_activations ? sign_ste_backward(x_, dxs) : dxs;
}

template <typename Scalar>
void BinaryConv<Scalar>::on_binarization_onset() {
  const Index per = geom_.reduction_length();
  for (Index o = 0; o < geom_.out_channels; ++o)
    alpha_.value[o] *= weight_.value.values().segment(o * per, per).abs().mean();
}

// ---- ExpertBinaryConv ---------------------------------------------------------------

template <typename Scalar>
ExpertBinaryConv<Scalar>::ExpertBinaryConv(std::string name, ConvGeometry geom, Index n_experts, Scalar tau)
    : Layer<Scalar>(name),
      geom_(geom),
      n_experts_(n_experts),
      tau_(tau),
      theta_(make_param<Scalar>(name, "theta",
                                {n_experts * geom.out_channels, geom.group_in(), geom.kernel_h, geom.kernel_w},
                                ParamRole::latent_binary)),
      omega_(make_param<Scalar>(name, "omega", {1, 1, geom.in_channels, n_experts}, ParamRole::gating)),
      alpha_(make_param<Scalar>(name, "alpha", {1, 1, n_experts, geom.out_channels}, ParamRole::scale, Scalar(1))),
      counts_(static_cast<std::size_t>(std::max<Index>(n_experts, 0)), 0) {
  geom_.validate();
  if (n_experts < 1) throw ConfigError(this->name() + ": at least one expert required");
  set_tau(tau);
}

template <typename Scalar>
void ExpertBinaryConv<Scalar>::set_tau(Scalar tau) {
  if (!(tau > Scalar(0))) throw ConfigError("gating temperature must be positive");
  tau_ = tau;
}

template <typename Scalar>
Tensor<Scalar> ExpertBinaryConv<Scalar>::expert_weights(Index i) const {
  const Index per = geom_.out_channels * geom_.reduction_length();
  return Tensor<Scalar>(geom_.weight_shape(), theta_.value.values().segment(i * per, per));
}

template <typename Scalar>
Tensor<Scalar> ExpertBinaryConv<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  const Shape4& s = x.shape();
  if (s.c != geom_.in_channels) throw GeometryError(this->name() + ": input channel mismatch");
  const Index out_c = geom_.out_channels;
  const Index per = out_c * geom_.reduction_length();
  const ConstMatMap<Scalar> omega(omega_.value.data(), geom_.in_channels, n_experts_);
  const ConstMatMap<Scalar> alpha(alpha_.value.data(), n_experts_, out_c);
  const Shape4 one{1, s.c, s.h, s.w};
  const Shape4 os = geom_.output_shape(s);
  Tensor<Scalar> y(os);

  gates_.assign(static_cast<std::size_t>(s.n), {});
  z_.assign(static_cast<std::size_t>(s.n), {});
  alpha_eff_.assign(static_cast<std::size_t>(s.n), {});
  for (Index n = 0; n < s.n; ++n) {
    Vec<Scalar> z = aggregate_psi(x.sample(n), one, omega);
    std::vector<double> zd(z.data(), z.data() + z.size());
    gates_[static_cast<std::size_t>(n)] = gate_forward(zd);
    z_[static_cast<std::size_t>(n)] = std::move(z);
    if (mode.record_gates) ++counts_[static_cast<std::size_t>(gates_[static_cast<std::size_t>(n)].selected)];
  }

  if (!mode.training && mode.packed_kernels && mode.binary_activations && mode.binary_weights && !mode.soft_gating) {
    std::vector<std::optional<BitPlaneTensor>> packed(static_cast<std::size_t>(n_experts_));
    for (Index n = 0; n < s.n; ++n) {
      const Index e = gates_[static_cast<std::size_t>(n)].selected;
      auto& pw = packed[static_cast<std::size_t>(e)];
      if (!pw) pw = weight_binarize_ste(expert_weights(e));
      Tensor<Scalar> xn(one);
      std::copy(x.sample(n), x.sample(n) + one.count(), xn.data());
      const Vec<Scalar> a = alpha.row(e).transpose();
      const Tensor<Scalar> yn = bconv2d_packed<Scalar>(binarize_pack(xn, PackAxis::channel), *pw, geom_, a);
      std::copy(yn.data(), yn.data() + yn.size(), y.sample(n));
    }
    return y;
  }

  mode_ = mode;
  const Scalar pad = mode.binary_activations ? Scalar(-1) : Scalar(0);
  Tensor<Scalar> xs = mode.binary_activations ? signed_copy(x) : x;
  Tensor<Scalar> conv(os);
  Mat<Scalar> col;
  if (mode.soft_gating) {
    w_eff_.assign(static_cast<std::size_t>(s.n), {});
    for (Index n = 0; n < s.n; ++n) {
      const Vec<Scalar> sm = softmax<Scalar>(z_[static_cast<std::size_t>(n)], tau_);
      typename Tensor<Scalar>::Array mix = Tensor<Scalar>::Array::Zero(per);
      for (Index i = 0; i < n_experts_; ++i) mix += sm[i] * theta_.value.values().segment(i * per, per);
      Tensor<Scalar> w(geom_.weight_shape(), std::move(mix));
      if (mode.binary_weights) w = signed_copy(w);
      alpha_eff_[static_cast<std::size_t>(n)] = alpha.transpose() * sm;
      conv_sample(xs.sample(n), one, w.data(), geom_, pad, col, conv.sample(n));
      w_eff_[static_cast<std::size_t>(n)] = std::move(w);
    }
  } else {
    w_eff_.assign(static_cast<std::size_t>(n_experts_), {});
    for (Index n = 0; n < s.n; ++n) {
      const Index e = gates_[static_cast<std::size_t>(n)].selected;
      auto& w = w_eff_[static_cast<std::size_t>(e)];
      if (w.empty()) w = mode.binary_weights ? signed_copy(expert_weights(e)) : expert_weights(e);
      alpha_eff_[static_cast<std::size_t>(n)] = alpha.row(e).transpose();
      conv_sample(xs.sample(n), one, w.data(), geom_, pad, col, conv.sample(n));
    }
  }
  y = conv;
  for (Index n = 0; n < s.n; ++n) scale_channels(y, alpha_eff_[static_cast<std::size_t>(n)].data(), n);
  if (mode.training) {
    x_ = x;
    xs_ = std::move(xs);
    conv_ = std::move(conv);
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> ExpertBinaryConv<Scalar>::backward(const Tensor<Scalar>& dy) {
  if (x_.empty()) throw ContractError(this->name() + ": backward without a training forward");
  const Shape4& s = x_.shape();
  const Shape4 one{1, s.c, s.h, s.w};
  const Index out_c = geom_.out_channels;
  const Index red = geom_.reduction_length();
  const Index per = out_c * red;
  const Index plane = dy.shape().plane();
  const Scalar pad = mode_.binary_activations ? Scalar(-1) : Scalar(0);
  const ConstMatMap<Scalar> omega(omega_.value.data(), geom_.in_channels, n_experts_);
  const ConstMatMap<Scalar> alpha(alpha_.value.data(), n_experts_, out_c);
  MatMap<Scalar> dtheta(theta_.grad().data(), n_experts_, per);
  MatMap<Scalar> domega(omega_.grad().data(), geom_.in_channels, n_experts_);
  MatMap<Scalar> dalpha(alpha_.grad().data(), n_experts_, out_c);
  const ConstMatMap<Scalar> theta(theta_.value.data(), n_experts_, per);

  Tensor<Scalar> dxs(s);
  Tensor<Scalar> dx_psi(s);
  Mat<Scalar> dw(out_c, red);
  Vec<Scalar> dconv(out_c * plane);
  for (Index n = 0; n < s.n; ++n) {
    const auto nn = static_cast<std::size_t>(n);
    const Vec<Scalar>& a = alpha_eff_[nn];
    Vec<Scalar> da(out_c);
    for (Index o = 0; o < out_c; ++o) {
      const Scalar* g = dy.sample(n) + o * plane;
      const Scalar* cv = conv_.sample(n) + o * plane;
      Scalar acc = 0;
      for (Index i = 0; i < plane; ++i) {
        acc += g[i] * cv[i];
        dconv[o * plane + i] = g[i] * a[o];
      }
      da[o] = acc;
    }
    const Tensor<Scalar>& w = mode_.soft_gating ? w_eff_[nn] : w_eff_[static_cast<std::size_t>(gates_[nn].selected)];
    dw.setZero();
    conv_sample_backward(xs_.sample(n), one, w.data(), geom_, pad, dconv.data(), dw, dxs.sample(n));

    const Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> dw_row(dw.data(), per);
    const Vec<Scalar> sm = softmax<Scalar>(z_[nn], tau_);
    // Every expert receives the composed-weight gradient scaled by its
    // softmax probability.
    for (Index i = 0; i < n_experts_; ++i) dtheta.row(i) += sm[i] * dw_row;
    if (mode_.soft_gating) {
      dalpha += sm * da.transpose();
    } else {
      dalpha.row(gates_[nn].selected) += da.transpose();
    }
    const Vec<Scalar> dphi = theta * dw_row.transpose() + alpha * da;
    const Vec<Scalar> dz = gate_backward<Scalar>(z_[nn], dphi, tau_);
    const ConstMatMap<Scalar> planes(x_.sample(n), s.c, s.plane());
    const Vec<Scalar> means = planes.rowwise().sum() / Scalar(s.plane());
    domega.noalias() += means * dz.transpose();
    const Vec<Scalar> dmeans = omega * dz / Scalar(s.plane());
    for (Index c = 0; c < s.c; ++c) dx_psi.sample_matrix(n).row(c).setConstant(dmeans[c]);
  }
  Tensor<Scalar> dx = mode_.binary_activations ? sign_ste_backward(x_, dxs) : dxs;
  dx.values() += dx_psi.values();
  return dx;
}

template <typename Scalar>
void ExpertBinaryConv<Scalar>::replicate_experts(std::uint64_t seed) {
  const Index per = geom_.out_channels * geom_.reduction_length();
  auto& th = theta_.value.values();
  for (Index i = 1; i < n_experts_; ++i) th.segment(i * per, per) = th.segment(0, per);
  MatMap<Scalar> alpha(alpha_.value.data(), n_experts_, geom_.out_channels);
  for (Index i = 1; i < n_experts_; ++i) alpha.row(i) = alpha.row(0);
  Rng rng(derive_seed(seed, fnv1a(omega_.name)));
  const double bound = 1.0 / std::sqrt(static_cast<double>(geom_.in_channels));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < omega_.value.size(); ++i) omega_.value[i] = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
void ExpertBinaryConv<Scalar>::on_binarization_onset() {
  const Index red = geom_.reduction_length();
  const Index out_c = geom_.out_channels;
  for (Index i = 0; i < n_experts_; ++i)
    for (Index o = 0; o < out_c; ++o)
      alpha_.value[i * out_c + o] *= theta_.value.values().segment((i * out_c + o) * red, red).abs().mean();
}

// ---- composites ---------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> Sequential<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  if (layers_.empty()) return x;
  Tensor<Scalar> h = layers_.front()->forward(x, mode);
  for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i]->forward(h, mode);
  return h;
}

template <typename Scalar>
Tensor<Scalar> Sequential<Scalar>::backward(const Tensor<Scalar>& dy) {
  if (layers_.empty()) return dy;
  Tensor<Scalar> g = layers_.back()->backward(dy);
  for (std::size_t i = layers_.size() - 1; i-- > 0;) g = layers_[i]->backward(g);
  return g;
}

template <typename Scalar>
Shape4 Sequential<Scalar>::output_shape(const Shape4& in) const {
  Shape4 s = in;
  for (const auto& l : layers_) s = l->output_shape(s);
  return s;
}

template <typename Scalar>
DownsampleBlock<Scalar>::DownsampleBlock(std::string name, Index in_channels, Index out_channels, Index stride,
                                         Index ratio, DownsampleVariant variant)
    : Layer<Scalar>(name), body_(name) {
  if (ratio < 1 || in_channels % ratio != 0)
    throw ConfigError(name + ": input channels " + std::to_string(in_channels) + " not divisible by reduction ratio " +
                      std::to_string(ratio));
  if (stride == 2) body_.add(std::make_unique<AvgPool<Scalar>>(name + ".pool", 2, 2));
  else if (stride != 1) throw ConfigError(name + ": stride must be 1 or 2");
  const auto conv1x1 = [&](const std::string& n, Index ci, Index co) {
    return std::make_unique<Conv2d<Scalar>>(n, ConvGeometry{ci, co, 1, 1, 1, 0, 1});
  };
  if (variant == DownsampleVariant::vanilla) {
    body_.add(conv1x1(name + ".conv", in_channels, out_channels));
    body_.add(std::make_unique<BatchNorm<Scalar>>(name + ".bn", out_channels));
    return;
  }
  const Index mid = in_channels / ratio;
  body_.add(conv1x1(name + ".conv_a", in_channels, mid));
  body_.add(std::make_unique<BatchNorm<Scalar>>(name + ".bn_a", mid));
  if (variant == DownsampleVariant::prelu) body_.add(std::make_unique<PReLU<Scalar>>(name + ".act", mid));
  if (variant == DownsampleVariant::relu) body_.add(std::make_unique<ReLU<Scalar>>(name + ".act"));
  body_.add(conv1x1(name + ".conv_b", mid, out_channels));
  body_.add(std::make_unique<BatchNorm<Scalar>>(name + ".bn_b", out_channels));
}

template <typename Scalar>
ConvUnit<Scalar>::ConvUnit(std::string name, Index in_channels, LayerPtr<Scalar> conv, Index out_channels,
                           LayerPtr<Scalar> skip, LayerKind kind)
    : Layer<Scalar>(name),
      kind_(kind),
      bn_(name + ".bn", in_channels),
      conv_(std::move(conv)),
      prelu_(name + ".prelu", out_channels),
      skip_(std::move(skip)) {}

template <typename Scalar>
void ConvUnit<Scalar>::collect_children(std::vector<Layer<Scalar>*>& out) {
  out.push_back(&bn_);
  out.push_back(conv_.get());
  out.push_back(&prelu_);
  if (skip_) out.push_back(skip_.get());
}

template <typename Scalar>
Tensor<Scalar> ConvUnit<Scalar>::forward(const Tensor<Scalar>& x, const RunMode& mode) {
  Tensor<Scalar> y = prelu_.forward(conv_->forward(bn_.forward(x, mode), mode), mode);
  if (skip_) {
    y.values() += skip_->forward(x, mode).values();
  } else {
    if (!(y.shape() == x.shape())) throw ShapeError(this->name() + ": identity skip needs matching shapes");
    y.values() += x.values();
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> ConvUnit<Scalar>::backward(const Tensor<Scalar>& dy) {
  Tensor<Scalar> dx = bn_.backward(conv_->backward(prelu_.backward(dy)));
  if (skip_) dx.values() += skip_->backward(dy).values();
  else dx.values() += dy.values();
  return dx;
}

template <typename Scalar>
std::unique_ptr<Sequential<Scalar>> make_binary_block(const std::string& name, Index in_channels, Index out_channels,
                                                      Index stride, Index groups, Index n_experts, Scalar tau,
                                                      Index downsample_ratio, DownsampleVariant variant) {
  auto block = std::make_unique<Sequential<Scalar>>(name, LayerKind::binary_block);
  Index ci = in_channels;
  for (int u = 0; u < 2; ++u) {
    const std::string uname = name + ".conv" + std::to_string(u);
    const Index s = u == 0 ? stride : 1;
    const ConvGeometry g{ci, out_channels, 3, 3, s, 1, groups};
    auto conv = std::make_unique<ExpertBinaryConv<Scalar>>(uname + ".ebconv", g, n_experts, tau);
    LayerPtr<Scalar> skip;
    if (s != 1 || ci != out_channels)
      skip = std::make_unique<DownsampleBlock<Scalar>>(uname + ".skip", ci, out_channels, s, downsample_ratio,
                                                       downsample_ratio > 1 ? variant : DownsampleVariant::vanilla);
    block->add(std::make_unique<ConvUnit<Scalar>>(uname, ci, std::move(conv), out_channels, std::move(skip)));
    ci = out_channels;
  }
  return block;
}

template <typename Scalar>
std::unique_ptr<ConvUnit<Scalar>> make_group_mix(const std::string& name, Index channels) {
  auto conv = std::make_unique<BinaryConv<Scalar>>(name + ".bconv", ConvGeometry{channels, channels, 1, 1, 1, 0, 1});
  return std::make_unique<ConvUnit<Scalar>>(name, channels, std::move(conv), channels, nullptr, LayerKind::group_mix);
}

template <typename Scalar>
void initialize(Layer<Scalar>& root, std::uint64_t seed) {
  for (Param<Scalar>* p : parameters(root)) {
    Rng rng(derive_seed(seed, fnv1a(p->name)));
    auto& v = p->value.values();
    const Shape4& s = p->value.shape();
    switch (p->role) {
      case ParamRole::real_weight:
      case ParamRole::latent_binary: {
        const double fan_in = static_cast<double>(s.c * s.h * s.w);
        const double bound = std::sqrt(6.0 / fan_in);
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng));
        if (p->role == ParamRole::latent_binary) v = v.max(Scalar(-1)).min(Scalar(1));
        break;
      }
      case ParamRole::gating: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.h));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(dist(rng));
        break;
      }
      default:
        break;  // scales, norms, slopes, biases and buffers keep their constructor values
    }
  }
}

#define EBNET_INSTANTIATE_LAYERS(S)                                                                               \
  template class Conv2d<S>;                                                                                       \
  template class BatchNorm<S>;                                                                                    \
  template class PReLU<S>;                                                                                        \
  template class ReLU<S>;                                                                                         \
  template class MaxPool<S>;                                                                                      \
  template class AvgPool<S>;                                                                                      \
  template class GlobalAvgPool<S>;                                                                                \
  template class Linear<S>;                                                                                       \
  template class BinaryConv<S>;                                                                                   \
  template class ExpertBinaryConv<S>;                                                                             \
  template class Sequential<S>;                                                                                   \
  template class DownsampleBlock<S>;                                                                              \
  template class ConvUnit<S>;                                                                                     \
  template std::unique_ptr<Sequential<S>> make_binary_block<S>(const std::string&, Index, Index, Index, Index,    \
                                                               Index, S, Index, DownsampleVariant);               \
  template std::unique_ptr<ConvUnit<S>> make_group_mix<S>(const std::string&, Index);                            \
  template void initialize<S>(Layer<S>&, std::uint64_t);

EBNET_INSTANTIATE_LAYERS(float)
EBNET_INSTANTIATE_LAYERS(double)

}  // namespace ebnet::graph
