#include <cmath>

#include "ebnet/graph/ops.hpp"

namespace ebnet::graph {

template <typename Scalar>
Tensor<Scalar> sign_ste_forward(const Tensor<Scalar>& x) {
  Tensor<Scalar> y(x.shape());
  y.values() = x.values().unaryExpr([](Scalar v) { return sign_plus(v); });
  return y;
}

template <typename Scalar>
Tensor<Scalar> sign_ste_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy) {
  if (!(x.shape() == dy.shape())) throw ShapeError("sign_ste_backward: shape mismatch");
  Tensor<Scalar> dx(x.shape());
  dx.values() = (x.values().abs() <= Scalar(1)).select(dy.values(), Scalar(0));
  return dx;
}

template <typename Scalar>
BitPlaneTensor weight_binarize_ste(const Tensor<Scalar>& theta) {
  return binarize_pack(theta, PackAxis::sample);
}

template <typename Scalar>
void im2col(const Scalar* x, const Shape4& xs, const ConvGeometry& g, Scalar pad_value, Mat<Scalar>& col) {
  const Index oh = g.out_h(xs.h);
  const Index ow = g.out_w(xs.w);
  col.resize(xs.c * g.kernel_h * g.kernel_w, oh * ow);
  Index row = 0;
  for (Index c = 0; c < xs.c; ++c) {
    const Scalar* plane = x + c * xs.h * xs.w;
    for (Index ky = 0; ky < g.kernel_h; ++ky)
      for (Index kx = 0; kx < g.kernel_w; ++kx, ++row) {
        Scalar* dst = col.row(row).data();
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * g.stride - g.padding + ky;
          const bool row_in = iy >= 0 && iy < xs.h;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * g.stride - g.padding + kx;
            *dst++ = (row_in && ix >= 0 && ix < xs.w) ? plane[iy * xs.w + ix] : pad_value;
          }
        }
      }
  }
}

template <typename Scalar>
void col2im_add(const Mat<Scalar>& col, const Shape4& xs, const ConvGeometry& g, Scalar* dx) {
  const Index oh = g.out_h(xs.h);
  const Index ow = g.out_w(xs.w);
  Index row = 0;
  for (Index c = 0; c < xs.c; ++c) {
    Scalar* plane = dx + c * xs.h * xs.w;
    for (Index ky = 0; ky < g.kernel_h; ++ky)
      for (Index kx = 0; kx < g.kernel_w; ++kx, ++row) {
        const Scalar* src = col.row(row).data();
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * g.stride - g.padding + ky;
          const bool row_in = iy >= 0 && iy < xs.h;
          for (Index ox = 0; ox < ow; ++ox, ++src) {
            const Index ix = ox * g.stride - g.padding + kx;
            if (row_in && ix >= 0 && ix < xs.w) plane[iy * xs.w + ix] += *src;
          }
        }
      }
  }
}

template <typename Scalar>
void grouped_gemm(const ConstMatMap<Scalar>& w, const Mat<Scalar>& col, const ConvGeometry& g, MatMap<Scalar> out) {
  const Index og = g.group_out();
  const Index kg = g.reduction_length();
  for (Index grp = 0; grp < g.groups; ++grp)
    out.middleRows(grp * og, og).noalias() = w.middleRows(grp * og, og) * col.middleRows(grp * kg, kg);
}

template <typename Scalar>
void grouped_gemm_backward(const ConstMatMap<Scalar>& w, const Mat<Scalar>& col, const ConvGeometry& g,
                           const ConstMatMap<Scalar>& dout, Mat<Scalar>* dw, Mat<Scalar>* dcol) {
  const Index og = g.group_out();
  const Index kg = g.reduction_length();
  if (dcol) dcol->resize(col.rows(), col.cols());
  for (Index grp = 0; grp < g.groups; ++grp) {
    const auto dout_g = dout.middleRows(grp * og, og);
    if (dw) dw->middleRows(grp * og, og).noalias() += dout_g * col.middleRows(grp * kg, kg).transpose();
    if (dcol) dcol->middleRows(grp * kg, kg).noalias() = w.middleRows(grp * og, og).transpose() * dout_g;
  }
}

template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvGeometry& g,
                              Scalar pad_value) {
  g.validate();
  const Shape4& xs = x.shape();
  if (xs.c != g.in_channels) throw GeometryError("conv2d: input channel mismatch");
  if (!(w.shape() == g.weight_shape())) throw GeometryError("conv2d: weight shape mismatch");
  const Shape4 os = g.output_shape(xs);
  Tensor<Scalar> y(os);
  const ConstMatMap<Scalar> wm(w.data(), g.out_channels, g.reduction_length());
  const Shape4 one{1, xs.c, xs.h, xs.w};
  Mat<Scalar> col;
  for (Index n = 0; n < xs.n; ++n) {
    im2col(x.sample(n), one, g, pad_value, col);
    grouped_gemm(wm, col, g, y.sample_matrix(n));
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvGeometry& g,
                               Scalar pad_value, const Tensor<Scalar>& dy, typename Tensor<Scalar>::Array* dw) {
  const Shape4& xs = x.shape();
  const Shape4 one{1, xs.c, xs.h, xs.w};
  const ConstMatMap<Scalar> wm(w.data(), g.out_channels, g.reduction_length());
  Mat<Scalar> dwm;
  if (dw) dwm = Mat<Scalar>::Zero(g.out_channels, g.reduction_length());
  Tensor<Scalar> dx(xs);
  Mat<Scalar> col, dcol;
  for (Index n = 0; n < xs.n; ++n) {
    im2col(x.sample(n), one, g, pad_value, col);
    const ConstMatMap<Scalar> dout(dy.sample(n), g.out_channels, dy.shape().plane());
    grouped_gemm_backward(wm, col, g, dout, dw ? &dwm : nullptr, &dcol);
    col2im_add(dcol, one, g, dx.sample(n));
  }
  if (dw) *dw += Eigen::Map<const typename Tensor<Scalar>::Array>(dwm.data(), dwm.size());
  return dx;
}

template <typename Scalar>
Scalar SoftmaxXent<Scalar>::forward(const Tensor<Scalar>& logits, std::span<const int> a, std::span<const int> b,
                                    double lam) {
  const Index n = logits.shape().n;
  const Index k = logits.shape().sample_size();
  if (static_cast<Index>(a.size()) != n || static_cast<Index>(b.size()) != n)
    throw ShapeError("softmax_xent: label count does not match batch");
  target_a.assign(a.begin(), a.end());
  target_b.assign(b.begin(), b.end());
  lambda = lam;
  probs.resize(n, k);
  Scalar loss = 0;
  for (Index i = 0; i < n; ++i) {
    const Eigen::Map<const Vec<Scalar>> row(logits.sample(i), k);
    const Scalar m = row.maxCoeff();
    const Vec<Scalar> e = (row.array() - m).exp().matrix();
    const Scalar sum = e.sum();
    probs.row(i) = (e / sum).transpose();
    const Scalar log_sum = std::log(sum) + m;
    if (a[i] < 0 || a[i] >= k || b[i] < 0 || b[i] >= k) throw RangeError("softmax_xent: label out of range");
    loss += Scalar(lam) * (log_sum - row[a[i]]) + Scalar(1 - lam) * (log_sum - row[b[i]]);
  }
  return loss / Scalar(n);
}

template <typename Scalar>
Tensor<Scalar> SoftmaxXent<Scalar>::backward() const {
  const Index n = probs.rows();
  const Index k = probs.cols();
  Tensor<Scalar> d({n, k, 1, 1});
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < k; ++j) d[i * k + j] = probs(i, j);
    d[i * k + target_a[static_cast<std::size_t>(i)]] -= Scalar(lambda);
    d[i * k + target_b[static_cast<std::size_t>(i)]] -= Scalar(1 - lambda);
  }
  d.values() /= Scalar(n);
  return d;
}

#define EBNET_INSTANTIATE_OPS(S)                                                                            \
  template Tensor<S> sign_ste_forward<S>(const Tensor<S>&);                                                 \
  template Tensor<S> sign_ste_backward<S>(const Tensor<S>&, const Tensor<S>&);                              \
  template BitPlaneTensor weight_binarize_ste<S>(const Tensor<S>&);                                         \
  template void im2col<S>(const S*, const Shape4&, const ConvGeometry&, S, Mat<S>&);                        \
  template void col2im_add<S>(const Mat<S>&, const Shape4&, const ConvGeometry&, S*);                       \
  template void grouped_gemm<S>(const ConstMatMap<S>&, const Mat<S>&, const ConvGeometry&, MatMap<S>);      \
  template void grouped_gemm_backward<S>(const ConstMatMap<S>&, const Mat<S>&, const ConvGeometry&,         \
                                         const ConstMatMap<S>&, Mat<S>*, Mat<S>*);                          \
  template Tensor<S> conv2d_forward<S>(const Tensor<S>&, const Tensor<S>&, const ConvGeometry&, S);         \
  template Tensor<S> conv2d_backward<S>(const Tensor<S>&, const Tensor<S>&, const ConvGeometry&, S,         \
                                        const Tensor<S>&, Tensor<S>::Array*);                               \
  template struct SoftmaxXent<S>;

EBNET_INSTANTIATE_OPS(float)
EBNET_INSTANTIATE_OPS(double)

}  // namespace ebnet::graph
