#pragma once

#include <span>
#include <vector>

#include "ebnet/bitcore.hpp"
#include "ebnet/tensor.hpp"

namespace ebnet::graph {

// ---- straight-through sign ------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sign_ste_forward(const Tensor<Scalar>& x);

/// Hard-tanh STE: upstream gradient masked to |x| <= 1.
template <typename Scalar>
Tensor<Scalar> sign_ste_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& dy);

/// Forward packs sign(theta); the backward pass is the identity, so callers
/// simply route the upstream gradient to the latent weights.
template <typename Scalar>
BitPlaneTensor weight_binarize_ste(const Tensor<Scalar>& theta);

// ---- im2col convolution --------------------------------------------------

/// Columns for one sample: rows ordered (c, ky, kx), one column per output
/// pixel. Taps outside the input read `pad_value`.
template <typename Scalar>
void im2col(const Scalar* x, const Shape4& xs, const ConvGeometry& g, Scalar pad_value, Mat<Scalar>& col);

template <typename Scalar>
void col2im_add(const Mat<Scalar>& col, const Shape4& xs, const ConvGeometry& g, Scalar* dx);

/// out (out_channels, P) = grouped weight (out_channels, Cg*kh*kw) x col.
template <typename Scalar>
void grouped_gemm(const ConstMatMap<Scalar>& w, const Mat<Scalar>& col, const ConvGeometry& g, MatMap<Scalar> out);

template <typename Scalar>
void grouped_gemm_backward(const ConstMatMap<Scalar>& w, const Mat<Scalar>& col, const ConvGeometry& g,
                           const ConstMatMap<Scalar>& dout, Mat<Scalar>* dw, Mat<Scalar>* dcol);

template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvGeometry& g,
                              Scalar pad_value = Scalar(0));

/// Accumulates into dw (when non-null) and returns dx.
template <typename Scalar>
Tensor<Scalar> conv2d_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvGeometry& g,
                               Scalar pad_value, const Tensor<Scalar>& dy, typename Tensor<Scalar>::Array* dw);

// ---- gating --------------------------------------------------------------

struct GateState {
  std::vector<double> z;
  Index selected = 0;
  std::vector<double> onehot;
};

/// Per-channel spatial means of one sample projected by omega (C x N).
template <typename Scalar>
Vec<Scalar> aggregate_psi(const Scalar* x, const Shape4& xs, const ConstMatMap<Scalar>& omega);

/// Per-sample variant: row b holds z for sample b.
template <typename Scalar>
Mat<Scalar> aggregate_psi(const Tensor<Scalar>& x, const ConstMatMap<Scalar>& omega);

/// Winners-take-all; the lowest index wins ties.
GateState gate_forward(std::span<const double> z);

template <typename Scalar>
Vec<Scalar> softmax(const Vec<Scalar>& z, Scalar tau);

/// dL/dz = J^T upstream with J the Jacobian of Softmax(z / tau).
template <typename Scalar>
Vec<Scalar> gate_backward(const Vec<Scalar>& z, const Vec<Scalar>& upstream, Scalar tau);

// ---- loss ----------------------------------------------------------------

/// Mean cross-entropy over the batch. Each sample's target is the mixture
/// lambda * onehot(a) + (1 - lambda) * onehot(b); plain labels use a == b.
template <typename Scalar>
struct SoftmaxXent {
  Mat<Scalar> probs;
  std::vector<int> target_a;
  std::vector<int> target_b;
  double lambda = 1.0;

  Scalar forward(const Tensor<Scalar>& logits, std::span<const int> a, std::span<const int> b, double lambda);
  Scalar forward(const Tensor<Scalar>& logits, std::span<const int> labels) {
    return forward(logits, labels, labels, 1.0);
  }
  Tensor<Scalar> backward() const;
};

}  // namespace ebnet::graph
