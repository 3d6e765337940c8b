#include "ebnet/graph/ops.hpp"

namespace ebnet::graph {

template <typename Scalar>
Vec<Scalar> aggregate_psi(const Scalar* x, const Shape4& xs, const ConstMatMap<Scalar>& omega) {
  if (omega.rows() != xs.c) throw ShapeError("aggregate_psi: omega rows must equal input channels");
  const ConstMatMap<Scalar> planes(x, xs.c, xs.plane());
  const Vec<Scalar> means = planes.rowwise().sum() / Scalar(xs.plane());
  return omega.transpose() * means;
}

template <typename Scalar>
Mat<Scalar> aggregate_psi(const Tensor<Scalar>& x, const ConstMatMap<Scalar>& omega) {
  const Shape4& s = x.shape();
  Mat<Scalar> z(s.n, omega.cols());
  const Shape4 one{1, s.c, s.h, s.w};
  for (Index n = 0; n < s.n; ++n) z.row(n) = aggregate_psi(x.sample(n), one, omega).transpose();
  return z;
}

GateState gate_forward(std::span<const double> z) {
  if (z.empty()) throw ShapeError("gate_forward: empty logit vector");
  GateState g;
  g.z.assign(z.begin(), z.end());
  for (std::size_t i = 1; i < z.size(); ++i)
    if (z[i] > z[static_cast<std::size_t>(g.selected)]) g.selected = static_cast<Index>(i);
  g.onehot.assign(z.size(), 0.0);
  g.onehot[static_cast<std::size_t>(g.selected)] = 1.0;
  return g;
}

template <typename Scalar>
Vec<Scalar> softmax(const Vec<Scalar>& z, Scalar tau) {
  const Vec<Scalar> scaled = z / tau;
  const Vec<Scalar> e = (scaled.array() - scaled.maxCoeff()).exp().matrix();
  return e / e.sum();
}

template <typename Scalar>
Vec<Scalar> gate_backward(const Vec<Scalar>& z, const Vec<Scalar>& upstream, Scalar tau) {
  if (!(tau > Scalar(0))) throw ConfigError("gate_backward: temperature must be positive");
  if (z.size() != upstream.size()) throw ShapeError("gate_backward: size mismatch");
  const Vec<Scalar> s = softmax(z, tau);
  // J^T u with J_ij = s_i (delta_ij - s_j) / tau, J symmetric.
  const Scalar su = s.dot(upstream);
  return (s.array() * (upstream.array() - su) / tau).matrix();
}

template Vec<float> aggregate_psi<float>(const float*, const Shape4&, const ConstMatMap<float>&);
template Vec<double> aggregate_psi<double>(const double*, const Shape4&, const ConstMatMap<double>&);
template Mat<float> aggregate_psi<float>(const Tensor<float>&, const ConstMatMap<float>&);
template Mat<double> aggregate_psi<double>(const Tensor<double>&, const ConstMatMap<double>&);
template Vec<float> softmax<float>(const Vec<float>&, float);
template Vec<double> softmax<double>(const Vec<double>&, double);
template Vec<float> gate_backward<float>(const Vec<float>&, const Vec<float>&, float);
template Vec<double> gate_backward<double>(const Vec<double>&, const Vec<double>&, double);

}  // namespace ebnet::graph
