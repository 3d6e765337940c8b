#include <string>

#include "ebnet/bitcore.hpp"
#include "ebnet/parallel.hpp"

namespace ebnet {

void ConvGeometry::validate() const {
  if (groups < 1) throw GeometryError("groups must be >= 1");
  if (in_channels < 1 || out_channels < 1) throw GeometryError("channel counts must be >= 1");
  if (in_channels % groups != 0 || out_channels % groups != 0)
    throw GeometryError("channels (" + std::to_string(in_channels) + " -> " + std::to_string(out_channels) +
                        ") not divisible by groups " + std::to_string(groups));
  if (kernel_h < 1 || kernel_w < 1 || stride < 1 || padding < 0) throw GeometryError("invalid kernel/stride/padding");
}

IntTensor bconv2d_accumulate(const BitPlaneTensor& x, const BitPlaneTensor& w, const ConvGeometry& geom) {
  geom.validate();
  const Shape4& xs = x.shape();
  if (x.axis() != PackAxis::channel) throw GeometryError("bconv2d: activations must be packed along channels");
  if (w.axis() != PackAxis::sample) throw GeometryError("bconv2d: weights must be packed per output channel");
  if (xs.c != geom.in_channels)
    throw GeometryError("bconv2d: input has " + std::to_string(xs.c) + " channels, geometry expects " +
                        std::to_string(geom.in_channels));
  if (!(w.shape() == geom.weight_shape())) throw GeometryError("bconv2d: weight shape does not match geometry");

  const Shape4 out_shape = geom.output_shape(xs);
  if (out_shape.h < 1 || out_shape.w < 1) throw GeometryError("bconv2d: kernel larger than padded input");

  IntTensor out{out_shape, std::vector<std::int32_t>(static_cast<std::size_t>(out_shape.count()))};
  const Index cg = geom.group_in();
  const Index og = geom.group_out();
  const Index kh = geom.kernel_h;
  const Index kw = geom.kernel_w;
  const Index red = geom.reduction_length();
  const Index col_words = words_for_bits(red);
  const Index x_wpr = x.words_per_row();

  // One task per (sample, output row).
  parallel_for(0, out_shape.n * out_shape.h, [&](Index lo, Index hi) {
    std::vector<std::uint64_t> col(static_cast<std::size_t>(col_words));
    for (Index task = lo; task < hi; ++task) {
      const Index n = task / out_shape.h;
      const Index oy = task % out_shape.h;
      for (Index ox = 0; ox < out_shape.w; ++ox) {
        for (Index g = 0; g < geom.groups; ++g) {
          std::fill(col.begin(), col.end(), 0);
          // Bit order (c, ky, kx) matches the row-major flattening of the weights.
          for (Index ky = 0; ky < kh; ++ky) {
            const Index iy = oy * geom.stride - geom.padding + ky;
            if (iy < 0 || iy >= xs.h) continue;
            for (Index kx = 0; kx < kw; ++kx) {
              const Index ix = ox * geom.stride - geom.padding + kx;
              if (ix < 0 || ix >= xs.w) continue;
              const std::uint64_t* px = x.words().data() + ((n * xs.h + iy) * xs.w + ix) * x_wpr;
              for (Index c = 0; c < cg; ++c) {
                const Index src = g * cg + c;
                if ((px[src >> 6] >> (src & 63)) & 1u) {
                  const Index dst = (c * kh + ky) * kw + kx;
                  col[static_cast<std::size_t>(dst >> 6)] |= std::uint64_t{1} << (dst & 63);
                }
              }
            }
          }
          const std::span<const std::uint64_t> col_span(col);
          for (Index o = g * og; o < (g + 1) * og; ++o) {
            const auto acc = xnor_popcount_dot(col_span, w.row(o), red);
            out.values[static_cast<std::size_t>(((n * out_shape.c + o) * out_shape.h + oy) * out_shape.w + ox)] =
                static_cast<std::int32_t>(acc);
          }
        }
      }
    }
  });
  return out;
}

template <typename Scalar>
Tensor<Scalar> bconv2d_packed(const BitPlaneTensor& x, const BitPlaneTensor& w, const ConvGeometry& geom,
                              const ScaleVector<Scalar>& alpha) {
  if (alpha.size() != geom.out_channels) throw GeometryError("bconv2d: alpha length must equal out_channels");
  const IntTensor acc = bconv2d_accumulate(x, w, geom);
  Tensor<Scalar> out(acc.shape);
  const Index plane = acc.shape.plane();
  for (Index i = 0; i < out.size(); ++i) {
    const Index o = (i / plane) % acc.shape.c;
    out[i] = static_cast<Scalar>(acc.values[static_cast<std::size_t>(i)]) * alpha[o];
  }
  return out;
}

template Tensor<float> bconv2d_packed<float>(const BitPlaneTensor&, const BitPlaneTensor&, const ConvGeometry&,
                                             const ScaleVector<float>&);
template Tensor<double> bconv2d_packed<double>(const BitPlaneTensor&, const BitPlaneTensor&, const ConvGeometry&,
                                               const ScaleVector<double>&);

}  // namespace ebnet
