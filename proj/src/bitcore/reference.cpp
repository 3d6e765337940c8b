#include <type_traits>

#include "ebnet/bitcore.hpp"

namespace ebnet {

template <typename Scalar>
Tensor<Scalar> conv2d_reference(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvGeometry& geom,
                                Scalar pad_value) {
  using Acc = std::conditional_t<std::is_same_v<Scalar, float>, double, long double>;
  geom.validate();
  const Shape4& xs = x.shape();
  if (xs.c != geom.in_channels) throw GeometryError("conv2d_reference: input channel mismatch");
  if (!(w.shape() == geom.weight_shape())) throw GeometryError("conv2d_reference: weight shape mismatch");
  const Shape4 os = geom.output_shape(xs);
  if (os.h < 1 || os.w < 1) throw GeometryError("conv2d_reference: kernel larger than padded input");

  Tensor<Scalar> out(os);
  const Index cg = geom.group_in();
  const Index og = geom.group_out();
  for (Index n = 0; n < os.n; ++n)
    for (Index o = 0; o < os.c; ++o) {
      const Index g = o / og;
      for (Index oy = 0; oy < os.h; ++oy)
        for (Index ox = 0; ox < os.w; ++ox) {
          Acc acc = 0;
          for (Index c = 0; c < cg; ++c)
            for (Index ky = 0; ky < geom.kernel_h; ++ky)
              for (Index kx = 0; kx < geom.kernel_w; ++kx) {
                const Index iy = oy * geom.stride - geom.padding + ky;
                const Index ix = ox * geom.stride - geom.padding + kx;
                const bool inside = iy >= 0 && iy < xs.h && ix >= 0 && ix < xs.w;
                const Acc xv = inside ? Acc(x.at(n, g * cg + c, iy, ix)) : Acc(pad_value);
                acc += xv * Acc(w.at(o, c, ky, kx));
              }
          out.at(n, o, oy, ox) = static_cast<Scalar>(acc);
        }
    }
  return out;
}

template Tensor<float> conv2d_reference<float>(const Tensor<float>&, const Tensor<float>&, const ConvGeometry&, float);
template Tensor<double> conv2d_reference<double>(const Tensor<double>&, const Tensor<double>&, const ConvGeometry&,
                                                 double);

}  // namespace ebnet
