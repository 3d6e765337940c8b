#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "ebnet/tensor.hpp"

namespace ebnet {

/// Axis whose elements share one packed row.
///   width:   rows are (n, c, h), bits run along w
///   channel: rows are pixels (n, h, w), bits run along c
///   sample:  rows are n, bits run along the flattened (c, h, w)
/// Convolution activations use `channel`; weights of shape
/// (out, in/G, kh, kw) use `sample`, which makes each row one output
/// channel's full reduction window.
enum class PackAxis : std::uint8_t { width, channel, sample };

/// Sign tensor, one bit per element, bit 1 <-> +1 and bit 0 <-> -1.
/// Rows are LSB-first sequences of 64-bit words; bits past row_length are 0.
class BitPlaneTensor {
 public:
  BitPlaneTensor() = default;
  BitPlaneTensor(Shape4 shape, PackAxis axis);

  const Shape4& shape() const { return shape_; }
  PackAxis axis() const { return axis_; }
  Index rows() const { return rows_; }
  Index row_length() const { return row_length_; }
  Index words_per_row() const { return words_per_row_; }

  std::span<std::uint64_t> row(Index r) {
    return {words_.data() + r * words_per_row_, static_cast<std::size_t>(words_per_row_)};
  }
  std::span<const std::uint64_t> row(Index r) const {
    return {words_.data() + r * words_per_row_, static_cast<std::size_t>(words_per_row_)};
  }
  std::vector<std::uint64_t>& words() { return words_; }
  const std::vector<std::uint64_t>& words() const { return words_; }

  /// Row and bit position of element (n, c, h, w).
  std::pair<Index, Index> locate(Index n, Index c, Index h, Index w) const;

  bool bit(Index n, Index c, Index h, Index w) const {
    auto [r, b] = locate(n, c, h, w);
    return (words_[r * words_per_row_ + (b >> 6)] >> (b & 63)) & 1u;
  }
  void set_bit(Index n, Index c, Index h, Index w, bool value);

  /// True when every bit beyond row_length is zero.
  bool padding_clear() const;

  friend bool operator==(const BitPlaneTensor&, const BitPlaneTensor&) = default;

 private:
  Shape4 shape_{};
  PackAxis axis_ = PackAxis::sample;
  Index rows_ = 0;
  Index row_length_ = 0;
  Index words_per_row_ = 0;
  std::vector<std::uint64_t> words_;
};

inline Index words_for_bits(Index bits) { return (bits + 63) / 64; }

/// Sign with the zero convention used everywhere in the library: sign(0) = +1.
template <typename Scalar>
constexpr Scalar sign_plus(Scalar v) {
  return v >= Scalar(0) ? Scalar(1) : Scalar(-1);
}

template <typename Scalar>
BitPlaneTensor binarize_pack(const Tensor<Scalar>& x, PackAxis axis);

template <typename Scalar>
Tensor<Scalar> unpack(const BitPlaneTensor& b);

int popcount_portable(std::uint64_t v);
int popcount_hw(std::uint64_t v);

/// Integer dot product of the +-1 vectors held in the first n_valid bits of
/// two packed rows: 2 * matches - n_valid.
std::int64_t xnor_popcount_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
                               Index n_valid);

struct ConvGeometry {
  Index in_channels = 1;
  Index out_channels = 1;
  Index kernel_h = 1;
  Index kernel_w = 1;
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;

  void validate() const;
  Index group_in() const { return in_channels / groups; }
  Index group_out() const { return out_channels / groups; }
  Index reduction_length() const { return group_in() * kernel_h * kernel_w; }
  Index out_h(Index h) const { return (h + 2 * padding - kernel_h) / stride + 1; }
  Index out_w(Index w) const { return (w + 2 * padding - kernel_w) / stride + 1; }
  Shape4 weight_shape() const { return {out_channels, group_in(), kernel_h, kernel_w}; }
  Shape4 output_shape(const Shape4& in) const { return {in.n, out_channels, out_h(in.h), out_w(in.w)}; }
};

/// Per-output-channel scale applied after a binary convolution.
template <typename Scalar>
using ScaleVector = Vec<Scalar>;

struct IntTensor {
  Shape4 shape;
  std::vector<std::int32_t> values;
};

/// Raw XNOR/popcount accumulations of a packed convolution. Activations
/// must be packed along `channel`, weights along `sample`; spatial padding
/// contributes -1 operands.
IntTensor bconv2d_accumulate(const BitPlaneTensor& x, const BitPlaneTensor& w, const ConvGeometry& geom);

/// BConv(x, w) = (sign(x) * sign(w)) scaled per output channel by alpha.
template <typename Scalar>
Tensor<Scalar> bconv2d_packed(const BitPlaneTensor& x, const BitPlaneTensor& w, const ConvGeometry& geom,
                              const ScaleVector<Scalar>& alpha);

/// Naive grouped cross-correlation. Accumulation runs over (c, ky, kx) in
/// row-major order in a wider accumulator; out-of-bounds taps read
/// `pad_value` (0 for real paths, -1 for binary ones).
template <typename Scalar>
Tensor<Scalar> conv2d_reference(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const ConvGeometry& geom,
                                Scalar pad_value = Scalar(0));

// Packed-tensor record: shape as 4 x u32, words_per_row as u32, then the
// words as u64, all little-endian.
void write_bitplane(std::ostream& os, const BitPlaneTensor& b);
BitPlaneTensor read_bitplane(std::istream& is, PackAxis axis = PackAxis::sample);

}  // namespace ebnet
