#include <bit>

#include "ebnet/bitcore.hpp"

namespace ebnet {

BitPlaneTensor::BitPlaneTensor(Shape4 shape, PackAxis axis) : shape_(shape), axis_(axis) {
  if (!shape.live()) throw ShapeError("cannot pack an empty tensor");
  switch (axis) {
    case PackAxis::width:
      rows_ = shape.n * shape.c * shape.h;
      row_length_ = shape.w;
      break;
    case PackAxis::channel:
      rows_ = shape.n * shape.h * shape.w;
      row_length_ = shape.c;
      break;
    case PackAxis::sample:
      rows_ = shape.n;
      row_length_ = shape.c * shape.h * shape.w;
      break;
  }
  words_per_row_ = words_for_bits(row_length_);
  words_.assign(static_cast<std::size_t>(rows_ * words_per_row_), 0);
}

std::pair<Index, Index> BitPlaneTensor::locate(Index n, Index c, Index h, Index w) const {
  switch (axis_) {
    case PackAxis::width:
      return {(n * shape_.c + c) * shape_.h + h, w};
    case PackAxis::channel:
      return {(n * shape_.h + h) * shape_.w + w, c};
    case PackAxis::sample:
      break;
  }
  return {n, (c * shape_.h + h) * shape_.w + w};
}

void BitPlaneTensor::set_bit(Index n, Index c, Index h, Index w, bool value) {
  auto [r, b] = locate(n, c, h, w);
  auto& word = words_[r * words_per_row_ + (b >> 6)];
  const std::uint64_t mask = std::uint64_t{1} << (b & 63);
  word = value ? (word | mask) : (word & ~mask);
}

bool BitPlaneTensor::padding_clear() const {
  const Index tail = row_length_ & 63;
  if (tail == 0) return true;
  const std::uint64_t keep = (std::uint64_t{1} << tail) - 1;
  for (Index r = 0; r < rows_; ++r)
    if (words_[r * words_per_row_ + words_per_row_ - 1] & ~keep) return false;
  return true;
}

template <typename Scalar>
BitPlaneTensor binarize_pack(const Tensor<Scalar>& x, PackAxis axis) {
  if (x.empty() || !x.shape().live()) throw ShapeError("binarize_pack: empty tensor");
  const Shape4& s = x.shape();
  BitPlaneTensor out(s, axis);
  Index i = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < s.h; ++h)
        for (Index w = 0; w < s.w; ++w, ++i)
          if (x[i] >= Scalar(0)) out.set_bit(n, c, h, w, true);
  return out;
}

template <typename Scalar>
Tensor<Scalar> unpack(const BitPlaneTensor& b) {
  const Shape4& s = b.shape();
  if (!s.live()) throw ShapeError("unpack: empty bit-plane tensor");
  Tensor<Scalar> out(s);
  Index i = 0;
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c)
      for (Index h = 0; h < s.h; ++h)
        for (Index w = 0; w < s.w; ++w, ++i) out[i] = b.bit(n, c, h, w) ? Scalar(1) : Scalar(-1);
  return out;
}

int popcount_portable(std::uint64_t v) {
  v = v - ((v >> 1) & 0x5555555555555555ULL);
  v = (v & 0x3333333333333333ULL) + ((v >> 2) & 0x3333333333333333ULL);
  v = (v + (v >> 4)) & 0x0F0F0F0F0F0F0F0FULL;
  return static_cast<int>((v * 0x0101010101010101ULL) >> 56);
}

int popcount_hw(std::uint64_t v) { return std::popcount(v); }

std::int64_t xnor_popcount_dot(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
                               Index n_valid) {
  const auto capacity = static_cast<Index>(std::min(a.size(), b.size())) * 64;
  if (n_valid < 0 || n_valid > capacity)
    throw RangeError("xnor_popcount_dot: n_valid " + std::to_string(n_valid) + " exceeds packed capacity " +
                     std::to_string(capacity));
  const Index full = n_valid >> 6;
  std::int64_t hamming = 0;
  for (Index i = 0; i < full; ++i) hamming += std::popcount(a[i] ^ b[i]);
  if (const Index tail = n_valid & 63) {
    const std::uint64_t keep = (std::uint64_t{1} << tail) - 1;
    hamming += std::popcount((a[full] ^ b[full]) & keep);
  }
  return n_valid - 2 * hamming;
}

template BitPlaneTensor binarize_pack<float>(const Tensor<float>&, PackAxis);
template BitPlaneTensor binarize_pack<double>(const Tensor<double>&, PackAxis);
template Tensor<float> unpack<float>(const BitPlaneTensor&);
template Tensor<double> unpack<double>(const BitPlaneTensor&);

}  // namespace ebnet
