#include <istream>
#include <ostream>

#include "ebnet/bitcore.hpp"
#include "ebnet/io/binary.hpp"

namespace ebnet {

void write_bitplane(std::ostream& os, const BitPlaneTensor& b) {
  const Shape4& s = b.shape();
  io::put_u32(os, static_cast<std::uint32_t>(s.n));
  io::put_u32(os, static_cast<std::uint32_t>(s.c));
  io::put_u32(os, static_cast<std::uint32_t>(s.h));
  io::put_u32(os, static_cast<std::uint32_t>(s.w));
  io::put_u32(os, static_cast<std::uint32_t>(b.words_per_row()));
  for (const auto word : b.words()) io::put_u64(os, word);
}

BitPlaneTensor read_bitplane(std::istream& is, PackAxis axis) {
  Shape4 s;
  s.n = io::get_u32(is);
  s.c = io::get_u32(is);
  s.h = io::get_u32(is);
  s.w = io::get_u32(is);
  const Index wpr = io::get_u32(is);
  if (!s.live()) throw FormatError("packed tensor record has an empty shape");
  BitPlaneTensor b(s, axis);
  if (wpr != b.words_per_row())
    throw FormatError("packed tensor record: words_per_row " + std::to_string(wpr) + " inconsistent with shape (expected " +
                      std::to_string(b.words_per_row()) + ")");
  for (auto& word : b.words()) word = io::get_u64(is);
  if (!b.padding_clear()) throw FormatError("packed tensor record has non-zero padding bits");
  return b;
}

}  // namespace ebnet
