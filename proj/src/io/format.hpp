#pragma once

// Shared pieces of the checkpoint and export writers.

#include <iosfwd>

#include "ebnet/io/checkpoint.hpp"

namespace ebnet::io::detail {

void write_header(std::ostream& os, CheckpointKind kind, const CheckpointMeta& meta);
void write_real32(std::ostream& os, const std::string& name, const Tensor<float>& t);
void write_packed(std::ostream& os, const std::string& name, const BitPlaneTensor& b);

}  // namespace ebnet::io::detail
