#pragma once

#include <functional>

#include "ebnet/tensor.hpp"

namespace ebnet {

/// Thread cap for internal kernels. Defaults to EBNET_THREADS when set,
/// otherwise the hardware concurrency.
int max_threads();
void set_max_threads(int n);

/// Splits [begin, end) into contiguous chunks, one per worker. `fn` receives
/// a half-open sub-range and must only write outputs owned by that range.
void parallel_for(Index begin, Index end, const std::function<void(Index, Index)>& fn);

}  // namespace ebnet
