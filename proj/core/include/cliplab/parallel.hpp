#pragma once

#include <functional>

namespace cliplab {

/// Worker count used by the Monte Carlo routines; 1 by default.
int default_threads() noexcept;
void set_default_threads(int threads);

/// Runs fn(0) .. fn(n_blocks - 1) on up to `threads` workers. Callers give each
/// block its own rng derived from the block index and reduce results in block
/// order, so output does not depend on the worker count. The first exception
/// thrown by any block is rethrown.
void parallel_blocks(int n_blocks, const std::function<void(int)>& fn, int threads = 0);

}  // namespace cliplab
