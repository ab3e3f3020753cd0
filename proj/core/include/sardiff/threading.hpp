#pragma once

#include <cstdint>
#include <functional>

namespace sardiff {

/// Worker count for parallel_for; honors SARDIFF_THREADS when set.
int num_threads();

/// Runs fn over chunked ranges [begin, end) covering [0, n). Work partitioning
/// is fixed by n alone, so results are deterministic for disjoint writes.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace sardiff
