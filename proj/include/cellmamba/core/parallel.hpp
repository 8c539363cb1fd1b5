#pragma once

#include <cstdint>
#include <functional>

namespace cm {

// Persistent worker pool for data-parallel loops over disjoint output ranges.
// Results are bitwise independent of the thread count because every output
// element is produced by a serial computation; threads never share a
// reduction.
// n = 0 restores the hardware default.
void set_num_threads(int n);
int num_threads();

// Runs body(begin, end) over [0, n) in contiguous chunks. Chunks smaller than
// `grain` are not split further. Nested calls from inside a worker run inline.
void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace cm
