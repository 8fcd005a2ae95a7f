#pragma once

#include <cstddef>
#include <functional>

namespace lba {

/// Process-wide worker count used by the GEMM kernels. Results never depend
/// on it: work is split by output element, each computed the same way.
void set_thread_count(int threads);
int thread_count();

/// Runs body(begin, end) over contiguous slices of [0, n).
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace lba
