#pragma once

// AVX2 versions of the binary32 multi-series kernels. Weights are packed as
// kLanes consecutive doubles per input index (see pack_lanes). Every lane
// performs the same IEEE operations as accumulate_lanes / mask_lanes.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lanes.hpp"

namespace lba::detail {

bool avx2_available();

/// packed[(blk * k + i) * kLanes + j] = b(i, blk * kLanes + j) for every full
/// block of kLanes columns.
template <typename T>
std::vector<double> pack_lanes(const T* b, std::size_t k, std::size_t n, std::ptrdiff_t b_row,
                               std::ptrdiff_t b_col) {
  const std::size_t blocks = n / kLanes;
  std::vector<double> packed(blocks * k * kLanes);
  for (std::size_t blk = 0; blk < blocks; ++blk)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < kLanes; ++j)
        packed[(blk * k + i) * kLanes + j] =
            static_cast<double>(b[static_cast<std::ptrdiff_t>(i) * b_row +
                                  static_cast<std::ptrdiff_t>(blk * kLanes + j) * b_col]);
  return packed;
}

void accumulate_lanes_avx2(Strided<float> x, const double* packed, std::size_t n,
                           const Fmaq& unit, double* out);

void mask_lanes_avx2(Strided<float> x, const double* packed, std::size_t n, const Fmaq& unit,
                     SteKind kind, const DiffParams& diff, std::uint8_t* const* mask);

}  // namespace lba::detail
