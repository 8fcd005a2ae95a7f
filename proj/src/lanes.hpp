#pragma once

// Multi-series kernels: L chunked accumulations that share the input series
// x and differ in w, advanced in lockstep so their dependency chains
// overlap. Each series sees exactly the operations of the single-series
// kernels, in the same order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <type_traits>

#include "fmaq.hpp"
#include "grad.hpp"

namespace lba::detail {

inline constexpr std::size_t kLanes = 8;

// Products of two binary32 values are exact in the carrier.
template <typename T>
inline double quantized_product(const Fmaq& unit, T x, T w) {
  if constexpr (std::is_same_v<T, float>) {
    return unit.product()(static_cast<double>(x) * static_cast<double>(w));
  } else {
    return unit.quantize_product(x, w);
  }
}

template <typename T>
void accumulate_lanes(Strided<T> x, const Strided<T>* w, std::size_t n, const Fmaq& unit,
                      double* out) {
  const std::size_t chunk = static_cast<std::size_t>(unit.config().chunk_size);
  double total[kLanes] = {};
  for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
    const std::size_t c1 = std::min(n, c0 + chunk);
    double s[kLanes] = {};
    for (std::size_t i = c0; i < c1; ++i) {
      const T xi = x[i];
      if (xi == T{0}) continue;  // Q_acc(0 + s) == s
      for (std::size_t j = 0; j < kLanes; ++j) s[j] = unit.add(quantized_product(unit, xi, w[j][i]), s[j]);
    }
    for (std::size_t j = 0; j < kLanes; ++j) total[j] = c0 == 0 ? s[j] : unit.add(s[j], total[j]);
  }
  std::copy(total, total + kLanes, out);
}

/// Gradient masks of L series; mask[j] receives n entries for series j.
template <typename T>
void mask_lanes(Strided<T> x, const Strided<T>* w, std::size_t n, const Fmaq& unit, SteKind kind,
                const DiffParams& diff, std::uint8_t* const* mask) {
  const std::size_t chunk = static_cast<std::size_t>(unit.config().chunk_size);
  const double eps1 = diff.resolved_eps1(unit.config());
  const double of_threshold = unit.accumulator().overflow_threshold();
  const bool recursive = kind == SteKind::RecursiveOF;
  const bool use_diff = kind == SteKind::ImmediateDIFF;
  double total[kLanes] = {};
  for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
    const std::size_t c1 = std::min(n, c0 + chunk);
    double s[kLanes] = {};
    std::size_t cut[kLanes];
    std::fill(cut, cut + kLanes, c0);  // summands [c0, cut) lose their gradient
    for (std::size_t i = c0; i < c1; ++i) {
      const T xi = x[i];
      if (xi == T{0}) {
        for (std::size_t j = 0; j < kLanes; ++j) {
          const bool of = std::fabs(s[j]) >= of_threshold;
          mask[j][i] = !use_diff && !of;
          if (recursive && of) cut[j] = i + 1;
        }
        continue;
      }
      for (std::size_t j = 0; j < kLanes; ++j) {
        const T wi = w[j][i];
        bool of = false;
        const double z = unit.add(quantized_product(unit, xi, wi), s[j], of);
        if (use_diff) {
          const double prod = static_cast<double>(xi) * static_cast<double>(wi);
          mask[j][i] = prod != 0.0 && std::fabs(z - s[j]) / (std::fabs(prod) + eps1) > diff.eps2;
        } else {
          mask[j][i] = !of;
          if (recursive && of) cut[j] = i + 1;
        }
        s[j] = z;
      }
    }
    for (std::size_t j = 0; j < kLanes; ++j) {
      if (recursive) std::fill(mask[j] + c0, mask[j] + cut[j], std::uint8_t{0});
      if (c0 == 0) {
        total[j] = s[j];
      } else {
        bool of = false;
        const double t = unit.add(s[j], total[j], of);
        if (recursive && of) std::fill(mask[j], mask[j] + c1, std::uint8_t{0});
        total[j] = t;
      }
    }
  }
}

}  // namespace lba::detail
