#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

#include "formats.hpp"

namespace lba {

/// Error-free transforms: hi is the rounded result, the return value of the
/// corresponding *_error function is the exact residual.
inline double two_sum_error(double a, double b, double sum) {
  const double bb = sum - a;
  return (a - (sum - bb)) + (b - bb);
}

inline double two_product_error(double a, double b, double product) {
  return std::fma(a, b, -product);
}

/// Floor-on-magnitude quantizer for the FMAq internals.
///
/// Works on the exact value hi + lo where lo is the residual of the
/// operation that produced hi, so the result is the truncation of the
/// mathematically exact value and not of its carrier rounding.
class TruncQuantizer {
 public:
  static constexpr std::uint64_t kSignBit = std::uint64_t{1} << 63;
  // magnitudes below this have a carrier exponent field of 0 or 1
  static constexpr std::uint64_t kTinyLimit = std::uint64_t{2} << 52;

  TruncQuantizer() = default;
  TruncQuantizer(const FloatFormat& fmt, bool underflow, int extra_mantissa = 0) {
    fmt.validate(extra_mantissa);
    const int mantissa = fmt.mantissa_bits + extra_mantissa;
    overflow_ = std::ldexp(2.0 - std::ldexp(1.0, -mantissa), fmt.max_exponent());
    underflow_ = std::ldexp(1.0, fmt.min_exponent());
    flush_ = underflow;
    unit_ = std::uint64_t{1} << (52 - mantissa);
    keep_mask_ = ~(unit_ - 1);
    overflow_bits_ = std::bit_cast<std::uint64_t>(overflow_);
    underflow_bits_ = std::bit_cast<std::uint64_t>(underflow_);
  }

  // Carrier bit patterns, for vectorized kernels.
  std::uint64_t overflow_bits() const { return overflow_bits_; }
  std::uint64_t underflow_bits() const { return underflow_bits_; }
  std::uint64_t keep_mask() const { return keep_mask_; }
  std::uint64_t unit_bits() const { return unit_; }

  double overflow_threshold() const { return overflow_; }
  double underflow_threshold() const { return underflow_; }
  bool flushes_underflow() const { return flush_; }

  double operator()(double hi, double lo = 0.0) const {
    bool overflow = false;
    return quantize(hi, lo, overflow);
  }

  /// Also reports whether the exact value hi + lo reached R_OF in magnitude.
  double quantize(double hi, double lo, bool& overflow) const {
    if (hi == 0.0) [[unlikely]] {
      overflow = false;
      if (lo == 0.0) return 0.0;
      hi = lo;
      lo = 0.0;
    }
    const std::uint64_t hb = std::bit_cast<std::uint64_t>(hi);
    const std::uint64_t sign = hb & kSignBit;
    const std::uint64_t mag = hb ^ sign;
    const std::uint64_t lb = std::bit_cast<std::uint64_t>(lo);
    const bool below = (lb << 1) != 0 && (lb & kSignBit) != sign;
    overflow = mag > overflow_bits_ || (mag == overflow_bits_ && !below);
    if (!flush_ && mag < kTinyLimit) [[unlikely]]
      return truncate_tiny(hi, below);
    std::uint64_t t = mag & keep_mask_;
    t -= (t == mag && below) ? unit_ : 0;
    t = overflow ? overflow_bits_ : t;
    const bool flushed = flush_ && (mag < underflow_bits_ || (mag == underflow_bits_ && below));
    t = flushed ? 0 : t;
    return std::bit_cast<double>(t | sign);
  }

 private:

  // Carrier subnormal range, only reachable with underflow disabled.
  double truncate_tiny(double hi, bool below) const {
    const double scaled = std::ldexp(std::fabs(hi), 600);
    std::uint64_t bits = std::bit_cast<std::uint64_t>(scaled);
    std::uint64_t t = bits & keep_mask_;
    if (t == bits && below) t -= unit_;
    return std::copysign(std::ldexp(std::bit_cast<double>(t), -600), hi);
  }

  double overflow_ = 0.0;
  double underflow_ = 0.0;
  std::uint64_t overflow_bits_ = 0;
  std::uint64_t underflow_bits_ = 0;
  std::uint64_t unit_ = 0;
  std::uint64_t keep_mask_ = 0;
  bool flush_ = true;
};

}  // namespace lba
