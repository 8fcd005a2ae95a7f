#include "lanes_avx2.hpp"

#include <immintrin.h>

#include <algorithm>

#define LBA_AVX2 __attribute__((target("avx2")))

namespace lba::detail {

bool avx2_available() {
  static const bool available = __builtin_cpu_supports("avx2");
  return available;
}

namespace {

struct VecQuantizer {
  const TruncQuantizer* scalar;
  __m256i overflow_bits;
  __m256i underflow_bits;
  __m256i keep_mask;
  __m256i unit;
  bool flush;
};

LBA_AVX2 VecQuantizer make_vec(const TruncQuantizer& q) {
  return {&q,
          _mm256_set1_epi64x(static_cast<long long>(q.overflow_bits())),
          _mm256_set1_epi64x(static_cast<long long>(q.underflow_bits())),
          _mm256_set1_epi64x(static_cast<long long>(q.keep_mask())),
          _mm256_set1_epi64x(static_cast<long long>(q.unit_bits())),
          q.flushes_underflow()};
}

// Lane-wise TruncQuantizer::quantize. Magnitudes have a clear sign bit, so
// signed 64-bit compares order them correctly.
template <bool kHasLo>
LBA_AVX2 inline __m256d quantize(const VecQuantizer& q, __m256d hi, __m256d lo,
                                 __m256i& overflow) {
  const __m256d zero = _mm256_setzero_pd();
  const __m256i izero = _mm256_setzero_si256();
  const __m256i ones = _mm256_set1_epi64x(-1);
  const __m256i sign_bit = _mm256_set1_epi64x(static_cast<long long>(TruncQuantizer::kSignBit));
  __m256i both_zero = izero;
  __m256i below = izero;
  if constexpr (kHasLo) {
    const __m256d hz = _mm256_cmp_pd(hi, zero, _CMP_EQ_OQ);
    both_zero = _mm256_castpd_si256(_mm256_and_pd(hz, _mm256_cmp_pd(lo, zero, _CMP_EQ_OQ)));
    hi = _mm256_blendv_pd(hi, lo, hz);
    lo = _mm256_andnot_pd(hz, lo);
  }
  const __m256i hb = _mm256_castpd_si256(hi);
  const __m256i sign = _mm256_and_si256(hb, sign_bit);
  const __m256i mag = _mm256_xor_si256(hb, sign);
  if constexpr (kHasLo) {
    const __m256i lb = _mm256_castpd_si256(lo);
    const __m256i lo_zero = _mm256_cmpeq_epi64(_mm256_slli_epi64(lb, 1), izero);
    const __m256i same_sign = _mm256_cmpeq_epi64(_mm256_and_si256(lb, sign_bit), sign);
    below = _mm256_xor_si256(_mm256_or_si256(lo_zero, same_sign), ones);
  }
  const __m256i at_of = _mm256_cmpeq_epi64(mag, q.overflow_bits);
  overflow = _mm256_or_si256(_mm256_cmpgt_epi64(mag, q.overflow_bits),
                             _mm256_andnot_si256(below, at_of));
  if (!q.flush) {
    const __m256i tiny_limit = _mm256_set1_epi64x(static_cast<long long>(TruncQuantizer::kTinyLimit));
    const __m256i tiny = _mm256_andnot_si256(both_zero, _mm256_cmpgt_epi64(tiny_limit, mag));
    if (!_mm256_testz_si256(tiny, tiny)) [[unlikely]] {
      alignas(32) double h[4], l[4], r[4];
      alignas(32) long long of[4];
      _mm256_store_pd(h, hi);
      _mm256_store_pd(l, lo);
      for (int j = 0; j < 4; ++j) {
        bool o = false;
        r[j] = q.scalar->quantize(h[j], kHasLo ? l[j] : 0.0, o);
        of[j] = o ? -1 : 0;
      }
      overflow = _mm256_load_si256(reinterpret_cast<const __m256i*>(of));
      return _mm256_load_pd(r);
    }
  }
  __m256i t = _mm256_and_si256(mag, q.keep_mask);
  if constexpr (kHasLo) {
    const __m256i step = _mm256_and_si256(_mm256_and_si256(_mm256_cmpeq_epi64(t, mag), below), q.unit);
    t = _mm256_sub_epi64(t, step);
  }
  t = _mm256_blendv_epi8(t, q.overflow_bits, overflow);
  if (q.flush) {
    __m256i flushed = _mm256_cmpgt_epi64(q.underflow_bits, mag);
    if constexpr (kHasLo)
      flushed = _mm256_or_si256(
          flushed, _mm256_and_si256(_mm256_cmpeq_epi64(mag, q.underflow_bits), below));
    t = _mm256_andnot_si256(flushed, t);
  }
  __m256i result = _mm256_or_si256(t, sign);
  if constexpr (kHasLo) result = _mm256_andnot_si256(both_zero, result);
  return _mm256_castsi256_pd(result);
}

// Fmaq::add(product, partial, overflow) on four lanes.
LBA_AVX2 inline __m256d add(const VecQuantizer& acc, __m256d product, __m256d partial,
                            __m256i& overflow) {
  const __m256d sum = _mm256_add_pd(product, partial);
  const __m256d bb = _mm256_sub_pd(sum, product);
  const __m256d err = _mm256_add_pd(_mm256_sub_pd(product, _mm256_sub_pd(sum, bb)),
                                    _mm256_sub_pd(partial, bb));
  return quantize<true>(acc, sum, err, overflow);
}

LBA_AVX2 inline __m256d product(const VecQuantizer& prod, __m256d x, __m256d w) {
  __m256i unused;
  return quantize<false>(prod, _mm256_mul_pd(x, w), _mm256_setzero_pd(), unused);
}

LBA_AVX2 inline int bits_of(__m256i lo, __m256i hi) {
  return _mm256_movemask_pd(_mm256_castsi256_pd(lo)) |
         (_mm256_movemask_pd(_mm256_castsi256_pd(hi)) << 4);
}

}  // namespace

LBA_AVX2 void accumulate_lanes_avx2(Strided<float> x, const double* packed, std::size_t n,
                                    const Fmaq& unit, double* out) {
  const VecQuantizer prod = make_vec(unit.product());
  const VecQuantizer acc = make_vec(unit.accumulator());
  const std::size_t chunk = static_cast<std::size_t>(unit.config().chunk_size);
  __m256d total0 = _mm256_setzero_pd();
  __m256d total1 = _mm256_setzero_pd();
  __m256i of;
  for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
    const std::size_t c1 = std::min(n, c0 + chunk);
    __m256d s0 = _mm256_setzero_pd();
    __m256d s1 = _mm256_setzero_pd();
    for (std::size_t i = c0; i < c1; ++i) {
      const float xi = x[i];
      if (xi == 0.0f) continue;  // Q_acc(0 + s) == s
      const __m256d xv = _mm256_set1_pd(static_cast<double>(xi));
      const double* wi = packed + i * kLanes;
      s0 = add(acc, product(prod, xv, _mm256_loadu_pd(wi)), s0, of);
      s1 = add(acc, product(prod, xv, _mm256_loadu_pd(wi + 4)), s1, of);
    }
    if (c0 == 0) {
      total0 = s0;
      total1 = s1;
    } else {
      total0 = add(acc, s0, total0, of);
      total1 = add(acc, s1, total1, of);
    }
  }
  _mm256_storeu_pd(out, total0);
  _mm256_storeu_pd(out + 4, total1);
}

LBA_AVX2 void mask_lanes_avx2(Strided<float> x, const double* packed, std::size_t n,
                              const Fmaq& unit, SteKind kind, const DiffParams& diff,
                              std::uint8_t* const* mask) {
  const VecQuantizer prod = make_vec(unit.product());
  const VecQuantizer acc = make_vec(unit.accumulator());
  const std::size_t chunk = static_cast<std::size_t>(unit.config().chunk_size);
  const bool recursive = kind == SteKind::RecursiveOF;
  const bool use_diff = kind == SteKind::ImmediateDIFF;
  const __m256d eps1 = _mm256_set1_pd(diff.resolved_eps1(unit.config()));
  const __m256d eps2 = _mm256_set1_pd(diff.eps2);
  const __m256d of_threshold = _mm256_set1_pd(unit.accumulator().overflow_threshold());
  const __m256d abs_mask = _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffLL));
  const __m256d zero = _mm256_setzero_pd();

  auto store = [&](std::size_t i, int bits) {
    for (std::size_t j = 0; j < kLanes; ++j) mask[j][i] = static_cast<std::uint8_t>((bits >> j) & 1);
  };
  auto apply_cut = [&](std::size_t* cut, std::size_t i, int of_bits) {
    for (std::size_t j = 0; j < kLanes; ++j)
      if ((of_bits >> j) & 1) cut[j] = i + 1;
  };

  __m256d total[2] = {zero, zero};
  for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
    const std::size_t c1 = std::min(n, c0 + chunk);
    __m256d s[2] = {zero, zero};
    std::size_t cut[kLanes];
    std::fill(cut, cut + kLanes, c0);  // summands [c0, cut) lose their gradient
    for (std::size_t i = c0; i < c1; ++i) {
      const float xi = x[i];
      if (xi == 0.0f) {
        const int of_bits =
            _mm256_movemask_pd(_mm256_cmp_pd(_mm256_and_pd(s[0], abs_mask), of_threshold, _CMP_GE_OQ)) |
            (_mm256_movemask_pd(_mm256_cmp_pd(_mm256_and_pd(s[1], abs_mask), of_threshold, _CMP_GE_OQ)) << 4);
        store(i, use_diff ? 0 : (~of_bits & 0xff));
        if (recursive) apply_cut(cut, i, of_bits);
        continue;
      }
      const __m256d xv = _mm256_set1_pd(static_cast<double>(xi));
      const double* wi = packed + i * kLanes;
      __m256i of[2];
      __m256d z[2];
      int diff_bits = 0;
      for (int h = 0; h < 2; ++h) {
        const __m256d w = _mm256_loadu_pd(wi + 4 * h);
        z[h] = add(acc, product(prod, xv, w), s[h], of[h]);
        if (use_diff) {
          const __m256d p = _mm256_mul_pd(xv, w);
          const __m256d ratio = _mm256_div_pd(_mm256_and_pd(_mm256_sub_pd(z[h], s[h]), abs_mask),
                                              _mm256_add_pd(_mm256_and_pd(p, abs_mask), eps1));
          const __m256d m = _mm256_and_pd(_mm256_cmp_pd(p, zero, _CMP_NEQ_OQ),
                                          _mm256_cmp_pd(ratio, eps2, _CMP_GT_OQ));
          diff_bits |= _mm256_movemask_pd(m) << (4 * h);
        }
        s[h] = z[h];
      }
      if (use_diff) {
        store(i, diff_bits);
      } else {
        const int of_bits = bits_of(of[0], of[1]);
        store(i, ~of_bits & 0xff);
        if (recursive) apply_cut(cut, i, of_bits);
      }
    }
    int agg_bits = 0;
    if (c0 == 0) {
      total[0] = s[0];
      total[1] = s[1];
    } else {
      __m256i of[2];
      total[0] = add(acc, s[0], total[0], of[0]);
      total[1] = add(acc, s[1], total[1], of[1]);
      agg_bits = bits_of(of[0], of[1]);
    }
    if (recursive) {
      for (std::size_t j = 0; j < kLanes; ++j) {
        std::fill(mask[j] + c0, mask[j] + cut[j], std::uint8_t{0});
        if ((agg_bits >> j) & 1) std::fill(mask[j], mask[j] + c1, std::uint8_t{0});
      }
    }
  }
}

}  // namespace lba::detail
