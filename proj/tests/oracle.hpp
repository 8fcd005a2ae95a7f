#pragma once

// Exact rational reference for the simulator. Everything here is computed
// on mpq_class values straight from the format definitions, with no carrier
// bit tricks, so it can check the optimized kernels independently.

#include <gmpxx.h>

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace oracle {

using Q = mpq_class;

inline Q pow2(long e) {
  mpz_class p = 1;
  mpz_mul_2exp(p.get_mpz_t(), p.get_mpz_t(), static_cast<mp_bitcnt_t>(e < 0 ? -e : e));
  return e < 0 ? Q(mpz_class(1), p) : Q(p);
}

inline Q exact(double x) { return Q(x); }

/// Converts back to double, failing loudly if the value is not a double.
inline double to_double(const Q& q) {
  const double d = q.get_d();
  if (Q(d) != q) throw std::runtime_error("oracle value not representable in double");
  return d;
}

inline Q abs(const Q& q) { return q < 0 ? Q(-q) : q; }

/// floor(log2 a) for a > 0.
inline long floor_log2(const Q& a) {
  long e = static_cast<long>(mpz_sizeinbase(a.get_num_mpz_t(), 2)) -
           static_cast<long>(mpz_sizeinbase(a.get_den_mpz_t(), 2));
  while (pow2(e) > a) --e;
  while (pow2(e + 1) <= a) ++e;
  return e;
}

struct Fmt {
  int M = 7;
  int E = 4;
  int b = 10;
};

enum class Mode { Truncate, Nearest };

inline Q r_of(const Fmt& f, int extra = 0) {
  return pow2((1L << f.E) - f.b - 1) * (2 - pow2(-(f.M + extra)));
}

inline Q r_uf(const Fmt& f) { return pow2(-f.b); }

inline Q floor_q(const Q& q) {
  mpz_class r;
  mpz_fdiv_q(r.get_mpz_t(), q.get_num_mpz_t(), q.get_den_mpz_t());
  return Q(r);
}

// Round half to even on a nonnegative value.
inline Q nearest_q(const Q& q) {
  const Q f = floor_q(q);
  const Q frac = q - f;
  if (frac > Q(1, 2)) return f + 1;
  if (frac < Q(1, 2)) return f;
  mpz_class fi = f.get_num();
  return mpz_odd_p(fi.get_mpz_t()) ? Q(f + 1) : f;
}

inline Q quantize_float(const Q& x, const Fmt& f, Mode mode = Mode::Truncate, bool uf = true,
                        int extra = 0) {
  if (x == 0) return 0;
  const Q a = abs(x);
  const Q of = r_of(f, extra);
  Q q;
  if (a >= of) {
    q = of;
  } else if (uf && a < r_uf(f)) {
    return 0;
  } else {
    const long e = floor_log2(a);
    const Q ulp = pow2(e - f.M - extra);
    const Q steps = mode == Mode::Truncate ? floor_q(a / ulp) : nearest_q(a / ulp);
    q = steps * ulp;
    if (q > of) q = of;
  }
  return x < 0 ? Q(-q) : q;
}

struct FixedFmt {
  int B = 8;
  int b = 0;
};

inline Q quantize_fixed(const Q& x, const FixedFmt& f, Mode mode) {
  const Q lo = -pow2(f.B - f.b - 1);
  const Q hi = pow2(-f.b) * (pow2(f.B - 1) - 1);
  if (x <= lo) return lo;
  if (x >= hi) return hi;
  const Q scaled = x * pow2(f.b);
  Q r;
  if (mode == Mode::Truncate) {
    r = floor_q(abs(scaled));
    if (scaled < 0) r = -r;
  } else {
    r = nearest_q(abs(scaled));
    if (scaled < 0) r = -r;
  }
  return r * pow2(-f.b);
}

struct Config {
  Fmt prod;
  Fmt acc;
  int chunk = 16;
  bool uf = true;
  int extra = 0;
};

inline Q q_prod(const Config& c, const Q& p) { return quantize_float(p, c.prod, Mode::Truncate, c.uf); }
inline Q q_acc(const Config& c, const Q& v) {
  return quantize_float(v, c.acc, Mode::Truncate, c.uf, c.extra);
}

inline Q fmaq(const Config& c, const Q& x, const Q& w, const Q& s) {
  return q_acc(c, q_prod(c, x * w) + s);
}

/// One step of the accumulation with everything the estimators look at.
struct Step {
  Q partial;  // S_i
  Q product;  // x_i w_i
  Q result;   // FMAq(x_i, w_i, S_i)
  bool overflow = false;  // |Q_prod(x w) + S_i| >= R_OF
};

struct Run {
  Q value;
  std::vector<Step> steps;
  std::vector<bool> aggregation_overflow;  // per chunk
};

/// Step-by-step chunked accumulation: each chunk from 0 with FMAq, then the
/// chunk results folded in chunk order with Q_acc.
inline Run accumulate(const Config& c, const std::vector<Q>& x, const std::vector<Q>& w) {
  Run run;
  const std::size_t n = x.size();
  const std::size_t chunk = static_cast<std::size_t>(c.chunk);
  const Q of = r_of(c.acc, c.extra);
  Q total = 0;
  for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
    Q s = 0;
    for (std::size_t i = c0; i < std::min(n, c0 + chunk); ++i) {
      Step st;
      st.partial = s;
      st.product = x[i] * w[i];
      const Q pre = q_prod(c, st.product) + s;
      st.overflow = abs(pre) >= of;
      st.result = q_acc(c, pre);
      s = st.result;
      run.steps.push_back(st);
    }
    if (c0 == 0) {
      total = s;
      run.aggregation_overflow.push_back(false);
    } else {
      run.aggregation_overflow.push_back(abs(s + total) >= of);
      total = q_acc(c, s + total);
    }
  }
  run.value = total;
  return run;
}

enum class Ste { Identity, RecursiveOF, ImmediateOF, ImmediateDIFF };

inline std::vector<int> masks(const Config& c, const std::vector<Q>& x, const std::vector<Q>& w,
                              Ste kind, const Q& eps1, const Q& eps2) {
  const Run run = accumulate(c, x, w);
  const std::size_t n = x.size();
  const std::size_t chunk = static_cast<std::size_t>(c.chunk);
  std::vector<int> m(n, 1);
  if (kind == Ste::Identity) return m;
  for (std::size_t i = 0; i < n; ++i) {
    const Step& st = run.steps[i];
    if (kind == Ste::ImmediateDIFF) {
      m[i] = st.product != 0 && abs(st.result - st.partial) / (abs(st.product) + eps1) > eps2;
    } else {
      m[i] = !st.overflow;
    }
  }
  if (kind == Ste::RecursiveOF) {
    for (std::size_t c0 = 0, ci = 0; c0 < n; c0 += chunk, ++ci) {
      const std::size_t c1 = std::min(n, c0 + chunk);
      // last in-chunk overflow cuts everything up to and including it
      for (std::size_t i = c1; i-- > c0;) {
        if (run.steps[i].overflow) {
          for (std::size_t j = c0; j <= i; ++j) m[j] = 0;
          break;
        }
      }
      if (run.aggregation_overflow[ci])
        for (std::size_t j = 0; j < c1; ++j) m[j] = 0;
    }
  }
  return m;
}

}  // namespace oracle
