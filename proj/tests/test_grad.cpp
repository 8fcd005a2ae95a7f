#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "grad.hpp"
#include "oracle.hpp"

using namespace lba;

namespace {

oracle::Fmt to_oracle(const FloatFormat& f) { return {f.mantissa_bits, f.exponent_bits, f.bias}; }

oracle::Config to_oracle(const FmaqConfig& c) {
  return {to_oracle(c.prod_fmt), to_oracle(c.acc_fmt), c.chunk_size, c.underflow,
          c.acc_extra_mantissa};
}

oracle::Ste to_oracle(SteKind k) {
  switch (k) {
    case SteKind::Identity: return oracle::Ste::Identity;
    case SteKind::RecursiveOF: return oracle::Ste::RecursiveOF;
    case SteKind::ImmediateOF: return oracle::Ste::ImmediateOF;
    case SteKind::ImmediateDIFF: return oracle::Ste::ImmediateDIFF;
  }
  return oracle::Ste::Identity;
}

constexpr SteKind kAllKinds[] = {SteKind::Identity, SteKind::RecursiveOF, SteKind::ImmediateOF,
                                 SteKind::ImmediateDIFF};

// Small dyadic values: every product and every masked sum of a few dozen
// terms is exact in double, so the oracle can sum in rationals.
double dyadic(std::mt19937_64& rng, int max_num, int denom_log2) {
  const int k = static_cast<int>(rng() % (2 * max_num + 1)) - max_num;
  return std::ldexp(static_cast<double>(k), -denom_log2);
}

std::vector<int> oracle_masks(const FmaqConfig& cfg, const std::vector<double>& x,
                              const std::vector<double>& w, SteKind kind, const DiffParams& diff) {
  std::vector<oracle::Q> xs, ws;
  for (double v : x) xs.emplace_back(v);
  for (double v : w) ws.emplace_back(v);
  return oracle::masks(to_oracle(cfg), xs, ws, to_oracle(kind),
                       oracle::Q(diff.resolved_eps1(cfg)), oracle::Q(diff.eps2));
}

}  // namespace

TEST_CASE("ste kind names") {
  for (SteKind k : kAllKinds) CHECK(parse_ste_kind(to_string(k)) == k);
  CHECK(parse_ste_kind("recursive-of") == SteKind::RecursiveOF);
  CHECK_THROWS(parse_ste_kind("bogus"));
}

TEST_CASE("mask examples") {
  const FmaqConfig cfg = FmaqConfig::uniform({7, 4, 10});
  SUBCASE("overflow at the middle summand only") {
    const std::vector<double> x{40.0, 40.0, -30.0}, w{1.0, 1.0, 1.0};
    CHECK(compute_masks(x, w, cfg, SteKind::RecursiveOF) == std::vector<std::uint8_t>{0, 0, 1});
    CHECK(compute_masks(x, w, cfg, SteKind::ImmediateOF) == std::vector<std::uint8_t>{1, 0, 1});
  }
  SUBCASE("no events keeps every gradient") {
    const std::vector<double> x{1.0, 0.5, -2.0}, w{0.75, 2.0, 1.0};
    for (SteKind k : kAllKinds)
      CHECK(compute_masks(x, w, cfg, k) == std::vector<std::uint8_t>{1, 1, 1});
  }
  SUBCASE("full swamp clears the DIFF mask only") {
    const std::vector<double> x{32.0, 1.0 / 16}, w{1.0, 1.0 / 16};
    CHECK(compute_masks(x, w, cfg, SteKind::ImmediateDIFF) == std::vector<std::uint8_t>{1, 0});
    CHECK(compute_masks(x, w, cfg, SteKind::ImmediateOF) == std::vector<std::uint8_t>{1, 1});
  }
  SUBCASE("tiny exact products keep the DIFF mask without underflow") {
    FmaqConfig c = FmaqConfig::uniform({4, 3, 5});
    const std::vector<double> x{1.0 / 128, 1.0 / 256}, w{1.0, 1.0};
    c.underflow = false;
    CHECK(compute_masks(x, w, c, SteKind::ImmediateDIFF) == std::vector<std::uint8_t>{1, 1});
    c.underflow = true;
    CHECK(compute_masks(x, w, c, SteKind::ImmediateDIFF) == std::vector<std::uint8_t>{0, 0});
  }
  SUBCASE("aggregation overflow cuts all earlier chunks") {
    const FmaqConfig c2 = FmaqConfig::uniform({7, 4, 10}, 2);
    const std::vector<double> x{10.0, 10.0, 10.0, 10.0, 30.0, 1.0, 1.0, 1.0}, w(8, 1.0);
    // chunk sums 20, 20, 31, 2; total 20 -> 40 -> 71 (OF at chunk 2) -> 63.75 + 2 (OF again)
    const auto m = compute_masks(x, w, c2, SteKind::RecursiveOF);
    CHECK(m == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0, 0});
    const auto imm = compute_masks(x, w, c2, SteKind::ImmediateOF);
    CHECK(imm == std::vector<std::uint8_t>{1, 1, 1, 1, 1, 1, 1, 1});
    const std::vector<double> x2{10.0, 10.0, 10.0, 10.0, 30.0, 1.0, -10.0, -10.0};
    // total 20 -> 40 -> 71 (OF) -> 63.75 - 20: the last chunk keeps its gradient
    CHECK(compute_masks(x2, w, c2, SteKind::RecursiveOF) ==
          std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 1, 1});
  }
}

TEST_CASE("masks match the oracle") {
  std::mt19937_64 rng(31);
  const FmaqConfig configs[] = {FmaqConfig::uniform({4, 3, 5}, 4), FmaqConfig::uniform({4, 3, 5}, 16),
                                FmaqConfig::with_bias_rule({7, 4, 12}, 2),
                                FmaqConfig::with_bias_rule({3, 3, 3}, 8)};
  for (int trial = 0; trial < 400; ++trial) {
    FmaqConfig cfg = configs[trial % 4];
    cfg.underflow = trial % 3 != 0;
    const std::size_t n = 1 + rng() % 50;
    std::vector<double> x(n), w(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = dyadic(rng, 31, 3);
      w[i] = dyadic(rng, 31, 4);
    }
    DiffParams diff;
    if (trial % 5 == 0) diff.eps2 = 0.25;
    for (SteKind k : kAllKinds) {
      const auto got = compute_masks(x, w, cfg, k, diff);
      const auto want = oracle_masks(cfg, x, w, k, diff);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < n; ++i)
        REQUIRE_MESSAGE(int(got[i]) == want[i], "trial " << trial << " kind " << to_string(k) << " i " << i);
    }
  }
}

TEST_CASE("gemm backward matches the exact masked-sum oracle") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 200; ++trial) {
    FmaqConfig cfg = trial % 2 ? FmaqConfig::uniform({4, 3, 5}, 4)
                               : FmaqConfig::with_bias_rule({4, 3, 6}, 16);
    cfg.underflow = trial % 3 != 0;
    const std::size_t m = 1 + rng() % 6, k = 1 + rng() % 24, n = 1 + rng() % 14;
    Matrix<float> a(m, k), b(k, n);
    Matrix<double> g(m, n);
    for (float& v : a.values()) v = static_cast<float>(dyadic(rng, 31, 3));
    for (float& v : b.values()) v = static_cast<float>(dyadic(rng, 31, 4));
    for (double& v : g.values()) v = dyadic(rng, 7, 2);
    for (SteKind kind : kAllKinds) {
      const GemmGradients got = gemm_backward(a, b, g, cfg, kind);
      const GemmGradients got_d = gemm_backward(a.cast<double>(), b.cast<double>(), g, cfg, kind);
      std::vector<oracle::Q> ga(m * k), gb(k * n);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t l = 0; l < n; ++l) {
          std::vector<double> xs(k), ws(k);
          for (std::size_t i = 0; i < k; ++i) {
            xs[i] = a(r, i);
            ws[i] = b(i, l);
          }
          const auto mk = oracle_masks(cfg, xs, ws, kind, {});
          for (std::size_t i = 0; i < k; ++i) {
            if (!mk[i]) continue;
            ga[r * k + i] += oracle::Q(g(r, l)) * oracle::Q(ws[i]);
            gb[i * n + l] += oracle::Q(g(r, l)) * oracle::Q(xs[i]);
          }
        }
      for (std::size_t i = 0; i < m * k; ++i) {
        REQUIRE(got.grad_a.values()[i] == oracle::to_double(ga[i]));
        REQUIRE(got_d.grad_a.values()[i] == oracle::to_double(ga[i]));
      }
      for (std::size_t i = 0; i < k * n; ++i) {
        REQUIRE(got.grad_b.values()[i] == oracle::to_double(gb[i]));
        REQUIRE(got_d.grad_b.values()[i] == oracle::to_double(gb[i]));
      }
    }
  }
}

TEST_CASE("linear backward agrees with gemm backward") {
  std::mt19937_64 rng(33);
  const FmaqConfig cfg = FmaqConfig::uniform({4, 3, 5}, 4);
  Matrix<float> x(5, 19), w(11, 19);
  Matrix<double> g(5, 11);
  for (float& v : x.values()) v = static_cast<float>(dyadic(rng, 31, 3));
  for (float& v : w.values()) v = static_cast<float>(dyadic(rng, 31, 4));
  for (double& v : g.values()) v = dyadic(rng, 7, 2);
  for (SteKind kind : kAllKinds) {
    const GemmGradients lin = linear_backward(x, w, g, &cfg, kind);
    const GemmGradients gem = gemm_backward(x, w.transposed(), g, cfg, kind);
    CHECK(lin.grad_a == gem.grad_a);
    CHECK(lin.grad_b == gem.grad_b.transposed());
    const GemmGradients no_a = linear_backward(x, w, g, &cfg, kind, {}, false);
    CHECK(no_a.grad_a.empty());
    CHECK(no_a.grad_b == lin.grad_b);
  }
  // exact accumulation is the plain matmul backward
  const GemmGradients plain = linear_backward(x, w, g, nullptr, SteKind::RecursiveOF);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t i = 0; i < 19; ++i) {
      double s = 0.0;
      for (std::size_t l = 0; l < 11; ++l) s += g(r, l) * w(l, i);
      CHECK(plain.grad_a(r, i) == s);
    }
  CHECK(plain.grad_a == linear_backward(x, w, g, &cfg, SteKind::Identity).grad_a);
}

TEST_CASE("estimators coincide on event-free instances") {
  std::mt19937_64 rng(34);
  const FmaqConfig cfg = FmaqConfig::uniform({10, 5, 8});
  int instances = 0;
  while (instances < 100) {
    const std::size_t m = 1 + rng() % 4, k = 1 + rng() % 8, n = 1 + rng() % 10;
    Matrix<float> a(m, k), b(k, n);
    Matrix<double> g(m, n);
    // nonzero values on a 2^-2 grid: no product underflows at b = 8
    for (float& v : a.values()) v = static_cast<float>(std::ldexp(1 + rng() % 15, -2) * ((rng() & 1) ? 1 : -1));
    for (float& v : b.values()) v = static_cast<float>(std::ldexp(1 + rng() % 15, -2) * ((rng() & 1) ? 1 : -1));
    for (double& v : g.values()) v = dyadic(rng, 7, 2);
    std::vector<EventTrace> traces;
    const Matrix<double> y = gemm_forward(a, b, cfg, &traces);
    bool events = false;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t l = 0; l < n; ++l) {
        double exact = 0.0;
        for (std::size_t i = 0; i < k; ++i) exact += double(a(r, i)) * double(b(i, l));
        for (const auto& s : traces[r * n + l].summands)
          events = events || s.alpha != 1.0 || s.acc_overflow || s.prod_underflow;
        events = events || y(r, l) != exact;
      }
    if (events) continue;
    ++instances;
    const GemmGradients id = gemm_backward(a, b, g, cfg, SteKind::Identity);
    for (SteKind kind : kAllKinds) {
      const GemmGradients other = gemm_backward(a, b, g, cfg, kind);
      CHECK(other.grad_a == id.grad_a);
      CHECK(other.grad_b == id.grad_b);
    }
  }
}

TEST_CASE("alpha values") {
  const FmaqConfig cfg = FmaqConfig::uniform({7, 4, 10});
  const std::vector<double> x{0.0, 1.0, 32.0, 1.0 / 16, 3.0}, w{4.0, 0.5, 1.0, 1.0 / 16, 1.0};
  const auto alpha = alpha_values(x, w, cfg);
  CHECK(alpha[0] == 0.0);
  CHECK(alpha[1] == 1.0);
  CHECK(alpha[2] == 1.0);
  CHECK(alpha[3] == 0.0);  // fully swamped
  CHECK(alpha[4] == 1.0);

  // binarized alpha is the DIFF mask once eps1 is negligible
  std::mt19937_64 rng(35);
  const FmaqConfig c4 = FmaqConfig::uniform({4, 3, 5});
  DiffParams diff;
  diff.eps1 = std::ldexp(1.0, -200);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> xs(20), ws(20);
    for (std::size_t i = 0; i < 20; ++i) {
      xs[i] = dyadic(rng, 31, 3);
      ws[i] = dyadic(rng, 31, 4);
    }
    const auto a = alpha_values(xs, ws, c4);
    const auto mk = compute_masks(xs, ws, c4, SteKind::ImmediateDIFF, diff);
    for (std::size_t i = 0; i < 20; ++i) CHECK(int(mk[i]) == int(std::fabs(a[i]) > diff.eps2));
  }
}

TEST_CASE("diff mask under a wider accumulator") {
  // statistical: widening M can move a summand across the eps2 threshold in
  // either direction only through a changed partial sum, which is rare
  std::mt19937_64 rng(36);
  long ones = 0, flips = 0;
  for (int t = 0; t < 300; ++t) {
    std::vector<double> x(32), w(32);
    for (std::size_t i = 0; i < 32; ++i) {
      x[i] = dyadic(rng, 31, 3);
      w[i] = dyadic(rng, 31, 4);
    }
    const auto narrow = compute_masks(x, w, FmaqConfig::uniform({3, 4, 6}), SteKind::ImmediateDIFF);
    const auto wide = compute_masks(x, w, FmaqConfig::uniform({8, 4, 6}), SteKind::ImmediateDIFF);
    for (std::size_t i = 0; i < 32; ++i) {
      ones += narrow[i];
      flips += narrow[i] && !wide[i];
    }
  }
  MESSAGE("DIFF masks turned off by widening: " << flips << " of " << ones);
  CHECK(static_cast<double>(flips) < 0.02 * static_cast<double>(ones));
}

TEST_CASE("masked gradient against finite differences") {
  // Inputs on the M4 grid, h is one M4 ulp of the perturbed input. Where no
  // event changes, each forward value is off from the exact sum by at most
  // the accumulated truncation error, which bounds the difference quotient.
  std::mt19937_64 rng(37);
  const FmaqConfig cfg = FmaqConfig::uniform({10, 5, 14});
  const double rel = std::ldexp(1.0, -cfg.acc_fmt.mantissa_bits);
  int compared = 0;
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 4 + rng() % 28;
    std::vector<double> x(n), w(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = quantize_float(std::ldexp(1.0 + (rng() % 16) / 16.0, int(rng() % 6) - 3), {4, 3, 4});
      w[i] = quantize_float(std::ldexp(1.0 + (rng() % 16) / 16.0, int(rng() % 6) - 3), {4, 3, 4}) *
             ((rng() & 1) ? 1 : -1);
    }
    const std::size_t j = rng() % n;
    const double h = std::ldexp(1.0, std::ilogb(x[j]) - 4);
    auto xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    EventTrace tp, tm;
    const double yp = accumulate_chunked(xp, w, cfg, &tp);
    const double ym = accumulate_chunked(xm, w, cfg, &tm);
    bool overflow = false;
    double peak = 0.0;
    for (const auto* tr : {&tp, &tm})
      for (const auto& s : tr->summands) overflow = overflow || s.acc_overflow || s.prod_underflow;
    if (overflow) continue;
    double running = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      running += std::fabs(x[i] * w[i]) + h * std::fabs(w[i]);
      peak = std::max(peak, running);
    }
    const auto mk = compute_masks(x, w, cfg, SteKind::ImmediateDIFF);
    const double grad = mk[j] ? w[j] : 0.0;
    const double fd = (yp - ym) / (2 * h);
    const double bound = 2.0 * static_cast<double>(n) * rel * peak / h;
    CHECK_MESSAGE(std::fabs(fd - grad) <= bound, "t=" << t << " fd " << fd << " grad " << grad);
    ++compared;
  }
  CHECK(compared > 100);
}

TEST_CASE("convolution has no estimator") {
  Tensor4 in(1, 1, 3, 3), k(1, 1, 2, 2);
  CHECK_THROWS_AS(conv2d_backward(in, k, {}, FmaqConfig{}, SteKind::ImmediateOF),
                  UnsupportedOperation);
}
