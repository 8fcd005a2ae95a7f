// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance --work DIR [--only 1,4,...] [--reuse]
//
// Training criteria run lbasim on the bundled presets and write into DIR.
// --reuse skips a preset run whose summary.json already exists (for
// iterating on the checks; the ctest registration never passes it).

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fmaq.hpp"
#include "formats.hpp"
#include "gates.hpp"
#include "grad.hpp"
#include "nn.hpp"
#include "oracle.hpp"
#include "run.hpp"

using namespace lba;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Options {
  fs::path work = "acceptance-work";
  std::set<int> only;
  bool reuse = false;
};

Options g_opts;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pct(double v) { return fmt("%.2f%%", 100.0 * v); }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path preset(const std::string& name) { return fs::path(LBA_SOURCE_DIR) / "presets" / (name + ".json"); }

/// Runs one lbasim command, logging to out/lbasim.log. Returns the exit code.
int lbasim(const std::string& args, const fs::path& out) {
  fs::create_directories(out);
  const std::string cmd = std::string(LBASIM_PATH) + " " + args + " --out '" + out.string() + "' > '" +
                          (out / "lbasim.log").string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Trains a preset (unless reusable) and returns its summary.
json train_preset(const std::string& name, const fs::path& out, const std::string& extra = "") {
  if (!(g_opts.reuse && fs::exists(out / "summary.json"))) {
    fs::remove_all(out);
    const auto t0 = std::chrono::steady_clock::now();
    const int code = lbasim("train --config '" + preset(name).string() + "' " + extra, out);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "  " << name << " " << extra << ": exit " << code << " in " << fmt("%.0f", secs) << " s\n";
    if (code != 0) throw std::runtime_error("lbasim train " + name + " failed; see " + (out / "lbasim.log").string());
  }
  return json::parse(slurp(out / "summary.json"));
}

// ---------------------------------------------------------------------------
// 1. quantizer properties

Verdict quantizer_properties() {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> mant(1.0, 2.0);
  std::uint64_t violations = 0;
  std::string first;
  double current = 0.0;
  FloatFormat cur_fmt;
  auto fail = [&](const char* what) {
    if (violations++ == 0)
      first = std::string(what) + " M" + std::to_string(cur_fmt.mantissa_bits) + "E" +
              std::to_string(cur_fmt.exponent_bits) + "b" + std::to_string(cur_fmt.bias) + " x=" +
              fmt("%.17g", current);
  };
  int formats = 0;
  for (int M = 3; M <= 10; ++M)
    for (int E = 3; E <= 5; ++E) {
      const int def = 1 << (E - 1);
      for (int bias : {def - 3, def, def + 4}) {
        const FloatFormat f{M, E, bias};
        ++formats;
        const double r_of = f.overflow_threshold(), r_uf = f.underflow_threshold();
        std::uniform_int_distribution<int> exp(f.min_exponent() - 3, f.max_exponent() + 3);
        double prev = 0.0;
        for (int i = 0; i < 1'000'000; ++i) {
          double x = i % 97 == 0 ? 0.0 : std::ldexp(mant(rng), exp(rng));
          if (rng() & 1) x = -x;
          for (RoundMode mode : {RoundMode::Truncate, RoundMode::Nearest}) {
            const FloatQuantOptions o{mode, true, 0};
            const double q = quantize_float(x, f, o);
            current = x;
            cur_fmt = f;
            if (quantize_float(q, f, o) != q) fail("idempotence");
            if (quantize_float(-x, f, o) != -q) fail("sign symmetry");
            if (std::fabs(q) > r_of || (q != 0.0 && std::fabs(q) < r_uf)) fail("range");
            const double lo = std::min(prev, x), hi = std::max(prev, x);
            if (quantize_float(lo, f, o) > quantize_float(hi, f, o)) fail("monotonicity");
            const double up = std::nextafter(x, INFINITY);
            if (q > quantize_float(up, f, o)) fail("monotonicity (next)");
            // error bounds per event
            const double a = std::fabs(x), err = std::fabs(q - x);
            const QuantEvent ev = classify(x, f, o);
            if (a >= r_of) {
              if (std::fabs(q) != r_of || (a > r_of && ev.kind != EventKind::Overflow)) fail("overflow");
            } else if (a < r_uf) {
              if (q != 0.0 || err != a || (a > 0 && ev.kind != EventKind::Underflow)) fail("underflow");
            } else {
              const double bound = std::ldexp(a, mode == RoundMode::Truncate ? -M : -(M + 1));
              const bool ok = mode == RoundMode::Truncate ? err < bound && std::fabs(q) <= a : err <= bound;
              if (!ok) fail("swamp bound");
              if ((err == 0.0) != (ev.kind == EventKind::Exact)) fail("classification");
            }
          }
          prev = x;
        }
      }
    }
  return {violations == 0, std::to_string(formats) + " formats x 10^6 inputs x 2 modes, " +
                               std::to_string(violations) + " violations" +
                               (first.empty() ? "" : " (first: " + first + ")")};
}

// 2. single precision is the identity

Verdict single_precision() {
  std::mt19937_64 rng(102);
  const FloatFormat fp32{23, 8, 127};
  std::size_t mismatches = 0;
  for (int i = 0; i < 1'000'000; ++i) {
    const auto bits = static_cast<std::uint32_t>(rng());
    const std::uint32_t exp_field = 1 + static_cast<std::uint32_t>(rng() % 254);  // normal numbers
    const std::uint32_t word = (bits & 0x807fffffu) | (exp_field << 23);
    float v;
    std::memcpy(&v, &word, sizeof v);
    for (RoundMode mode : {RoundMode::Truncate, RoundMode::Nearest})
      mismatches += quantize_float(v, fp32, {mode, true, 0}) != static_cast<double>(v);
  }
  return {mismatches == 0, "10^6 normal floats, both rounding modes, " + std::to_string(mismatches) + " mismatches"};
}

// 3. full swamping

Verdict full_swamping() {
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t same = 0, same_ok = 0, opposite = 0, opposite_ok = 0, opposite_pred = 0;
  for (int i = 0; i < 100'000; ++i) {
    const int M = 3 + static_cast<int>(rng() % 8), E = 4 + static_cast<int>(rng() % 2);
    FmaqConfig cfg = FmaqConfig::uniform(FloatFormat::with_default_bias(M, E), 1);
    const FloatFormat f = cfg.acc_fmt;
    const Fmaq fma(cfg);
    // s in the upper half of the range so that p can sit above R_UF
    const int es = f.max_exponent() - static_cast<int>(rng() % (f.max_exponent() / 2 + 1));
    double s = quantize_float(std::ldexp(1.0 + unit(rng), es), f);
    double p;
    do {
      p = quantize_float(std::ldexp(std::fabs(s), -(M + 1)) * unit(rng) * std::ldexp(1.0, -int(rng() % 6)), f);
    } while (p == 0.0 || !(std::fabs(s) > std::ldexp(std::fabs(p), M + 1)));
    if (rng() & 1) s = -s;
    if (rng() & 1) p = -p;
    const double z = fma.add(p, s);
    if ((s > 0) == (p > 0)) {
      ++same;
      same_ok += z == s;
    } else {
      ++opposite;
      opposite_ok += z == s;
      opposite_pred += z == fma.add(std::copysign(std::ldexp(std::fabs(s), -60), p), s);
    }
  }
  const bool pass = same_ok + opposite_ok == same + opposite;
  return {pass, "returns s for " + std::to_string(same_ok) + "/" + std::to_string(same) + " same-sign and " +
                    std::to_string(opposite_ok) + "/" + std::to_string(opposite) +
                    " opposite-sign pairs; opposite-sign results equal the truncated predecessor of s in " +
                    std::to_string(opposite_pred) + "/" + std::to_string(opposite) + " cases"};
}

// 4. GEMM oracle equivalence

oracle::Fmt to_oracle(const FloatFormat& f) { return {f.mantissa_bits, f.exponent_bits, f.bias}; }
oracle::Config to_oracle(const FmaqConfig& c) {
  return {to_oracle(c.prod_fmt), to_oracle(c.acc_fmt), c.chunk_size, c.underflow, c.acc_extra_mantissa};
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

constexpr SteKind kKinds[] = {SteKind::Identity, SteKind::RecursiveOF, SteKind::ImmediateOF, SteKind::ImmediateDIFF};

// k 2^-shift with |k| <= 31: products and short masked sums stay exact in double
double dyadic(std::mt19937_64& rng, int shift) {
  const int k = static_cast<int>(rng() % 63) - 31;
  return std::ldexp(static_cast<double>(k), -shift);
}

Verdict gemm_oracle() {
  std::mt19937_64 rng(104);
  struct Family {
    FloatFormat prod;
    int lo, hi;  // operand scale exponents that reach both ends of the range
  };
  const Family families[] = {{{4, 3, 5}, 1, 6}, {{7, 4, 12}, -1, 9}, {{10, 5, 16}, -6, 12}};
  std::size_t fwd_bad = 0, bwd_bad = 0, elements = 0, events = 0;
  for (int t = 0; t < 1000; ++t) {
    const Family& fam = families[t % 3];
    FmaqConfig cfg = FmaqConfig::with_bias_rule(fam.prod, 1 << (rng() % 4));
    cfg.underflow = rng() % 4 != 0;
    const std::size_t m = 1 + rng() % 8, k = 1 + rng() % 8, n = 1 + rng() % 8;
    const int sa = fam.lo + static_cast<int>(rng() % (fam.hi - fam.lo + 1));
    const int sb = fam.lo + static_cast<int>(rng() % (fam.hi - fam.lo + 1));
    Matrix<float> a(m, k), b(k, n);
    Matrix<double> g(m, n);
    for (float& v : a.values()) v = static_cast<float>(dyadic(rng, sa));
    for (float& v : b.values()) v = static_cast<float>(dyadic(rng, sb));
    for (double& v : g.values()) v = dyadic(rng, 3);
    const Matrix<double> y = gemm_forward(a, b, cfg);
    const Matrix<double> yd = gemm_forward(a.cast<double>(), b.cast<double>(), cfg);
    const oracle::Config oc = to_oracle(cfg);
    std::vector<std::vector<oracle::Q>> xs(m), ws(n);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t i = 0; i < k; ++i) xs[r].emplace_back(static_cast<double>(a(r, i)));
    for (std::size_t l = 0; l < n; ++l)
      for (std::size_t i = 0; i < k; ++i) ws[l].emplace_back(static_cast<double>(b(i, l)));
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t l = 0; l < n; ++l) {
        const oracle::Run run = oracle::accumulate(oc, xs[r], ws[l]);
        const double want = oracle::to_double(run.value);
        fwd_bad += y(r, l) != want || yd(r, l) != want;
        ++elements;
        oracle::Q exact = 0;
        for (std::size_t i = 0; i < k; ++i) exact += xs[r][i] * ws[l][i];
        events += run.value != exact;
      }
    for (SteKind kind : kKinds) {
      const GemmGradients got = gemm_backward(a, b, g, cfg, kind);
      const GemmGradients got_d = gemm_backward(a.cast<double>(), b.cast<double>(), g, cfg, kind);
      std::vector<oracle::Q> ga(m * k), gb(k * n);
      const DiffParams diff{};
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t l = 0; l < n; ++l) {
          const auto mask = oracle::masks(oc, xs[r], ws[l], to_oracle(kind), oracle::Q(diff.resolved_eps1(cfg)),
                                          oracle::Q(diff.eps2));
          for (std::size_t i = 0; i < k; ++i) {
            if (!mask[i]) continue;
            ga[r * k + i] += oracle::Q(g(r, l)) * ws[l][i];
            gb[i * n + l] += oracle::Q(g(r, l)) * xs[r][i];
          }
        }
      for (std::size_t i = 0; i < m * k; ++i) {
        const double want = oracle::to_double(ga[i]);
        bwd_bad += got.grad_a.values()[i] != want || got_d.grad_a.values()[i] != want;
      }
      for (std::size_t i = 0; i < k * n; ++i) {
        const double want = oracle::to_double(gb[i]);
        bwd_bad += got.grad_b.values()[i] != want || got_d.grad_b.values()[i] != want;
      }
    }
  }
  return {fwd_bad == 0 && bwd_bad == 0,
          "1000 GEMMs (M4E3/M7E4/M10E5, chunks 1-8), " + std::to_string(elements) + " outputs (" +
              std::to_string(events) + " inexact), forward mismatches " + std::to_string(fwd_bad) +
              ", backward mismatches " + std::to_string(bwd_bad) + " over 4 estimators"};
}

// 5. estimator degeneracy

Verdict degeneracy() {
  std::mt19937_64 rng(105);
  const FmaqConfig cfg = FmaqConfig::uniform({10, 5, 8});
  std::size_t instances = 0, attempts = 0, differing = 0;
  while (instances < 1000) {
    ++attempts;
    const std::size_t m = 1 + rng() % 6, k = 1 + rng() % 8, n = 1 + rng() % 6;
    Matrix<float> a(m, k), b(k, n);
    Matrix<double> g(m, n);
    // nonzero multiples of 2^-2: products are at least 2^-4 > 2^-8
    auto draw = [&] { return static_cast<float>(std::ldexp(1 + rng() % 15, -2) * ((rng() & 1) ? 1 : -1)); };
    for (float& v : a.values()) v = draw();
    for (float& v : b.values()) v = draw();
    for (double& v : g.values()) v = dyadic(rng, 3);
    std::vector<EventTrace> traces;
    const Matrix<double> y = gemm_forward(a, b, cfg, &traces);
    bool events = false;
    for (std::size_t r = 0; r < m && !events; ++r)
      for (std::size_t l = 0; l < n && !events; ++l) {
        double exact = 0.0;
        for (std::size_t i = 0; i < k; ++i) exact += double(a(r, i)) * double(b(i, l));
        for (const auto& s : traces[r * n + l].summands)
          events = events || s.alpha != 1.0 || s.acc_overflow || s.prod_underflow;
        events = events || y(r, l) != exact;
      }
    if (events) continue;
    ++instances;
    const GemmGradients id = gemm_backward(a, b, g, cfg, SteKind::Identity);
    for (SteKind kind : kKinds) {
      const GemmGradients other = gemm_backward(a, b, g, cfg, kind);
      differing += !(other.grad_a == id.grad_a && other.grad_b == id.grad_b);
    }
  }
  return {differing == 0, "1000 event-free instances (" + std::to_string(attempts) + " drawn), " +
                              std::to_string(differing) + " estimator/identity differences"};
}

// 6. MNIST estimator comparison

Verdict mnist_estimators() {
  struct Row {
    const char* preset;
    const char* label;
    bool at_least;
    double threshold;
  };
  const Row rows[] = {{"mnist-baseline", "baseline", true, 0.96},
                      {"mnist-m4e3-identity", "identity", false, 0.50},
                      {"mnist-m4e3-recursive-of", "recursive-of", true, 0.90},
                      {"mnist-m4e3-immediate-of", "immediate-of", true, 0.90},
                      {"mnist-m4e3-immediate-diff-nouf", "immediate-diff/no-uf", true, 0.88}};
  bool pass = true;
  std::string detail;
  for (const Row& r : rows) {
    const json s = train_preset(r.preset, g_opts.work / "c6" / r.preset);
    const double acc = s.at("final_eval_acc").get<double>();
    const bool ok = r.at_least ? acc >= r.threshold : acc < r.threshold;
    pass = pass && ok;
    if (!detail.empty()) detail += ", ";
    detail += std::string(r.label) + " " + pct(acc) + (r.at_least ? " (>= " : " (< ") + pct(r.threshold) + ")" +
              (ok ? "" : " MISSED");
  }
  return {pass, detail};
}

// 7. two-stage schedule

Verdict two_stage() {
  const json dual = train_preset("two-stage-dual-m7e4", g_opts.work / "c7" / "dual");
  const json single = train_preset("two-stage-single-m7e4", g_opts.work / "c7" / "single");
  const double acc_dual = dual.at("final_eval_acc"), acc_single = single.at("final_eval_acc");
  const double after_stage1 = dual.at("stages")[0].at("final_stuck_rate");
  const double final_rate = dual.at("final_stuck_rate");

  // stuck rate of the same initialization before any training
  const RunConfig cfg = load_run_config(preset("two-stage-dual-m7e4"));
  const LoadedData data = load_data(cfg.data);
  const Mlp init = build_model(cfg);
  const double initial = stuck_underflow_rate(init, data.train.head(cfg.train.stuck_samples).features);

  const bool acc_ok = acc_dual >= acc_single - 0.005;
  const bool rate_ok = after_stage1 > 0.0 && after_stage1 < initial;
  return {acc_ok && rate_ok, "dual " + pct(acc_dual) + " vs single " + pct(acc_single) + " (needs >= single - 0.5 pp)" +
                                 "; stuck rate " + fmt("%.4f", initial) + " at init -> " + fmt("%.4f", after_stage1) +
                                 " after the no-UF stage -> " + fmt("%.4f", final_rate) + " at the end"};
}

// 8. bias rule

Verdict bias_rule() {
  const FmaqConfig cfg = FmaqConfig::with_bias_rule({7, 4, 12}, 16);
  return {cfg.acc_fmt.bias == 10, "prod b=12, chunk 16 -> acc b=" + std::to_string(cfg.acc_fmt.bias)};
}

// 9. gate model

Verdict gate_model() {
  const auto rows = gate_ratio_report({{4, 3, 23, 8}, {4, 3, 10, 5}, {4, 3, 7, 4}});
  const bool columns = rows[0].params.canvas_bits() == 47 && rows[1].params.canvas_bits() == 21 &&
                       rows[2].params.canvas_bits() == 15 && rows[0].params.shift_bits() == 6 &&
                       rows[1].params.shift_bits() == 5 && rows[2].params.shift_bits() == 4;
  const bool ratios = std::fabs(rows[1].ratio_percent - 49.0) <= 5.0 && std::fabs(rows[2].ratio_percent - 37.0) <= 5.0;
  return {columns && ratios, "F 47/21/15 and shift 6/5/4 " + std::string(columns ? "match" : "DIFFER") +
                                 "; ratios " + fmt("%.1f%%", rows[1].ratio_percent) + " (49 +- 5), " +
                                 fmt("%.1f%%", rows[2].ratio_percent) + " (37 +- 5)"};
}

// 10. zero-shot sweeps

Verdict zeroshot() {
  const std::string dir = std::string(LBA_SOURCE_DIR) + "/data/mnist/";
  const Dataset train_set = load_idx(dir + "train-images-idx3-ubyte.gz", dir + "train-labels-idx1-ubyte.gz");
  const Dataset eval_set = load_idx(dir + "t10k-images-idx3-ubyte.gz", dir + "t10k-labels-idx1-ubyte.gz");
  // mantissa sweep ends with M23E8 as the widest point
  const std::vector<int> mantissas{2, 3, 4, 5, 6, 7, 8, 9, 10, 23};
  const std::vector<int> biases{2, 4, 6, 8, 10, 12, 14, 16, 18};
  constexpr int kSeeds = 5;
  std::vector<std::vector<double>> acc_m(mantissas.size()), acc_b(biases.size());
  double fp = 0.0;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    Mlp model = Mlp::create({784, 64, 64, 10}, static_cast<std::uint64_t>(seed));
    TrainSchedule sched;
    sched.stages.push_back({"pretrain", 3, 1e-3, 0.0, LrShape::Constant, 0.95, true});
    TrainOptions opts;
    opts.seed = static_cast<std::uint64_t>(seed);
    train(model, train_set, eval_set, sched, opts);
    fp += zeroshot_accuracy(model, eval_set, std::nullopt) / kSeeds;
    for (std::size_t i = 0; i < mantissas.size(); ++i) {
      const FloatFormat f = mantissas[i] == 23 ? FloatFormat{23, 8, 127} : FloatFormat{mantissas[i], 5, 16};
      acc_m[i].push_back(zeroshot_accuracy(model, eval_set, FmaqConfig::with_bias_rule(f)));
    }
    for (std::size_t i = 0; i < biases.size(); ++i)
      acc_b[i].push_back(zeroshot_accuracy(model, eval_set, FmaqConfig::with_bias_rule({7, 4, biases[i]})));
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); };

  // Seed-averaged accuracy may rise by at most one evaluation sample when
  // the mantissa narrows: on the accuracy plateau single-sample flips
  // dominate the differences.
  const double tolerance = 1.0 / static_cast<double>(eval_set.size());
  bool strict = true, monotone = true;
  double worst = 0.0;
  for (std::size_t i = 1; i < mantissas.size(); ++i) {
    const double rise = mean(acc_m[i - 1]) - mean(acc_m[i]);
    strict = strict && rise <= 0.0;
    monotone = monotone && rise <= tolerance;
    worst = std::max(worst, rise);
  }
  monotone = monotone && mean(acc_m.back()) > mean(acc_m.front());
  std::vector<double> by_b;
  for (const auto& v : acc_b) by_b.push_back(mean(v));
  const auto best = static_cast<std::size_t>(std::max_element(by_b.begin(), by_b.end()) - by_b.begin());
  const bool interior = by_b[best] > by_b.front() && by_b[best] > by_b.back();

  std::string detail = "mean of " + std::to_string(kSeeds) + " seeds, FP " + pct(fp) + "; M:";
  for (std::size_t i = 0; i < mantissas.size(); ++i)
    detail += " " + std::to_string(mantissas[i]) + "=" + pct(mean(acc_m[i]));
  detail += strict ? " (strictly non-increasing)"
                   : std::string(monotone ? " (non-increasing within one eval sample" : " (NOT monotone") +
                         ", largest rise " + fmt("%.3f", 100.0 * worst) + " pp, tolerance " +
                         fmt("%.3f", 100.0 * tolerance) + " pp)";
  detail += "; M7E4 bias:";
  for (std::size_t i = 0; i < biases.size(); ++i) detail += " " + std::to_string(biases[i]) + "=" + pct(by_b[i]);
  detail += interior ? ", best b=" + std::to_string(biases[best]) + " is interior" : ", maximum at an end";

  std::ofstream csv(g_opts.work / "c10-zeroshot.csv");
  csv << "sweep,value,seed,accuracy\n";
  for (std::size_t i = 0; i < mantissas.size(); ++i)
    for (int s = 0; s < kSeeds; ++s) csv << "mantissa," << mantissas[i] << ',' << s + 1 << ',' << acc_m[i][s] << '\n';
  for (std::size_t i = 0; i < biases.size(); ++i)
    for (int s = 0; s < kSeeds; ++s) csv << "bias," << biases[i] << ',' << s + 1 << ',' << acc_b[i][s] << '\n';
  return {monotone && interior, detail};
}

// 11. reproducibility

Verdict reproducibility() {
  const fs::path base = g_opts.work / "c11";
  std::vector<std::string> notes;
  bool pass = true;
  auto compare = [&](const std::string& what, const fs::path& a, const fs::path& b) {
    const std::string x = slurp(a), y = slurp(b);
    const bool same = !x.empty() && x == y;
    pass = pass && same;
    notes.push_back(what + (same ? " identical" : " DIFFER"));
  };

  // synthetic preset: train, zero-shot and landscape, threads 1 vs 4
  for (const auto& [tag, threads] : {std::pair{"t1", 1}, std::pair{"t4", 4}, std::pair{"t1-again", 1}}) {
    const fs::path out = base / "smoke" / tag;
    fs::remove_all(out);
    const std::string cfg = "--config '" + preset("smoke-synthetic").string() + "' --threads " + std::to_string(threads);
    int code = lbasim("train " + cfg, out);
    code |= lbasim("zeroshot " + cfg + " --checkpoint '" + (out / "checkpoint.lba").string() + "'", out);
    code |= lbasim("landscape " + cfg + " --checkpoint '" + (out / "checkpoint.lba").string() + "'", out);
    if (code != 0) throw std::runtime_error("smoke preset failed; see " + (out / "lbasim.log").string());
  }
  for (const char* file : {"metrics.csv", "zeroshot.csv", "landscape_full.csv", "checkpoint.lba"}) {
    compare(std::string("smoke ") + file + " (1 vs 4 threads)", base / "smoke" / "t1" / file, base / "smoke" / "t4" / file);
    compare(std::string("smoke ") + file + " (rerun)", base / "smoke" / "t1" / file, base / "smoke" / "t1-again" / file);
  }

  // an MNIST preset against the single-thread run from criterion 6
  const fs::path c6 = g_opts.work / "c6" / "mnist-m4e3-immediate-of";
  train_preset("mnist-m4e3-immediate-of", c6);
  train_preset("mnist-m4e3-immediate-of", base / "immediate-of-t3", "--threads 3");
  compare("mnist-m4e3-immediate-of metrics.csv (1 vs 3 threads)", c6 / "metrics.csv", base / "immediate-of-t3" / "metrics.csv");

  // gate report preset
  for (const char* tag : {"a", "b"})
    if (lbasim("gates --config '" + preset("gates").string() + "'", base / "gates" / tag) != 0)
      throw std::runtime_error("gates preset failed");
  compare("gates.csv", base / "gates" / "a" / "gates.csv", base / "gates" / "b" / "gates.csv");

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {pass, detail};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--work" && i + 1 < argc) {
      g_opts.work = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string item; std::getline(ss, item, ',');) g_opts.only.insert(std::stoi(item));
    } else if (arg == "--reuse") {
      g_opts.reuse = true;
    } else {
      std::cerr << "usage: acceptance --work DIR [--only 1,2,...] [--reuse]\n";
      return 2;
    }
  }
  fs::create_directories(g_opts.work);
  g_opts.work = fs::absolute(g_opts.work);

  const std::vector<Criterion> criteria{
      {1, "quantizer properties", quantizer_properties},
      {2, "single-precision subsumption", single_precision},
      {3, "full-swamping law", full_swamping},
      {4, "GEMM oracle equivalence", gemm_oracle},
      {5, "estimator degeneracy", degeneracy},
      {6, "MNIST estimator comparison", mnist_estimators},
      {7, "two-stage schedule", two_stage},
      {8, "bias rule", bias_rule},
      {9, "gate model", gate_model},
      {10, "zero-shot sweeps", zeroshot},
      {11, "reproducibility", reproducibility},
  };
  std::ofstream report(g_opts.work / "acceptance.txt");
  int failed = 0;
  for (const auto& c : criteria) {
    if (!g_opts.only.empty() && !g_opts.only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !v.pass;
    char head[96];
    std::snprintf(head, sizeof head, "%s  criterion %2d  %-30s", v.pass ? "PASS" : "FAIL", c.id, c.name);
    const std::string line = std::string(head) + " " + v.detail + " [" + fmt("%.1f", secs) + " s]";
    std::cout << line << std::endl;
    report << line << '\n';
  }
  return failed == 0 ? 0 : 1;
}
