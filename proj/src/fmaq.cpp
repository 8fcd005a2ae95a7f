#include "fmaq.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <ostream>
#include <type_traits>

#include "lanes.hpp"
#include "lanes_avx2.hpp"
#include "parallel.hpp"

namespace lba {

namespace {

int log2_exact(int v) { return std::countr_zero(static_cast<unsigned>(v)); }

bool is_power_of_two(int v) { return v > 0 && std::has_single_bit(static_cast<unsigned>(v)); }

}  // namespace

FmaqConfig FmaqConfig::with_bias_rule(const FloatFormat& prod_fmt, int chunk_size) {
  return with_bias_rule(prod_fmt, prod_fmt.mantissa_bits, prod_fmt.exponent_bits, chunk_size);
}

FmaqConfig FmaqConfig::with_bias_rule(const FloatFormat& prod_fmt, int acc_mantissa,
                                      int acc_exponent, int chunk_size) {
  if (!is_power_of_two(chunk_size))
    throw std::invalid_argument("chunk size must be a power of two, got " +
                                std::to_string(chunk_size));
  FmaqConfig cfg;
  cfg.prod_fmt = prod_fmt;
  cfg.acc_fmt = {acc_mantissa, acc_exponent, prod_fmt.bias - log2_exact(chunk_size) / 2};
  cfg.chunk_size = chunk_size;
  cfg.validate();
  return cfg;
}

FmaqConfig FmaqConfig::uniform(const FloatFormat& fmt, int chunk_size) {
  FmaqConfig cfg;
  cfg.prod_fmt = fmt;
  cfg.acc_fmt = fmt;
  cfg.chunk_size = chunk_size;
  cfg.validate();
  return cfg;
}

void FmaqConfig::validate() const {
  prod_fmt.validate();
  acc_fmt.validate(acc_extra_mantissa);
  if (!is_power_of_two(chunk_size))
    throw std::invalid_argument("chunk size must be a power of two, got " +
                                std::to_string(chunk_size));
}

double DiffParams::resolved_eps1(const FmaqConfig&) const {
  return std::isnan(eps1) ? static_cast<double>(std::numeric_limits<float>::min()) : eps1;
}

namespace {
const FmaqConfig& validated(const FmaqConfig& cfg) {
  cfg.validate();
  return cfg;
}
}  // namespace

Fmaq::Fmaq(const FmaqConfig& cfg)
    : cfg_(validated(cfg)),
      prod_(cfg.prod_fmt, cfg.underflow),
      acc_(cfg.acc_fmt, cfg.underflow, cfg.acc_extra_mantissa) {}

double fmaq(double x, double w, double s, const FmaqConfig& cfg) { return Fmaq(cfg)(x, w, s); }

using detail::quantized_product;

template <typename T>
double accumulate_series(Strided<T> x, Strided<T> w, std::size_t n, const Fmaq& unit) {
  const std::size_t chunk = static_cast<std::size_t>(unit.config().chunk_size);
  double total = 0.0;
  for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
    const std::size_t c1 = std::min(n, c0 + chunk);
    double s = 0.0;
    for (std::size_t i = c0; i < c1; ++i) {
      const T xi = x[i];
      const T wi = w[i];
      if (xi == T{0} || wi == T{0}) continue;  // Q_acc(0 + s) == s
      const double qp = quantized_product(unit, xi, wi);
      if (qp == 0.0) continue;
      s = unit.add(qp, s);
    }
    if (c0 == 0)
      total = s;
    else if (s != 0.0)
      total = unit.add(s, total);
  }
  return total;
}

template <typename T>
double accumulate_series_traced(Strided<T> x, Strided<T> w, std::size_t n, const Fmaq& unit,
                                const DiffParams& diff, EventTrace& trace) {
  const std::size_t chunk = static_cast<std::size_t>(unit.config().chunk_size);
  const std::size_t chunks = (n + chunk - 1) / chunk;
  const double eps1 = diff.resolved_eps1(unit.config());
  trace.chunk_size = chunk;
  trace.summands.assign(n, {});
  trace.aggregation_overflow.assign(chunks, false);
  trace.chunk_last_overflow.assign(chunks, -1);

  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t c0 = c * chunk;
    const std::size_t c1 = std::min(n, c0 + chunk);
    double s = 0.0;
    for (std::size_t i = c0; i < c1; ++i) {
      const double xi = static_cast<double>(x[i]);
      const double wi = static_cast<double>(w[i]);
      const double exact = xi * wi;
      const double qp = quantized_product(unit, x[i], w[i]);
      const double z = unit.add(qp, s);
      SummandRecord& rec = trace.summands[i];
      rec.prod_underflow = exact != 0.0 && qp == 0.0;
      rec.acc_overflow = unit.overflows(qp, s);
      if (exact != 0.0) {
        rec.alpha = (z - s) / exact;
        rec.diff_bit = std::fabs(z - s) / (std::fabs(exact) + eps1) > diff.eps2;
      }
      if (rec.acc_overflow) trace.chunk_last_overflow[c] = static_cast<std::ptrdiff_t>(i);
      s = z;
    }
    if (c == 0) {
      total = s;
    } else {
      trace.aggregation_overflow[c] = unit.overflows(s, total);
      total = unit.add(s, total);
    }
  }
  // An overflow while aggregating chunk c cuts the gradient of every chunk
  // already folded into the total.
  bool cut = false;
  for (std::size_t c = chunks; c-- > 0;) {
    if (trace.aggregation_overflow[c]) cut = true;
    if (cut) {
      const std::size_t end = std::min(n, (c + 1) * chunk);
      trace.chunk_last_overflow[c] = static_cast<std::ptrdiff_t>(end) - 1;
    }
  }
  return total;
}

double accumulate_chunked(std::span<const double> x, std::span<const double> w,
                          const FmaqConfig& cfg, EventTrace* trace, const DiffParams& diff) {
  if (x.size() != w.size())
    throw ShapeError("series length mismatch: " + std::to_string(x.size()) + " vs " +
                     std::to_string(w.size()));
  const Fmaq unit(cfg);
  const Strided<double> xs{x.data(), 1};
  const Strided<double> ws{w.data(), 1};
  if (trace != nullptr) return accumulate_series_traced(xs, ws, x.size(), unit, diff, *trace);
  return accumulate_series(xs, ws, x.size(), unit);
}

namespace {

template <typename T>
Matrix<double> gemm_strided(const T* a, std::size_t m, std::size_t k, std::ptrdiff_t a_row,
                            std::ptrdiff_t a_col, const T* b, std::size_t n, std::ptrdiff_t b_row,
                            std::ptrdiff_t b_col, const FmaqConfig& cfg,
                            std::vector<EventTrace>* traces, const DiffParams& diff) {
  // a(r, i) = a[r * a_row + i * a_col]; b(i, l) = b[i * b_row + l * b_col]
  const Fmaq unit(cfg);
  Matrix<double> y(m, n);
  if (traces == nullptr) {
    const std::size_t blocks = (n + detail::kLanes - 1) / detail::kLanes;
    std::vector<double> packed;
    if constexpr (std::is_same_v<T, float>) {
      if (detail::avx2_available()) packed = detail::pack_lanes(b, k, n, b_row, b_col);
    }
    parallel_for(m * blocks, [&](std::size_t begin, std::size_t end) {
      for (std::size_t task = begin; task < end; ++task) {
        const std::size_t r = task / blocks;
        const std::size_t blk = task % blocks;
        const std::size_t l0 = blk * detail::kLanes;
        const Strided<T> xs{a + static_cast<std::ptrdiff_t>(r) * a_row, a_col};
        if (l0 + detail::kLanes <= n && !packed.empty()) {
          if constexpr (std::is_same_v<T, float>)
            detail::accumulate_lanes_avx2(xs, packed.data() + blk * k * detail::kLanes, k, unit,
                                          &y(r, l0));
        } else if (l0 + detail::kLanes <= n) {
          Strided<T> ws[detail::kLanes];
          for (std::size_t j = 0; j < detail::kLanes; ++j)
            ws[j] = {b + static_cast<std::ptrdiff_t>(l0 + j) * b_col, b_row};
          detail::accumulate_lanes(xs, ws, k, unit, &y(r, l0));
        } else {
          for (std::size_t l = l0; l < n; ++l)
            y(r, l) = accumulate_series(Strided<T>{xs}, Strided<T>{b + static_cast<std::ptrdiff_t>(l) * b_col, b_row}, k, unit);
        }
      }
    });
    return y;
  }
  traces->assign(m * n, {});
  parallel_for(m * n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t o = begin; o < end; ++o) {
      const std::size_t r = o / n;
      const std::size_t l = o % n;
      const Strided<T> xs{a + static_cast<std::ptrdiff_t>(r) * a_row, a_col};
      const Strided<T> ws{b + static_cast<std::ptrdiff_t>(l) * b_col, b_row};
      y(r, l) = traces != nullptr
                    ? accumulate_series_traced(xs, ws, k, unit, diff, (*traces)[o])
                    : accumulate_series(xs, ws, k, unit);
    }
  });
  return y;
}

}  // namespace

template <typename T>
Matrix<double> gemm_forward(const Matrix<T>& a, const Matrix<T>& b, const FmaqConfig& cfg,
                            std::vector<EventTrace>* traces, const DiffParams& diff) {
  if (a.cols() != b.rows())
    throw ShapeError("gemm inner dimensions differ: " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()));
  return gemm_strided(a.data(), a.rows(), a.cols(), static_cast<std::ptrdiff_t>(a.cols()), 1,
                      b.data(), b.cols(), static_cast<std::ptrdiff_t>(b.cols()), 1, cfg, traces,
                      diff);
}

template <typename T>
Matrix<double> linear_forward(const Matrix<T>& x, const Matrix<T>& w, const FmaqConfig& cfg) {
  if (x.cols() != w.cols())
    throw ShapeError("linear layer expects " + std::to_string(w.cols()) + " inputs, got " +
                     std::to_string(x.cols()));
  return gemm_strided(x.data(), x.rows(), x.cols(), static_cast<std::ptrdiff_t>(x.cols()), 1,
                      w.data(), w.rows(), 1, static_cast<std::ptrdiff_t>(w.cols()), cfg, nullptr,
                      {});
}

template <typename T>
Matrix<double> linear_forward_exact(const Matrix<T>& x, const Matrix<T>& w) {
  if (x.cols() != w.cols())
    throw ShapeError("linear layer expects " + std::to_string(w.cols()) + " inputs, got " +
                     std::to_string(x.cols()));
  const std::size_t n = w.rows();
  Matrix<double> y(x.rows(), n);
  parallel_for(x.rows() * n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t o = begin; o < end; ++o) {
      const auto xr = x.row(o / n);
      const auto wr = w.row(o % n);
      double s = 0.0;
      for (std::size_t i = 0; i < xr.size(); ++i)
        s += static_cast<double>(xr[i]) * static_cast<double>(wr[i]);
      y(o / n, o % n) = s;
    }
  });
  return y;
}

Matrix<double> im2col(const Tensor4& input, std::size_t image, std::size_t kernel_h,
                      std::size_t kernel_w, const ConvGeometry& geom) {
  if (geom.stride == 0) throw ShapeError("convolution stride must be positive");
  const std::size_t ph = input.h + 2 * geom.padding;
  const std::size_t pw = input.w + 2 * geom.padding;
  if (kernel_h == 0 || kernel_w == 0 || kernel_h > ph || kernel_w > pw)
    throw ShapeError("kernel larger than padded input");
  const std::size_t oh = (ph - kernel_h) / geom.stride + 1;
  const std::size_t ow = (pw - kernel_w) / geom.stride + 1;
  Matrix<double> cols(input.c * kernel_h * kernel_w, oh * ow);
  for (std::size_t ch = 0; ch < input.c; ++ch)
    for (std::size_t ky = 0; ky < kernel_h; ++ky)
      for (std::size_t kx = 0; kx < kernel_w; ++kx) {
        const std::size_t row = (ch * kernel_h + ky) * kernel_w + kx;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * geom.stride + ky) -
                            static_cast<std::ptrdiff_t>(geom.padding);
            const auto ix = static_cast<std::ptrdiff_t>(ox * geom.stride + kx) -
                            static_cast<std::ptrdiff_t>(geom.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(input.h) &&
                                ix < static_cast<std::ptrdiff_t>(input.w);
            cols(row, oy * ow + ox) =
                inside ? input.at(image, ch, static_cast<std::size_t>(iy),
                                  static_cast<std::size_t>(ix))
                       : 0.0;
          }
      }
  return cols;
}

Tensor4 conv2d_forward(const Tensor4& input, const Tensor4& kernel, const ConvGeometry& geom,
                       const FmaqConfig& cfg, std::vector<EventTrace>* traces) {
  if (traces != nullptr)
    throw UnsupportedOperation("event tracing is not available for convolutions");
  if (kernel.c != input.c)
    throw ShapeError("kernel expects " + std::to_string(kernel.c) + " input channels, got " +
                     std::to_string(input.c));
  if (geom.stride == 0 || kernel.h == 0 || kernel.w == 0 ||
      kernel.h > input.h + 2 * geom.padding || kernel.w > input.w + 2 * geom.padding)
    throw ShapeError("kernel does not fit the padded input");
  const Matrix<double> weights(kernel.n, kernel.c * kernel.h * kernel.w, kernel.data);
  const std::size_t oh = (input.h + 2 * geom.padding - kernel.h) / geom.stride + 1;
  const std::size_t ow = (input.w + 2 * geom.padding - kernel.w) / geom.stride + 1;
  Tensor4 out(input.n, kernel.n, oh, ow);
  for (std::size_t img = 0; img < input.n; ++img) {
    const Matrix<double> cols = im2col(input, img, kernel.h, kernel.w, geom);
    const Matrix<double> y = gemm_forward(weights, cols, cfg);
    std::copy(y.values().begin(), y.values().end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(img * kernel.n * oh * ow));
  }
  return out;
}

void write_trace_csv(std::ostream& os, const std::vector<EventTrace>& traces, std::size_t cols) {
  os << "out_row,out_col,i,prod_uf,diff_bit,alpha,last_of_index\n";
  const auto old_precision = os.precision(17);
  for (std::size_t o = 0; o < traces.size(); ++o) {
    const EventTrace& t = traces[o];
    for (std::size_t i = 0; i < t.summands.size(); ++i) {
      const SummandRecord& r = t.summands[i];
      os << o / cols << ',' << o % cols << ',' << i << ',' << int(r.prod_underflow) << ','
         << int(r.diff_bit) << ',' << r.alpha << ',';
      if (const auto last = t.last_overflow_index(i); last >= 0) os << last;
      os << '\n';
    }
  }
  os.precision(old_precision);
}

template double accumulate_series<float>(Strided<float>, Strided<float>, std::size_t, const Fmaq&);
template double accumulate_series<double>(Strided<double>, Strided<double>, std::size_t,
                                          const Fmaq&);
template double accumulate_series_traced<float>(Strided<float>, Strided<float>, std::size_t,
                                                const Fmaq&, const DiffParams&, EventTrace&);
template double accumulate_series_traced<double>(Strided<double>, Strided<double>, std::size_t,
                                                 const Fmaq&, const DiffParams&, EventTrace&);
template Matrix<double> gemm_forward<float>(const Matrix<float>&, const Matrix<float>&,
                                            const FmaqConfig&, std::vector<EventTrace>*,
                                            const DiffParams&);
template Matrix<double> gemm_forward<double>(const Matrix<double>&, const Matrix<double>&,
                                             const FmaqConfig&, std::vector<EventTrace>*,
                                             const DiffParams&);
template Matrix<double> linear_forward<float>(const Matrix<float>&, const Matrix<float>&,
                                              const FmaqConfig&);
template Matrix<double> linear_forward<double>(const Matrix<double>&, const Matrix<double>&,
                                               const FmaqConfig&);
template Matrix<double> linear_forward_exact<float>(const Matrix<float>&, const Matrix<float>&);
template Matrix<double> linear_forward_exact<double>(const Matrix<double>&,
                                                     const Matrix<double>&);

}  // namespace lba
