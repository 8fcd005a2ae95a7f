#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <stdexcept>
#include <vector>

#include "formats.hpp"
#include "matrix.hpp"
#include "quantizer.hpp"

namespace lba {

class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Product/accumulator formats and accumulation schedule of a quantized
/// FMA unit. Internal rounding is always floor-on-magnitude.
struct FmaqConfig {
  FloatFormat prod_fmt{7, 4, 12};
  FloatFormat acc_fmt{7, 4, 10};
  int chunk_size = 16;
  bool underflow = true;
  int acc_extra_mantissa = 0;

  /// Accumulator bias = product bias - log2(chunk)/2 (rounded down for
  /// odd powers of two). Accumulator M/E default to the product's.
  static FmaqConfig with_bias_rule(const FloatFormat& prod_fmt, int chunk_size = 16);
  static FmaqConfig with_bias_rule(const FloatFormat& prod_fmt, int acc_mantissa,
                                   int acc_exponent, int chunk_size);

  /// Same format for products and accumulator.
  static FmaqConfig uniform(const FloatFormat& fmt, int chunk_size = 16);

  void validate() const;
  bool operator==(const FmaqConfig&) const = default;
};

/// Threshold parameters of the DIFF indicator
/// 1(|z - s| / (|x w| + eps1) > eps2).
struct DiffParams {
  /// NaN selects the default 2^-126, a pure guard against a zero denominator.
  double eps1 = std::numeric_limits<double>::quiet_NaN();
  double eps2 = 0.5;

  double resolved_eps1(const FmaqConfig& cfg) const;
};

/// A configured FMAq unit: FMAq(x, w, s) = Q_acc(Q_prod(x w) + s).
class Fmaq {
 public:
  explicit Fmaq(const FmaqConfig& cfg);

  const FmaqConfig& config() const { return cfg_; }
  const TruncQuantizer& product() const { return prod_; }
  const TruncQuantizer& accumulator() const { return acc_; }

  double quantize_product(double x, double w) const {
    const double p = x * w;
    return prod_(p, two_product_error(x, w, p));
  }

  double add(double product, double partial) const {
    const double sum = product + partial;
    return acc_(sum, two_sum_error(product, partial, sum));
  }

  /// add() that also reports overflows(product, partial).
  double add(double product, double partial, bool& overflow) const {
    const double sum = product + partial;
    return acc_.quantize(sum, two_sum_error(product, partial, sum), overflow);
  }

  /// 1 when |product + partial| >= R_OF, evaluated on the exact sum.
  bool overflows(double product, double partial) const {
    const double sum = product + partial;
    const double a = std::fabs(sum);
    const double of = acc_.overflow_threshold();
    if (a < of) return false;
    if (a > of) return true;
    const double err = two_sum_error(product, partial, sum);
    return err == 0.0 || std::signbit(err) == std::signbit(sum);
  }

  double operator()(double x, double w, double s) const { return add(quantize_product(x, w), s); }

 private:
  FmaqConfig cfg_;
  TruncQuantizer prod_;
  TruncQuantizer acc_;
};

double fmaq(double x, double w, double s, const FmaqConfig& cfg);

struct SummandRecord {
  bool prod_underflow = false;  // nonzero product flushed by Q_prod
  bool acc_overflow = false;    // |Q_prod(x w) + S_i| >= R_OF
  bool diff_bit = false;        // DIFF indicator
  double alpha = 0.0;           // (FMAq(x, w, S_i) - S_i) / (x w), 0 for a zero product
};

/// Per-output record of what happened during one chunked accumulation.
struct EventTrace {
  std::size_t chunk_size = 0;
  std::vector<SummandRecord> summands;
  /// Per chunk: whether aggregating it onto the running total overflowed
  /// (always false for chunk 0, which seeds the total).
  std::vector<bool> aggregation_overflow;
  /// Per chunk: the largest summand index whose gradient the recursive
  /// overflow rule zeroes, -1 when none.
  std::vector<std::ptrdiff_t> chunk_last_overflow;

  std::size_t chunk_of(std::size_t i) const { return i / chunk_size; }
  std::ptrdiff_t last_overflow_index(std::size_t i) const {
    return chunk_last_overflow[chunk_of(i)];
  }
};

/// Chunked accumulation of sum_i x_i w_i: each chunk is reduced sequentially
/// with FMAq from 0, chunk results are then added in chunk order with Q_acc
/// after each addition.
template <typename T>
double accumulate_series(Strided<T> x, Strided<T> w, std::size_t n, const Fmaq& unit);

template <typename T>
double accumulate_series_traced(Strided<T> x, Strided<T> w, std::size_t n, const Fmaq& unit,
                                const DiffParams& diff, EventTrace& trace);

double accumulate_chunked(std::span<const double> x, std::span<const double> w,
                          const FmaqConfig& cfg, EventTrace* trace = nullptr,
                          const DiffParams& diff = {});

/// Y = A B with every output scalar accumulated by accumulate_chunked over
/// x_i = A(k, i), w_i = B(i, l). Traces are stored row-major by output.
template <typename T>
Matrix<double> gemm_forward(const Matrix<T>& a, const Matrix<T>& b, const FmaqConfig& cfg,
                            std::vector<EventTrace>* traces = nullptr,
                            const DiffParams& diff = {});

/// Y = X W^T (the fully-connected layout), x_i = X(k, i), w_i = W(l, i).
template <typename T>
Matrix<double> linear_forward(const Matrix<T>& x, const Matrix<T>& w, const FmaqConfig& cfg);

/// Exact-FMA reference for the same layout: double accumulation in index order.
template <typename T>
Matrix<double> linear_forward_exact(const Matrix<T>& x, const Matrix<T>& w);

/// NCHW activation / OIHW kernel tensor.
struct Tensor4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor4() = default;
  Tensor4(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_)
      : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, 0.0) {}
  double& at(std::size_t i, std::size_t j, std::size_t y, std::size_t x) {
    return data[((i * c + j) * h + y) * w + x];
  }
  double at(std::size_t i, std::size_t j, std::size_t y, std::size_t x) const {
    return data[((i * c + j) * h + y) * w + x];
  }
};

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// im2col lowering of one image: rows index (channel, ky, kx), columns
/// index output pixels.
Matrix<double> im2col(const Tensor4& input, std::size_t image, std::size_t kernel_h,
                      std::size_t kernel_w, const ConvGeometry& geom);

/// Convolution as gemm_forward(kernel matrix, im2col(input)); the
/// accumulation size is kernel_h * kernel_w * in_channels. Tracing is not
/// available for convolutions and throws UnsupportedOperation.
Tensor4 conv2d_forward(const Tensor4& input, const Tensor4& kernel, const ConvGeometry& geom,
                       const FmaqConfig& cfg, std::vector<EventTrace>* traces = nullptr);

/// CSV columns: out_row,out_col,i,prod_uf,diff_bit,alpha,last_of_index.
void write_trace_csv(std::ostream& os, const std::vector<EventTrace>& traces, std::size_t cols);

}  // namespace lba
