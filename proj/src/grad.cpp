#include "grad.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "lanes.hpp"
#include "lanes_avx2.hpp"
#include "parallel.hpp"

namespace lba {

std::string_view to_string(SteKind kind) {
  switch (kind) {
    case SteKind::Identity: return "identity";
    case SteKind::RecursiveOF: return "recursive-of";
    case SteKind::ImmediateOF: return "immediate-of";
    case SteKind::ImmediateDIFF: return "immediate-diff";
  }
  return "?";
}

SteKind parse_ste_kind(std::string_view text) {
  if (text == "identity") return SteKind::Identity;
  if (text == "recursive-of") return SteKind::RecursiveOF;
  if (text == "immediate-of") return SteKind::ImmediateOF;
  if (text == "immediate-diff") return SteKind::ImmediateDIFF;
  throw std::invalid_argument("unknown STE kind '" + std::string(text) +
                              "' (expected identity, recursive-of, immediate-of or "
                              "immediate-diff)");
}

template <typename T>
double series_masks(Strided<T> x, Strided<T> w, std::size_t n, const Fmaq& unit, SteKind kind,
                    const DiffParams& diff, std::uint8_t* mask) {
  if (kind == SteKind::Identity) {
    std::fill(mask, mask + n, std::uint8_t{1});
    return accumulate_series(x, w, n, unit);
  }
  const std::size_t chunk = static_cast<std::size_t>(unit.config().chunk_size);
  const double eps1 = diff.resolved_eps1(unit.config());
  const bool recursive = kind == SteKind::RecursiveOF;
  double total = 0.0;
  for (std::size_t c0 = 0; c0 < n; c0 += chunk) {
    const std::size_t c1 = std::min(n, c0 + chunk);
    double s = 0.0;
    std::size_t cut = c0;  // summands [c0, cut) lose their gradient
    for (std::size_t i = c0; i < c1; ++i) {
      const double xi = static_cast<double>(x[i]);
      const double wi = static_cast<double>(w[i]);
      double qp = 0.0;
      if (xi != 0.0 && wi != 0.0) {
        if constexpr (std::is_same_v<T, float>)
          qp = unit.product()(xi * wi);
        else
          qp = unit.quantize_product(xi, wi);
      }
      const double z = qp == 0.0 ? s : unit.add(qp, s);
      if (kind == SteKind::ImmediateDIFF) {
        const double prod = xi * wi;
        mask[i] = prod != 0.0 && std::fabs(z - s) / (std::fabs(prod) + eps1) > diff.eps2;
      } else {
        const bool of = unit.overflows(qp, s);
        mask[i] = !of;
        if (of) cut = i + 1;
      }
      s = z;
    }
    if (recursive) std::fill(mask + c0, mask + cut, std::uint8_t{0});
    if (c0 == 0) {
      total = s;
    } else {
      if (recursive && unit.overflows(s, total)) std::fill(mask, mask + c1, std::uint8_t{0});
      total = unit.add(s, total);
    }
  }
  return total;
}

std::vector<std::uint8_t> compute_masks(std::span<const double> x, std::span<const double> w,
                                        const FmaqConfig& cfg, SteKind kind,
                                        const DiffParams& diff) {
  if (x.size() != w.size())
    throw ShapeError("series length mismatch: " + std::to_string(x.size()) + " vs " +
                     std::to_string(w.size()));
  const Fmaq unit(cfg);
  std::vector<std::uint8_t> mask(x.size());
  series_masks(Strided<double>{x.data(), 1}, Strided<double>{w.data(), 1}, x.size(), unit, kind,
               diff, mask.data());
  return mask;
}

std::vector<double> alpha_values(std::span<const double> x, std::span<const double> w,
                                 const FmaqConfig& cfg) {
  EventTrace trace;
  accumulate_chunked(x, w, cfg, &trace);
  std::vector<double> alpha(x.size());
  std::transform(trace.summands.begin(), trace.summands.end(), alpha.begin(),
                 [](const SummandRecord& r) { return r.alpha; });
  return alpha;
}

namespace {

// A(r, i) = a[r * a_row + i * a_col]; Bt(l, i) = bt[l * bt_row + i * bt_col].
// grad_a is m x K, grad_bt is n x K (one row per output column l).
template <typename T>
void backward_strided(const T* a, std::size_t m, std::size_t k, std::ptrdiff_t a_row,
                      std::ptrdiff_t a_col, const T* bt, std::size_t n, std::ptrdiff_t bt_row,
                      std::ptrdiff_t bt_col, const Matrix<double>& g, const FmaqConfig* cfg,
                      SteKind kind, const DiffParams& diff, Matrix<double>& grad_a,
                      Matrix<double>& grad_bt, bool want_grad_a = true) {
  auto A = [&](std::size_t r, std::size_t i) {
    return static_cast<double>(a[static_cast<std::ptrdiff_t>(r) * a_row +
                                 static_cast<std::ptrdiff_t>(i) * a_col]);
  };
  auto Bt = [&](std::size_t l, std::size_t i) {
    return static_cast<double>(bt[static_cast<std::ptrdiff_t>(l) * bt_row +
                                  static_cast<std::ptrdiff_t>(i) * bt_col]);
  };

  std::vector<std::uint8_t> masks;
  const bool masked = cfg != nullptr && kind != SteKind::Identity;
  if (masked) {
    const Fmaq unit(*cfg);
    masks.resize(m * n * k);
    const std::size_t blocks = (n + detail::kLanes - 1) / detail::kLanes;
    std::vector<double> packed;
    if constexpr (std::is_same_v<T, float>) {
      // Bt(l, i) is b(i, l) of the forward product
      if (detail::avx2_available()) packed = detail::pack_lanes(bt, k, n, bt_col, bt_row);
    }
    parallel_for(m * blocks, [&](std::size_t begin, std::size_t end) {
      for (std::size_t task = begin; task < end; ++task) {
        const std::size_t r = task / blocks;
        const std::size_t blk = task % blocks;
        const std::size_t l0 = blk * detail::kLanes;
        const Strided<T> xs{a + static_cast<std::ptrdiff_t>(r) * a_row, a_col};
        if (l0 + detail::kLanes <= n && !packed.empty()) {
          if constexpr (std::is_same_v<T, float>) {
            std::uint8_t* mk[detail::kLanes];
            for (std::size_t j = 0; j < detail::kLanes; ++j)
              mk[j] = masks.data() + (r * n + l0 + j) * k;
            detail::mask_lanes_avx2(xs, packed.data() + blk * k * detail::kLanes, k, unit, kind,
                                    diff, mk);
          }
        } else if (l0 + detail::kLanes <= n) {
          Strided<T> ws[detail::kLanes];
          std::uint8_t* mk[detail::kLanes];
          for (std::size_t j = 0; j < detail::kLanes; ++j) {
            ws[j] = {bt + static_cast<std::ptrdiff_t>(l0 + j) * bt_row, bt_col};
            mk[j] = masks.data() + (r * n + l0 + j) * k;
          }
          detail::mask_lanes(xs, ws, k, unit, kind, diff, mk);
        } else {
          for (std::size_t l = l0; l < n; ++l) {
            const Strided<T> ws{bt + static_cast<std::ptrdiff_t>(l) * bt_row, bt_col};
            series_masks(xs, ws, k, unit, kind, diff, masks.data() + (r * n + l) * k);
          }
        }
      }
    });
  }

  grad_bt = Matrix<double>(n, k);
  if (want_grad_a) grad_a = Matrix<double>(m, k);
  if (want_grad_a) parallel_for(m, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      auto out = grad_a.row(r);
      for (std::size_t l = 0; l < n; ++l) {
        const double up = g(r, l);
        if (up == 0.0) continue;
        if (masked) {
          const std::uint8_t* mk = masks.data() + (r * n + l) * k;
          for (std::size_t i = 0; i < k; ++i) out[i] += mk[i] ? up * Bt(l, i) : 0.0;
        } else {
          for (std::size_t i = 0; i < k; ++i) out[i] += up * Bt(l, i);
        }
      }
    }
  });
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t l = begin; l < end; ++l) {
      auto out = grad_bt.row(l);
      for (std::size_t r = 0; r < m; ++r) {
        const double up = g(r, l);
        if (up == 0.0) continue;
        if (masked) {
          const std::uint8_t* mk = masks.data() + (r * n + l) * k;
          for (std::size_t i = 0; i < k; ++i) out[i] += mk[i] ? up * A(r, i) : 0.0;
        } else {
          for (std::size_t i = 0; i < k; ++i) out[i] += up * A(r, i);
        }
      }
    }
  });
}

}  // namespace

template <typename T>
GemmGradients gemm_backward(const Matrix<T>& a, const Matrix<T>& b, const Matrix<double>& upstream,
                            const FmaqConfig& cfg, SteKind kind, const DiffParams& diff) {
  if (a.cols() != b.rows() || upstream.rows() != a.rows() || upstream.cols() != b.cols())
    throw ShapeError("gemm_backward shapes disagree with the forward product");
  GemmGradients out;
  Matrix<double> grad_bt;
  backward_strided(a.data(), a.rows(), a.cols(), static_cast<std::ptrdiff_t>(a.cols()), 1,
                   b.data(), b.cols(), 1, static_cast<std::ptrdiff_t>(b.cols()), upstream, &cfg,
                   kind, diff, out.grad_a, grad_bt);
  out.grad_b = grad_bt.transposed();
  return out;
}

template <typename T>
GemmGradients linear_backward(const Matrix<T>& x, const Matrix<T>& w,
                              const Matrix<double>& upstream, const FmaqConfig* cfg, SteKind kind,
                              const DiffParams& diff, bool want_grad_a) {
  if (x.cols() != w.cols() || upstream.rows() != x.rows() || upstream.cols() != w.rows())
    throw ShapeError("linear_backward shapes disagree with the forward product");
  GemmGradients out;
  backward_strided(x.data(), x.rows(), x.cols(), static_cast<std::ptrdiff_t>(x.cols()), 1,
                   w.data(), w.rows(), static_cast<std::ptrdiff_t>(w.cols()), 1, upstream, cfg,
                   kind, diff, out.grad_a, out.grad_b, want_grad_a);
  return out;
}

void conv2d_backward(const Tensor4&, const Tensor4&, const ConvGeometry&, const FmaqConfig&,
                     SteKind kind) {
  throw UnsupportedOperation("accumulator STEs are not available for convolutions (requested " +
                             std::string(to_string(kind)) + ")");
}

template double series_masks<float>(Strided<float>, Strided<float>, std::size_t, const Fmaq&,
                                    SteKind, const DiffParams&, std::uint8_t*);
template double series_masks<double>(Strided<double>, Strided<double>, std::size_t, const Fmaq&,
                                     SteKind, const DiffParams&, std::uint8_t*);
template GemmGradients gemm_backward<float>(const Matrix<float>&, const Matrix<float>&,
                                            const Matrix<double>&, const FmaqConfig&, SteKind,
                                            const DiffParams&);
template GemmGradients gemm_backward<double>(const Matrix<double>&, const Matrix<double>&,
                                             const Matrix<double>&, const FmaqConfig&, SteKind,
                                             const DiffParams&);
template GemmGradients linear_backward<float>(const Matrix<float>&, const Matrix<float>&,
                                              const Matrix<double>&, const FmaqConfig*, SteKind,
                                              const DiffParams&, bool);
template GemmGradients linear_backward<double>(const Matrix<double>&, const Matrix<double>&,
                                               const Matrix<double>&, const FmaqConfig*, SteKind,
                                               const DiffParams&, bool);

}  // namespace lba
