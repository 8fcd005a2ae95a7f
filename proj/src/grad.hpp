#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "fmaq.hpp"
#include "matrix.hpp"

namespace lba {

/// Straight-through estimators for the FMAq quantizers.
///
///  - Identity:      every summand passes its gradient unchanged.
///  - RecursiveOF:   the overflow indicator 1(|Q_prod(x w) + s| < R_OF) is
///                   applied to the product and to the partial sum, so an
///                   overflow removes the gradient of everything accumulated
///                   before it (within its chunk, or across chunks when the
///                   overflow happens while aggregating chunk results).
///  - ImmediateOF:   the overflow indicator on the product only, dz/ds = 1.
///  - ImmediateDIFF: 1(|z - s| / (|x w| + eps1) > eps2) on the product only,
///                   which also catches product underflow and full swamping.
enum class SteKind { Identity, RecursiveOF, ImmediateOF, ImmediateDIFF };

std::string_view to_string(SteKind kind);
SteKind parse_ste_kind(std::string_view text);

/// Re-executes the accumulation of one series and returns the 0/1 gradient
/// mask of every summand.
std::vector<std::uint8_t> compute_masks(std::span<const double> x, std::span<const double> w,
                                        const FmaqConfig& cfg, SteKind kind,
                                        const DiffParams& diff = {});

/// alpha_i = (FMAq(x_i, w_i, S_i) - S_i) / (x_i w_i), 0 for zero products.
std::vector<double> alpha_values(std::span<const double> x, std::span<const double> w,
                                 const FmaqConfig& cfg);

/// Mask kernel on strided series; returns the forward value of the series,
/// which is bit-identical to accumulate_series on the same inputs.
template <typename T>
double series_masks(Strided<T> x, Strided<T> w, std::size_t n, const Fmaq& unit, SteKind kind,
                    const DiffParams& diff, std::uint8_t* mask);

struct GemmGradients {
  Matrix<double> grad_a;
  Matrix<double> grad_b;
};

/// Backward pass of Y = A B under the given estimator:
///   grad_A(k, i) = sum_l G(k, l) B(i, l) m(k, l, i)
///   grad_B(i, l) = sum_k G(k, l) A(k, i) m(k, l, i)
/// Masks come from a fresh re-execution of the forward accumulation. Sums
/// run in ascending index order.
template <typename T>
GemmGradients gemm_backward(const Matrix<T>& a, const Matrix<T>& b, const Matrix<double>& upstream,
                            const FmaqConfig& cfg, SteKind kind, const DiffParams& diff = {});

/// Same for Y = X W^T; grad_b has the shape of W. A null cfg means exact
/// (unquantized) accumulation and plain backpropagation. grad_a is left
/// empty when want_grad_a is false.
template <typename T>
GemmGradients linear_backward(const Matrix<T>& x, const Matrix<T>& w,
                              const Matrix<double>& upstream, const FmaqConfig* cfg, SteKind kind,
                              const DiffParams& diff = {}, bool want_grad_a = true);

/// Estimators are defined for fully-connected GEMMs only.
[[noreturn]] void conv2d_backward(const Tensor4& input, const Tensor4& kernel,
                                  const ConvGeometry& geom, const FmaqConfig& cfg, SteKind kind);

}  // namespace lba
