#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lba {

/// Largest mantissa width the 64-bit carrier holds with a guard bit to spare.
inline constexpr int kMaxCarrierMantissa = 51;

enum class RoundMode { Truncate, Nearest, Stochastic };

enum class EventKind { Exact, Underflow, Overflow, Swamp };

std::string_view to_string(RoundMode mode);
std::string_view to_string(EventKind kind);
RoundMode parse_round_mode(std::string_view text);

/// Two's-complement style fixed-point format: B total bits, step 2^-bias.
struct FixedFormat {
  int total_bits = 8;
  int bias = 0;

  double min_value() const;  // R_min = -2^(B-b-1)
  double max_value() const;  // R_max = 2^-b (2^(B-1) - 1)
  double step() const;       // 2^-b
  void validate() const;
};

/// Floating-point format without subnormals, infinities or NaNs.
///
/// Representable magnitudes are 0 and 2^e (1 + k 2^-M) for
/// e in [-bias, 2^E - bias - 1], k in [0, 2^M).
struct FloatFormat {
  int mantissa_bits = 23;
  int exponent_bits = 8;
  int bias = 127;

  static FloatFormat with_default_bias(int mantissa_bits, int exponent_bits);

  int max_exponent() const { return (1 << exponent_bits) - bias - 1; }
  int min_exponent() const { return -bias; }
  double overflow_threshold() const;   // R_OF
  double underflow_threshold() const;  // R_UF
  /// Throws std::invalid_argument when the format does not fit the carrier.
  void validate(int extra_mantissa = 0) const;

  bool operator==(const FloatFormat&) const = default;
};

struct QuantEvent {
  EventKind kind = EventKind::Exact;
  double absolute_error = 0.0;
  double relative_error = 0.0;
};

struct FloatQuantOptions {
  RoundMode mode = RoundMode::Truncate;
  bool underflow = true;
  int extra_mantissa = 0;
};

/// Fixed-point quantization with clamping at the range ends. Stochastic mode
/// needs the overload that takes a random stream.
double quantize_fixed(double x, const FixedFormat& fmt, RoundMode mode);
double quantize_fixed(double x, const FixedFormat& fmt, RoundMode mode, std::mt19937_64& rng);

double quantize_float(double x, const FloatFormat& fmt, const FloatQuantOptions& opts = {});
double quantize_float(double x, const FloatFormat& fmt, const FloatQuantOptions& opts,
                      std::mt19937_64& rng);

/// Classifies what quantize_float does to x. A value that survives
/// unchanged is Exact, even at +-R_OF.
QuantEvent classify(double x, const FloatFormat& fmt, const FloatQuantOptions& opts = {});

/// Error thrown for malformed format strings; position is a 0-based offset
/// into the parsed text.
class FormatParseError : public std::invalid_argument {
 public:
  FormatParseError(std::size_t position, const std::string& what);
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Parsed format string: "M7E4b10", "M4E3" (default bias), "M4E3flex",
/// "FIXED8b0".
struct FormatSpec {
  enum class Kind { Float, Fixed };
  Kind kind = Kind::Float;
  FloatFormat float_format;
  FixedFormat fixed_format;
  bool flex_bias = false;

  std::string to_string() const;
};

FormatSpec parse_format(std::string_view text);
FloatFormat parse_float_format(std::string_view text);

}  // namespace lba
