#include "formats.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "quantizer.hpp"

namespace lba {

std::string_view to_string(RoundMode mode) {
  switch (mode) {
    case RoundMode::Truncate: return "truncate";
    case RoundMode::Nearest: return "nearest";
    case RoundMode::Stochastic: return "stochastic";
  }
  return "?";
}

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::Exact: return "Exact";
    case EventKind::Underflow: return "Underflow";
    case EventKind::Overflow: return "Overflow";
    case EventKind::Swamp: return "Swamp";
  }
  return "?";
}

RoundMode parse_round_mode(std::string_view text) {
  if (text == "truncate" || text == "floor") return RoundMode::Truncate;
  if (text == "nearest") return RoundMode::Nearest;
  if (text == "stochastic") return RoundMode::Stochastic;
  throw std::invalid_argument("unknown rounding mode '" + std::string(text) +
                              "' (expected truncate, nearest or stochastic)");
}

double FixedFormat::min_value() const { return -std::ldexp(1.0, total_bits - bias - 1); }

double FixedFormat::max_value() const {
  return std::ldexp(std::ldexp(1.0, total_bits - 1) - 1.0, -bias);
}

double FixedFormat::step() const { return std::ldexp(1.0, -bias); }

void FixedFormat::validate() const {
  if (total_bits < 2 || total_bits > 53)
    throw std::invalid_argument("fixed-point width must be in [2, 53], got " +
                                std::to_string(total_bits));
  if (bias < -960 || bias > 960)
    throw std::invalid_argument("fixed-point bias out of carrier range: " + std::to_string(bias));
}

FloatFormat FloatFormat::with_default_bias(int mantissa_bits, int exponent_bits) {
  if (exponent_bits < 1 || exponent_bits > 30)
    throw std::invalid_argument("exponent bits out of range: " + std::to_string(exponent_bits));
  return {mantissa_bits, exponent_bits, 1 << (exponent_bits - 1)};
}

double FloatFormat::overflow_threshold() const {
  return std::ldexp(2.0 - std::ldexp(1.0, -mantissa_bits), max_exponent());
}

double FloatFormat::underflow_threshold() const { return std::ldexp(1.0, min_exponent()); }

void FloatFormat::validate(int extra_mantissa) const {
  if (mantissa_bits < 0)
    throw std::invalid_argument("mantissa bits must be >= 0, got " + std::to_string(mantissa_bits));
  if (extra_mantissa < 0)
    throw std::invalid_argument("extra mantissa bits must be >= 0");
  if (mantissa_bits + extra_mantissa > kMaxCarrierMantissa)
    throw std::invalid_argument("M+1 must not exceed 52 carrier bits (M=" +
                                std::to_string(mantissa_bits + extra_mantissa) + ")");
  if (exponent_bits < 2 || exponent_bits > 11)
    throw std::invalid_argument("exponent bits must be in [2, 11], got " +
                                std::to_string(exponent_bits));
  if (max_exponent() > 1023 || min_exponent() < -1022)
    throw std::invalid_argument("exponent range [" + std::to_string(min_exponent()) + ", " +
                                std::to_string(max_exponent()) +
                                "] does not fit the 64-bit carrier");
}

namespace {

double round_scaled(double scaled, RoundMode mode, std::mt19937_64* rng) {
  switch (mode) {
    case RoundMode::Truncate: return std::trunc(scaled);
    case RoundMode::Nearest: return std::nearbyint(scaled);
    case RoundMode::Stochastic: {
      if (rng == nullptr) throw std::invalid_argument("stochastic rounding needs a random stream");
      const double lower = std::floor(scaled);
      const double frac = scaled - lower;
      // 53 random bits -> [0, 1)
      const double u = std::ldexp(static_cast<double>((*rng)() >> 11), -53);
      return u < frac ? lower + 1.0 : lower;
    }
  }
  return scaled;
}

double quantize_fixed_impl(double x, const FixedFormat& fmt, RoundMode mode,
                           std::mt19937_64* rng) {
  fmt.validate();
  if (x == 0.0) return 0.0;
  const double lo = fmt.min_value();
  const double hi = fmt.max_value();
  if (x <= lo) return lo;
  if (x >= hi) return hi;
  const double r = round_scaled(std::ldexp(x, fmt.bias), mode, rng);
  const double q = std::ldexp(r, -fmt.bias);
  return q == 0.0 ? 0.0 : q;
}

double quantize_float_impl(double x, const FloatFormat& fmt, const FloatQuantOptions& opts,
                           std::mt19937_64* rng) {
  if (opts.mode == RoundMode::Truncate) {
    const double q = TruncQuantizer(fmt, opts.underflow, opts.extra_mantissa)(x);
    return q == 0.0 ? 0.0 : q;
  }
  fmt.validate(opts.extra_mantissa);
  if (x == 0.0) return 0.0;
  const int mantissa = fmt.mantissa_bits + opts.extra_mantissa;
  const double overflow = std::ldexp(2.0 - std::ldexp(1.0, -mantissa), fmt.max_exponent());
  const double a = std::fabs(x);
  if (a >= overflow) return std::copysign(overflow, x);
  if (opts.underflow && a < fmt.underflow_threshold()) return 0.0;
  const int e = std::ilogb(a);
  const double r = round_scaled(std::ldexp(a, mantissa - e), opts.mode, rng);
  // r == 2^(M+1) renormalizes to 2^(e+1); the top binade then saturates
  const double q = std::min(std::ldexp(r, e - mantissa), overflow);
  return q == 0.0 ? 0.0 : std::copysign(q, x);
}

}  // namespace

double quantize_fixed(double x, const FixedFormat& fmt, RoundMode mode) {
  return quantize_fixed_impl(x, fmt, mode, nullptr);
}

double quantize_fixed(double x, const FixedFormat& fmt, RoundMode mode, std::mt19937_64& rng) {
  return quantize_fixed_impl(x, fmt, mode, &rng);
}

double quantize_float(double x, const FloatFormat& fmt, const FloatQuantOptions& opts) {
  return quantize_float_impl(x, fmt, opts, nullptr);
}

double quantize_float(double x, const FloatFormat& fmt, const FloatQuantOptions& opts,
                      std::mt19937_64& rng) {
  return quantize_float_impl(x, fmt, opts, &rng);
}

QuantEvent classify(double x, const FloatFormat& fmt, const FloatQuantOptions& opts) {
  if (opts.mode == RoundMode::Stochastic)
    throw std::invalid_argument("classify needs a deterministic rounding mode");
  const double q = quantize_float(x, fmt, opts);
  QuantEvent ev;
  if (q == x) return ev;
  const double a = std::fabs(x);
  ev.absolute_error = std::fabs(q - x);
  ev.relative_error = ev.absolute_error / a;
  FloatFormat wide = fmt;
  wide.mantissa_bits += opts.extra_mantissa;
  if (a >= wide.overflow_threshold())
    ev.kind = EventKind::Overflow;
  else if (opts.underflow && a < fmt.underflow_threshold())
    ev.kind = EventKind::Underflow;
  else
    ev.kind = EventKind::Swamp;
  return ev;
}

FormatParseError::FormatParseError(std::size_t position, const std::string& what)
    : std::invalid_argument(what + " at position " + std::to_string(position)),
      position_(position) {}

namespace {

class FormatLexer {
 public:
  explicit FormatLexer(std::string_view text) : text_(text) {}

  bool done() const { return pos_ == text_.size(); }
  std::size_t pos() const { return pos_; }

  bool accept(std::string_view token) {
    if (text_.substr(pos_, token.size()) != token) return false;
    pos_ += token.size();
    return true;
  }

  void expect(std::string_view token) {
    if (!accept(token))
      throw FormatParseError(pos_, "expected '" + std::string(token) + "' in format '" +
                                       std::string(text_) + "'");
  }

  int integer(bool allow_sign) {
    const char* first = text_.data() + pos_;
    const char* last = text_.data() + text_.size();
    if (!allow_sign && first != last && (*first == '-' || *first == '+'))
      throw FormatParseError(pos_, "unexpected sign");
    if (first != last && *first == '+') ++first;
    int value = 0;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{})
      throw FormatParseError(pos_, "expected an integer in format '" + std::string(text_) + "'");
    pos_ = static_cast<std::size_t>(ptr - text_.data());
    return value;
  }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

FormatSpec parse_format(std::string_view text) {
  FormatLexer lex(text);
  FormatSpec spec;
  if (lex.accept("FIXED")) {
    spec.kind = FormatSpec::Kind::Fixed;
    spec.fixed_format.total_bits = lex.integer(false);
    spec.fixed_format.bias = lex.accept("b") ? lex.integer(true) : 0;
  } else {
    lex.expect("M");
    const int m = lex.integer(false);
    lex.expect("E");
    const std::size_t e_pos = lex.pos();
    const int e = lex.integer(false);
    if (e < 2 || e > 11) throw FormatParseError(e_pos, "exponent bits must be in [2, 11]");
    spec.float_format = FloatFormat::with_default_bias(m, e);
    if (lex.accept("flex")) {
      spec.flex_bias = true;
    } else if (lex.accept("b")) {
      spec.float_format.bias = lex.integer(true);
    }
  }
  if (!lex.done())
    throw FormatParseError(lex.pos(), "trailing characters in format '" + std::string(text) + "'");
  try {
    if (spec.kind == FormatSpec::Kind::Fixed)
      spec.fixed_format.validate();
    else
      spec.float_format.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatParseError(0, e.what());
  }
  return spec;
}

FloatFormat parse_float_format(std::string_view text) {
  const FormatSpec spec = parse_format(text);
  if (spec.kind != FormatSpec::Kind::Float)
    throw FormatParseError(0, "expected a floating-point format, got '" + std::string(text) + "'");
  return spec.float_format;
}

std::string FormatSpec::to_string() const {
  std::ostringstream os;
  if (kind == Kind::Fixed) {
    os << "FIXED" << fixed_format.total_bits << 'b' << fixed_format.bias;
  } else {
    os << 'M' << float_format.mantissa_bits << 'E' << float_format.exponent_bits;
    if (flex_bias)
      os << "flex";
    else
      os << 'b' << float_format.bias;
  }
  return os.str();
}

}  // namespace lba
