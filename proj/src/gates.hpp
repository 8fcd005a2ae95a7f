#pragma once

#include <array>
#include <iosfwd>
#include <string_view>
#include <vector>

namespace lba {

struct GateCosts {
  double and2 = 1.0;
  double or2 = 1.0;
  double mux2 = 3.0;
  double half_adder = 3.0;
  double full_adder = 7.0;
};

/// Design point of an FMAq datapath: m/e are the weight/activation mantissa
/// and exponent widths, M/E those of the product/accumulator.
struct GateParams {
  int m = 4;
  int e = 3;
  int M = 23;
  int E = 8;
  GateCosts costs{};

  int canvas_bits() const { return 2 * M + 1; }  // F
  int max_shift() const;                         // k_max = min(F, 2^E)
  int shift_bits() const;                        // min(ceil(log2 F), E)
};

inline constexpr std::size_t kGateComponents = 11;

struct GateBreakdown {
  std::array<double, kGateComponents> components{};
  double total = 0.0;
};

std::string_view gate_component_name(std::size_t index);

/// Gate counts per datapath block (flip-flops excluded).
GateBreakdown gate_breakdown(const GateParams& p);

struct GateReportRow {
  GateParams params;
  GateBreakdown breakdown;
  double ratio_percent = 0.0;  // total relative to the first row
};

/// First design point is the 100% reference.
std::vector<GateReportRow> gate_ratio_report(const std::vector<GateParams>& design_points);

void write_gate_report_csv(std::ostream& os, const std::vector<GateReportRow>& rows);
void print_gate_report(std::ostream& os, const std::vector<GateReportRow>& rows);

}  // namespace lba
