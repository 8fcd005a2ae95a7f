#include "gates.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <iomanip>
#include <ostream>
#include <stdexcept>
#include <string>

namespace lba {

namespace {

constexpr std::array<std::string_view, kGateComponents> kNames = {
    "exponent_adder", "exponent_differ", "exponent_max",  "mantissa_mul",
    "sort_exponent",  "first_shift",     "mantissa_adder", "leading_zero_detector",
    "second_shift",   "exponent_rebase", "final_incrementor"};

int ceil_log2(int v) { return v <= 1 ? 0 : std::bit_width(static_cast<unsigned>(v - 1)); }

}  // namespace

int GateParams::max_shift() const {
  const long long range = E >= 30 ? (1LL << 30) : (1LL << E);
  return static_cast<int>(std::min<long long>(canvas_bits(), range));
}

int GateParams::shift_bits() const { return std::min(ceil_log2(canvas_bits()), E); }

std::string_view gate_component_name(std::size_t index) {
  if (index >= kGateComponents) throw std::out_of_range("gate component index");
  return kNames[index];
}

GateBreakdown gate_breakdown(const GateParams& p) {
  if (p.m < 1 || p.e < 1 || p.M < 1 || p.E < 1)
    throw std::invalid_argument("gate model needs m, e, M, E >= 1");
  const GateCosts& c = p.costs;
  const double F = p.canvas_bits();
  const double kmax = p.max_shift();
  const double shift = p.shift_bits();
  const double m = p.m, e = p.e, M = p.M, E = p.E;

  GateBreakdown b;
  auto& g = b.components;
  g[0] = (e - 1) * c.full_adder + c.half_adder;
  g[1] = (std::min(E, e + 1) - 1) * c.full_adder + c.half_adder * (1 + std::abs(e + 1 - E));
  g[2] = E * c.mux2;
  g[3] = (m + 3) * (m + 3) * c.and2 + (m + 2) * (m + 2) * c.full_adder + (m + 2) * c.half_adder;
  g[4] = (M + 1) * c.mux2;
  g[5] = (F - 1) * shift * c.mux2;
  g[6] = M * c.full_adder + c.half_adder;
  g[7] = F * (c.and2 + c.or2) + shift * shift * c.or2;
  // floored at zero: the subtracted term can exceed the shifter for narrow formats
  g[8] = std::max(0.0, (M + 1) * shift * c.mux2 - kmax * (c.full_adder - c.and2));
  g[9] = (E - 1) * c.full_adder + c.half_adder;
  g[10] = (M + 1) * c.half_adder;
  for (double v : g) b.total += v;
  return b;
}

std::vector<GateReportRow> gate_ratio_report(const std::vector<GateParams>& design_points) {
  if (design_points.empty()) throw std::invalid_argument("gate report needs at least one design point");
  std::vector<GateReportRow> rows;
  rows.reserve(design_points.size());
  for (const GateParams& p : design_points) rows.push_back({p, gate_breakdown(p), 0.0});
  const double reference = rows.front().breakdown.total;
  for (auto& r : rows) r.ratio_percent = 100.0 * r.breakdown.total / reference;
  return rows;
}

void write_gate_report_csv(std::ostream& os, const std::vector<GateReportRow>& rows) {
  os << "m,e,M,E,F,shift_bits,total,ratio_percent";
  for (auto name : kNames) os << ',' << name;
  os << '\n';
  for (const auto& r : rows) {
    const GateParams& p = r.params;
    os << p.m << ',' << p.e << ',' << p.M << ',' << p.E << ',' << p.canvas_bits() << ','
       << p.shift_bits() << ',' << r.breakdown.total << ',' << std::fixed << std::setprecision(2)
       << r.ratio_percent << std::defaultfloat;
    for (double v : r.breakdown.components) os << ',' << v;
    os << '\n';
  }
}

void print_gate_report(std::ostream& os, const std::vector<GateReportRow>& rows) {
  os << std::setw(4) << "m" << std::setw(4) << "e" << std::setw(5) << "M" << std::setw(4) << "E"
     << std::setw(5) << "F" << std::setw(8) << "log2k" << std::setw(9) << "gates" << std::setw(9)
     << "ratio%" << '\n';
  for (const auto& r : rows) {
    const GateParams& p = r.params;
    os << std::setw(4) << p.m << std::setw(4) << p.e << std::setw(5) << p.M << std::setw(4) << p.E
       << std::setw(5) << p.canvas_bits() << std::setw(8) << p.shift_bits() << std::setw(9)
       << r.breakdown.total << std::setw(9) << std::fixed << std::setprecision(1)
       << r.ratio_percent << std::defaultfloat << '\n';
  }
}

}  // namespace lba
