// lbasim: command-line front end over the lba C API.
//
// Exit codes: 0 ok, 1 run failure, 2 configuration/usage error.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lba/lba.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRun = 1;
constexpr int kExitConfig = 2;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
};

int report_failure(lba_status st, const char* what) {
  std::cerr << "lbasim: " << what << ": " << lba_status_name(st) << "\n" << lba_last_error() << "\n";
  switch (st) {
    case LBA_ERR_CONFIG:
    case LBA_ERR_PARSE:
    case LBA_ERR_INVALID_ARGUMENT:
      return kExitConfig;
    default:
      return kExitRun;
  }
}

std::string fetch_text(lba_status (*fn)(const lba_run*, char*, size_t, size_t*), const lba_run* run) {
  size_t len = 0;
  fn(run, nullptr, 0, &len);
  std::string text(len + 1, '\0');
  fn(run, text.data(), text.size(), &len);
  text.resize(len);
  return text;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Loads --config and applies the global overrides; returns an exit code on failure.
std::optional<int> open_run(const Globals& g, lba_run** run) {
  if (g.config.empty()) {
    std::cerr << "lbasim: --config is required for this command\n";
    return kExitConfig;
  }
  if (lba_status st = lba_run_load(g.config.c_str(), run); st != LBA_OK)
    return report_failure(st, "loading config");
  if (g.seed) lba_run_set_seed(*run, *g.seed);
  if (g.threads) {
    if (lba_status st = lba_run_set_threads(*run, *g.threads); st != LBA_OK) {
      lba_run_free(*run);
      return report_failure(st, "--threads");
    }
  }
  if (!g.out.empty()) lba_run_set_out(*run, g.out.c_str());
  return std::nullopt;
}

int cmd_quantize(const std::string& value_text, const std::string& format, const std::string& mode_text,
                 bool no_underflow, int extra_mantissa, std::uint64_t seed) {
  lba_format_spec spec{};
  size_t pos = 0;
  if (lba_status st = lba_parse_format(format.c_str(), &spec, &pos); st != LBA_OK) {
    std::cerr << "lbasim: cannot parse format '" << format << "': " << lba_last_error() << "\n"
              << "  " << format << "\n  " << std::string(pos, ' ') << "^\n";
    return kExitConfig;
  }
  double x = 0.0;
  try {
    size_t used = 0;
    x = std::stod(value_text, &used);
    if (used != value_text.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    std::cerr << "lbasim: '" << value_text << "' is not a number\n";
    return kExitConfig;
  }
  lba_round_mode mode = LBA_ROUND_TRUNCATE;
  if (mode_text == "nearest") mode = LBA_ROUND_NEAREST;
  else if (mode_text == "stochastic") mode = LBA_ROUND_STOCHASTIC;

  double q = 0.0;
  std::string event;
  double abs_err = 0.0, rel_err = 0.0;
  if (spec.is_fixed) {
    if (lba_status st = lba_quantize_fixed(x, &spec.fixed_format, mode, seed, &q); st != LBA_OK)
      return report_failure(st, "quantize");
    const double hi = std::ldexp(std::ldexp(1.0, spec.fixed_format.total_bits - 1) - 1.0, -spec.fixed_format.bias);
    const double lo = -std::ldexp(1.0, spec.fixed_format.total_bits - spec.fixed_format.bias - 1);
    event = q == x ? "Exact" : (x > hi || x < lo) ? "Overflow" : (q == 0.0 ? "Underflow" : "Rounded");
    abs_err = std::fabs(q - x);
    rel_err = x != 0.0 ? abs_err / std::fabs(x) : 0.0;
  } else {
    if (spec.flex_bias) {
      std::cerr << "lbasim: flex bias is chosen per tensor; give an explicit bias (e.g. M4E3b4)\n";
      return kExitConfig;
    }
    const int uf = no_underflow ? 0 : 1;
    if (lba_status st = lba_quantize_float(x, &spec.float_format, mode, uf, extra_mantissa, seed, &q); st != LBA_OK)
      return report_failure(st, "quantize");
    if (mode == LBA_ROUND_STOCHASTIC) {
      event = q == x ? "Exact" : "Rounded";
      abs_err = std::fabs(q - x);
      rel_err = x != 0.0 ? abs_err / std::fabs(x) : 0.0;
    } else {
      lba_quant_event ev{};
      if (lba_status st = lba_classify(x, &spec.float_format, mode, uf, extra_mantissa, &ev); st != LBA_OK)
        return report_failure(st, "classify");
      static const char* names[] = {"Exact", "Underflow", "Overflow", "Swamp"};
      event = names[ev.kind];
      abs_err = ev.absolute_error;
      rel_err = ev.relative_error;
    }
  }
  std::cout << "input      " << fmt_double(x) << "\n"
            << "format     " << format << "\n"
            << "mode       " << mode_text << "\n"
            << "quantized  " << fmt_double(q) << "\n"
            << "event      " << event << "\n"
            << "abs_error  " << fmt_double(abs_err) << "\n"
            << "rel_error  " << fmt_double(rel_err) << "\n";
  return kExitOk;
}

void print_epoch(const lba_epoch_metrics* m, void*) {
  std::printf("epoch %3d  %-12s lr %-10.4g loss %-10.5f train %6.2f%%  eval %6.2f%%  stuck %.4f\n",
              m->epoch, m->stage_name, m->lr, m->train_loss, 100.0 * m->train_acc,
              100.0 * m->eval_acc, m->stuck_rate);
  std::fflush(stdout);
}

int cmd_train(const Globals& g) {
  lba_run* run = nullptr;
  if (auto code = open_run(g, &run)) return *code;
  const lba_status st = lba_run_train(run, print_epoch, nullptr);
  if (st != LBA_OK) {
    lba_run_free(run);
    return report_failure(st, "train");
  }
  std::cout << fetch_text(lba_run_result_json, run) << "\n";
  lba_run_free(run);
  return kExitOk;
}

int run_simple(const Globals& g, const std::string& checkpoint, lba_status (*fn)(lba_run*), const char* what) {
  lba_run* run = nullptr;
  if (auto code = open_run(g, &run)) return *code;
  if (!checkpoint.empty()) lba_run_set_checkpoint(run, checkpoint.c_str());
  const lba_status st = fn(run);
  if (st != LBA_OK) {
    lba_run_free(run);
    return report_failure(st, what);
  }
  std::cout << fetch_text(lba_run_result_json, run) << "\n";
  lba_run_free(run);
  return kExitOk;
}

int cmd_gates(const Globals& g, const std::vector<std::string>& points_text) {
  if (!g.config.empty() && points_text.empty()) return run_simple(g, "", lba_run_gates, "gates");
  std::vector<lba_gate_point> points;
  if (points_text.empty()) {
    points = {{4, 3, 23, 8}, {4, 3, 10, 5}, {4, 3, 7, 4}};
  } else {
    for (const auto& t : points_text) {
      lba_gate_point p{};
      char tail = 0;
      if (std::sscanf(t.c_str(), "%d,%d,%d,%d%c", &p.m, &p.e, &p.M, &p.E, &tail) != 4) {
        std::cerr << "lbasim: design point '" << t << "' must be m,e,M,E\n";
        return kExitConfig;
      }
      points.push_back(p);
    }
  }
  std::vector<lba_gate_row> rows(points.size());
  if (lba_status st = lba_gate_report(points.data(), points.size(), rows.data()); st != LBA_OK)
    return report_failure(st, "gates");
  std::printf("%4s %4s %4s %4s %5s %6s %9s %8s\n", "m", "e", "M", "E", "F", "shift", "gates", "ratio%");
  for (std::size_t i = 0; i < points.size(); ++i)
    std::printf("%4d %4d %4d %4d %5d %6d %9.0f %8.1f\n", points[i].m, points[i].e, points[i].M,
                points[i].E, rows[i].canvas_bits, rows[i].shift_bits, rows[i].total,
                rows[i].ratio_percent);
  if (!g.out.empty()) {
    size_t len = 0;
    lba_gate_report_csv(points.data(), points.size(), nullptr, 0, &len);
    std::string csv(len + 1, '\0');
    lba_gate_report_csv(points.data(), points.size(), csv.data(), csv.size(), &len);
    csv.resize(len);
    std::error_code ec;
    std::filesystem::create_directories(g.out, ec);
    std::ofstream os(std::filesystem::path(g.out) / "gates.csv");
    if (!(os << csv)) {
      std::cerr << "lbasim: cannot write gates.csv in '" << g.out << "'\n";
      return kExitRun;
    }
  }
  return kExitOk;
}

int cmd_report(const Globals& g, std::string dir) {
  if (dir.empty()) dir = g.out;
  if (dir.empty()) {
    std::cerr << "lbasim: report needs a run directory (argument or --out)\n";
    return kExitConfig;
  }
  size_t len = 0;
  if (lba_status st = lba_report(dir.c_str(), nullptr, 0, &len); st != LBA_OK) return report_failure(st, "report");
  std::string text(len + 1, '\0');
  lba_report(dir.c_str(), text.data(), text.size(), &len);
  text.resize(len);
  std::cout << text << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low bit-width accumulator simulator"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  int threads = 1;
  auto* seed_opt = app.add_option("--seed", seed, "Override the run seed");
  auto* threads_opt = app.add_option("--threads", threads, "Worker threads for GEMM kernels")
                          ->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--out", g.out, "Output directory (overrides the config)");

  auto* quantize = app.add_subcommand("quantize", "Quantize one value and classify the event");
  std::string value_text, format, mode = "truncate";
  bool no_underflow = false;
  int extra_mantissa = 0;
  quantize->add_option("value", value_text, "Value to quantize")->required();
  quantize->add_option("format", format, "Format string, e.g. M7E4b10 or FIXED8b4")->required();
  quantize->add_option("--mode", mode, "Rounding mode")
      ->check(CLI::IsMember({"truncate", "nearest", "stochastic"}));
  quantize->add_flag("--no-underflow", no_underflow, "Keep values below the underflow threshold");
  quantize->add_option("--extra-mantissa", extra_mantissa, "Additional mantissa bits")
      ->check(CLI::NonNegativeNumber);

  auto* train = app.add_subcommand("train", "Train a model as described by --config");
  auto* zeroshot = app.add_subcommand("zeroshot", "Swap FMA for FMAq on a checkpoint and sweep formats");
  std::string checkpoint;
  zeroshot->add_option("--checkpoint", checkpoint, "Model checkpoint (overrides the config)");
  auto* landscape = app.add_subcommand("landscape", "Probe the loss landscape around a checkpoint");
  landscape->add_option("--checkpoint", checkpoint, "Model checkpoint (overrides the config)");
  auto* gates = app.add_subcommand("gates", "Gate-count estimate of FMAq datapaths");
  std::vector<std::string> points;
  gates->add_option("--point", points, "Design point m,e,M,E (repeatable; first is the reference)");
  auto* report = app.add_subcommand("report", "Summarize a training run directory");
  std::string report_dir;
  report->add_option("dir", report_dir, "Run directory");

  for (auto* sub : {quantize, train, zeroshot, landscape, gates, report}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  if (*seed_opt) g.seed = seed;
  if (*threads_opt) {
    g.threads = threads;
    lba_set_threads(threads);
  }

  if (*quantize) return cmd_quantize(value_text, format, mode, no_underflow, extra_mantissa, g.seed.value_or(1));
  if (*train) return cmd_train(g);
  if (*zeroshot) return run_simple(g, checkpoint, lba_run_zeroshot, "zeroshot");
  if (*landscape) return run_simple(g, checkpoint, lba_run_landscape, "landscape");
  if (*gates) return cmd_gates(g, points);
  if (*report) return cmd_report(g, report_dir);
  return kExitConfig;
}
