#include "lba/lba.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "parallel.hpp"
#include "rng.hpp"
#include "run.hpp"

using namespace lba;

struct lba_dataset {
  Dataset data;
};

struct lba_model {
  Mlp model;
};

struct lba_run {
  RunConfig config;
  nlohmann::json result;
};

namespace {

thread_local std::string g_last_error;

lba_status fail(lba_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

/// Maps exceptions from the core onto status codes.
template <typename F>
lba_status guarded(F&& f) {
  try {
    f();
    return LBA_OK;
  } catch (const ConfigError& e) {
    return fail(LBA_ERR_CONFIG, e.what());
  } catch (const FormatParseError& e) {
    return fail(LBA_ERR_PARSE, e.what());
  } catch (const IdxError& e) {
    return fail(LBA_ERR_IO, e.what());
  } catch (const CheckpointError& e) {
    return fail(LBA_ERR_IO, e.what());
  } catch (const ShapeError& e) {
    return fail(LBA_ERR_SHAPE, e.what());
  } catch (const UnsupportedOperation& e) {
    return fail(LBA_ERR_UNSUPPORTED, e.what());
  } catch (const DivergenceError& e) {
    return fail(LBA_ERR_DIVERGED, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(LBA_ERR_INVALID_ARGUMENT, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(LBA_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(LBA_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(LBA_ERR_INTERNAL, "unknown error");
  }
}

#define LBA_REQUIRE(cond, what) \
  if (!(cond)) return fail(LBA_ERR_INVALID_ARGUMENT, what)

FloatFormat to_core(const lba_float_format& f) { return {f.mantissa_bits, f.exponent_bits, f.bias}; }
lba_float_format to_c(const FloatFormat& f) { return {f.mantissa_bits, f.exponent_bits, f.bias}; }

FmaqConfig to_core(const lba_fmaq_config& c) {
  FmaqConfig cfg;
  cfg.prod_fmt = to_core(c.prod);
  cfg.acc_fmt = to_core(c.acc);
  cfg.chunk_size = c.chunk_size;
  cfg.underflow = c.underflow != 0;
  cfg.acc_extra_mantissa = c.acc_extra_mantissa;
  cfg.validate();
  return cfg;
}

lba_fmaq_config to_c(const FmaqConfig& cfg) {
  return {to_c(cfg.prod_fmt), to_c(cfg.acc_fmt), cfg.chunk_size, cfg.underflow ? 1 : 0,
          cfg.acc_extra_mantissa};
}

RoundMode to_core(lba_round_mode m) {
  switch (m) {
    case LBA_ROUND_TRUNCATE: return RoundMode::Truncate;
    case LBA_ROUND_NEAREST: return RoundMode::Nearest;
    case LBA_ROUND_STOCHASTIC: return RoundMode::Stochastic;
  }
  throw std::invalid_argument("unknown rounding mode " + std::to_string(static_cast<int>(m)));
}

SteKind to_core(lba_ste_kind k) {
  switch (k) {
    case LBA_STE_IDENTITY: return SteKind::Identity;
    case LBA_STE_RECURSIVE_OF: return SteKind::RecursiveOF;
    case LBA_STE_IMMEDIATE_OF: return SteKind::ImmediateOF;
    case LBA_STE_IMMEDIATE_DIFF: return SteKind::ImmediateDIFF;
  }
  throw std::invalid_argument("unknown STE kind " + std::to_string(static_cast<int>(k)));
}

DiffParams to_core(const lba_diff_params* d) {
  DiffParams p;
  if (d) {
    p.eps1 = d->eps1;
    p.eps2 = d->eps2;
  }
  return p;
}

lba_status copy_text(const std::string& text, char* buf, std::size_t cap, std::size_t* len) {
  if (len) *len = text.size();
  if (buf == nullptr || cap == 0) return buf == nullptr && cap == 0 ? LBA_OK : fail(LBA_ERR_INVALID_ARGUMENT, "null buffer");
  if (cap <= text.size()) {
    std::memcpy(buf, text.data(), cap - 1);
    buf[cap - 1] = '\0';
    return fail(LBA_ERR_BUFFER_TOO_SMALL, "buffer holds " + std::to_string(cap) + " bytes, " +
                                              std::to_string(text.size() + 1) + " needed");
  }
  std::memcpy(buf, text.data(), text.size() + 1);
  return LBA_OK;
}

template <typename T>
Matrix<T> view(const T* p, std::size_t rows, std::size_t cols) {
  return Matrix<T>(rows, cols, std::vector<T>(p, p + rows * cols));
}

std::vector<GateParams> gate_points(const lba_gate_point* points, std::size_t count) {
  std::vector<GateParams> out;
  for (std::size_t i = 0; i < count; ++i) {
    GateParams p;
    p.m = points[i].m;
    p.e = points[i].e;
    p.M = points[i].M;
    p.E = points[i].E;
    out.push_back(p);
  }
  return out;
}

bool overflow_mul(std::size_t a, std::size_t b) {
  return a != 0 && b > std::numeric_limits<std::size_t>::max() / a;
}

}  // namespace

extern "C" {

const char* lba_last_error(void) { return g_last_error.c_str(); }

const char* lba_status_name(lba_status status) {
  switch (status) {
    case LBA_OK: return "ok";
    case LBA_ERR_INVALID_ARGUMENT: return "invalid argument";
    case LBA_ERR_PARSE: return "parse error";
    case LBA_ERR_CONFIG: return "config error";
    case LBA_ERR_IO: return "i/o error";
    case LBA_ERR_SHAPE: return "shape mismatch";
    case LBA_ERR_UNSUPPORTED: return "unsupported operation";
    case LBA_ERR_DIVERGED: return "training diverged";
    case LBA_ERR_BUFFER_TOO_SMALL: return "buffer too small";
    case LBA_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* lba_version(void) { return "1.0.0"; }

lba_status lba_set_threads(int threads) {
  LBA_REQUIRE(threads >= 1, "thread count must be at least 1");
  return guarded([&] { set_thread_count(threads); });
}

lba_status lba_parse_format(const char* text, lba_format_spec* out, size_t* error_position) {
  LBA_REQUIRE(text && out, "null argument");
  try {
    const FormatSpec spec = parse_format(text);
    out->is_fixed = spec.kind == FormatSpec::Kind::Fixed;
    out->flex_bias = spec.flex_bias;
    out->float_format = to_c(spec.float_format);
    out->fixed_format = {spec.fixed_format.total_bits, spec.fixed_format.bias};
    return LBA_OK;
  } catch (const FormatParseError& e) {
    if (error_position) *error_position = e.position();
    return fail(LBA_ERR_PARSE, e.what());
  } catch (const std::exception& e) {
    return fail(LBA_ERR_PARSE, e.what());
  }
}

lba_status lba_quantize_float(double x, const lba_float_format* fmt, lba_round_mode mode,
                              int underflow, int extra_mantissa, uint64_t seed, double* out) {
  LBA_REQUIRE(fmt && out, "null argument");
  return guarded([&] {
    const FloatFormat f = to_core(*fmt);
    f.validate(extra_mantissa);
    const FloatQuantOptions opts{to_core(mode), underflow != 0, extra_mantissa};
    if (opts.mode == RoundMode::Stochastic) {
      auto rng = substream(seed, "stochastic-rounding");
      *out = quantize_float(x, f, opts, rng);
    } else {
      *out = quantize_float(x, f, opts);
    }
  });
}

lba_status lba_quantize_fixed(double x, const lba_fixed_format* fmt, lba_round_mode mode,
                              uint64_t seed, double* out) {
  LBA_REQUIRE(fmt && out, "null argument");
  return guarded([&] {
    const FixedFormat f{fmt->total_bits, fmt->bias};
    f.validate();
    if (to_core(mode) == RoundMode::Stochastic) {
      auto rng = substream(seed, "stochastic-rounding");
      *out = quantize_fixed(x, f, RoundMode::Stochastic, rng);
    } else {
      *out = quantize_fixed(x, f, to_core(mode));
    }
  });
}

lba_status lba_classify(double x, const lba_float_format* fmt, lba_round_mode mode, int underflow,
                        int extra_mantissa, lba_quant_event* out) {
  LBA_REQUIRE(fmt && out, "null argument");
  return guarded([&] {
    const FloatFormat f = to_core(*fmt);
    f.validate(extra_mantissa);
    const QuantEvent ev = classify(x, f, {to_core(mode), underflow != 0, extra_mantissa});
    out->kind = static_cast<lba_event_kind>(static_cast<int>(ev.kind));
    out->absolute_error = ev.absolute_error;
    out->relative_error = ev.relative_error;
  });
}

lba_fmaq_config lba_fmaq_config_default(void) { return to_c(FmaqConfig{}); }

lba_diff_params lba_diff_params_default(void) {
  const DiffParams d;
  return {d.eps1, d.eps2};
}

lba_status lba_fmaq_config_bias_rule(const lba_float_format* prod, int chunk_size, lba_fmaq_config* out) {
  LBA_REQUIRE(prod && out, "null argument");
  return guarded([&] { *out = to_c(FmaqConfig::with_bias_rule(to_core(*prod), chunk_size)); });
}

lba_status lba_fmaq(double x, double w, double s, const lba_fmaq_config* cfg, double* out) {
  LBA_REQUIRE(cfg && out, "null argument");
  return guarded([&] { *out = fmaq(x, w, s, to_core(*cfg)); });
}

lba_status lba_gemm_forward(const double* a, const double* b, size_t m, size_t k, size_t n,
                            const lba_fmaq_config* cfg, double* y) {
  LBA_REQUIRE(a && b && cfg && y, "null argument");
  LBA_REQUIRE(!overflow_mul(m, k) && !overflow_mul(k, n) && !overflow_mul(m, n), "GEMM too large");
  return guarded([&] {
    const auto out = gemm_forward(view(a, m, k), view(b, k, n), to_core(*cfg));
    std::copy(out.values().begin(), out.values().end(), y);
  });
}

lba_status lba_gemm_backward(const double* a, const double* b, const double* g, size_t m, size_t k,
                             size_t n, const lba_fmaq_config* cfg, lba_ste_kind ste,
                             const lba_diff_params* diff, double* grad_a, double* grad_b) {
  LBA_REQUIRE(a && b && g && cfg && grad_a && grad_b, "null argument");
  LBA_REQUIRE(!overflow_mul(m, k) && !overflow_mul(k, n) && !overflow_mul(m, n), "GEMM too large");
  return guarded([&] {
    const auto r = gemm_backward(view(a, m, k), view(b, k, n), view(g, m, n), to_core(*cfg),
                                 to_core(ste), to_core(diff));
    std::copy(r.grad_a.values().begin(), r.grad_a.values().end(), grad_a);
    std::copy(r.grad_b.values().begin(), r.grad_b.values().end(), grad_b);
  });
}

lba_status lba_gemm_trace_csv(const double* a, const double* b, size_t m, size_t k, size_t n,
                              const lba_fmaq_config* cfg, const lba_diff_params* diff,
                              const char* path) {
  LBA_REQUIRE(a && b && cfg && path, "null argument");
  return guarded([&] {
    std::vector<EventTrace> traces;
    gemm_forward(view(a, m, k), view(b, k, n), to_core(*cfg), &traces, to_core(diff));
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw CheckpointError(std::string("cannot write '") + path + "'");
    write_trace_csv(os, traces, n);
  });
}

lba_status lba_gate_report(const lba_gate_point* points, size_t count, lba_gate_row* rows) {
  LBA_REQUIRE(points && rows && count > 0, "need at least one design point");
  return guarded([&] {
    const auto report = gate_ratio_report(gate_points(points, count));
    for (std::size_t i = 0; i < report.size(); ++i)
      rows[i] = {report[i].params.canvas_bits(), report[i].params.shift_bits(),
                 report[i].breakdown.total, report[i].ratio_percent};
  });
}

lba_status lba_gate_report_csv(const lba_gate_point* points, size_t count, char* buf, size_t cap,
                               size_t* len) {
  LBA_REQUIRE(points && count > 0, "need at least one design point");
  std::string text;
  const lba_status st = guarded([&] {
    std::ostringstream os;
    write_gate_report_csv(os, gate_ratio_report(gate_points(points, count)));
    text = os.str();
  });
  return st != LBA_OK ? st : copy_text(text, buf, cap, len);
}

lba_status lba_dataset_load_idx(const char* images, const char* labels, lba_dataset** out) {
  LBA_REQUIRE(images && labels && out, "null argument");
  return guarded([&] { *out = new lba_dataset{load_idx(images, labels)}; });
}

size_t lba_dataset_size(const lba_dataset* ds) { return ds ? ds->data.size() : 0; }
size_t lba_dataset_dimension(const lba_dataset* ds) { return ds ? ds->data.dimension() : 0; }
void lba_dataset_free(lba_dataset* ds) { delete ds; }

lba_status lba_model_create(const size_t* widths, size_t count, uint64_t seed, lba_model** out) {
  LBA_REQUIRE(widths && out, "null argument");
  return guarded([&] {
    *out = new lba_model{Mlp::create(std::vector<std::size_t>(widths, widths + count), seed)};
  });
}

lba_status lba_model_load(const char* checkpoint, lba_model** out) {
  LBA_REQUIRE(checkpoint && out, "null argument");
  return guarded([&] { *out = new lba_model{Mlp::from_checkpoint(load_checkpoint(checkpoint))}; });
}

lba_status lba_model_save(const lba_model* model, const char* checkpoint) {
  LBA_REQUIRE(model && checkpoint, "null argument");
  return guarded([&] { save_checkpoint(checkpoint, model->model.to_checkpoint()); });
}

void lba_model_free(lba_model* model) { delete model; }

lba_status lba_model_set_fmaq(lba_model* model, const lba_fmaq_config* cfg, lba_ste_kind ste) {
  LBA_REQUIRE(model, "null model");
  return guarded([&] {
    Arithmetic arith;
    if (cfg) arith.fmaq = to_core(*cfg);
    arith.ste = to_core(ste);
    model->model.set_arithmetic(arith);
  });
}

lba_status lba_model_forward(const lba_model* model, const float* x, size_t rows, size_t cols,
                             float* logits) {
  LBA_REQUIRE(model && x && logits, "null argument");
  LBA_REQUIRE(!overflow_mul(rows, cols), "input too large");
  return guarded([&] {
    const auto y = model->model.forward(view(x, rows, cols));
    std::copy(y.values().begin(), y.values().end(), logits);
  });
}

lba_status lba_model_evaluate(const lba_model* model, const lba_dataset* ds, double* accuracy,
                              double* loss) {
  LBA_REQUIRE(model && ds, "null argument");
  return guarded([&] {
    const Evaluation ev = evaluate(model->model, ds->data);
    if (accuracy) *accuracy = ev.accuracy;
    if (loss) *loss = ev.loss;
  });
}

lba_status lba_model_stuck_rate(const lba_model* model, const lba_dataset* ds, size_t samples,
                                double* rate) {
  LBA_REQUIRE(model && ds && rate, "null argument");
  return guarded([&] { *rate = stuck_underflow_rate(model->model, ds->data.head(samples).features); });
}

lba_status lba_run_load(const char* config_path, lba_run** out) {
  LBA_REQUIRE(config_path && out, "null argument");
  return guarded([&] { *out = new lba_run{load_run_config(config_path), {}}; });
}

lba_status lba_run_parse(const char* json_text, const char* base_dir, lba_run** out) {
  LBA_REQUIRE(json_text && out, "null argument");
  return guarded([&] {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError({std::string("config: not valid JSON (") + e.what() + ")"});
    }
    *out = new lba_run{parse_run_config(j, base_dir ? base_dir : "."), {}};
  });
}

void lba_run_free(lba_run* run) { delete run; }

lba_status lba_run_set_seed(lba_run* run, uint64_t seed) {
  LBA_REQUIRE(run, "null run");
  run->config.seed = seed;
  run->config.train.seed = seed;
  run->config.landscape.spec.seed = seed;
  return LBA_OK;
}

lba_status lba_run_set_threads(lba_run* run, int threads) {
  LBA_REQUIRE(run, "null run");
  LBA_REQUIRE(threads >= 1, "thread count must be at least 1");
  run->config.threads = threads;
  return LBA_OK;
}

lba_status lba_run_set_out(lba_run* run, const char* out_dir) {
  LBA_REQUIRE(run && out_dir && *out_dir, "empty output directory");
  run->config.out = out_dir;
  return LBA_OK;
}

lba_status lba_run_set_checkpoint(lba_run* run, const char* checkpoint) {
  LBA_REQUIRE(run && checkpoint, "null argument");
  run->config.init_checkpoint = checkpoint;
  return LBA_OK;
}

lba_status lba_run_config_json(const lba_run* run, char* buf, size_t cap, size_t* len) {
  LBA_REQUIRE(run, "null run");
  return copy_text(to_json(run->config).dump(2), buf, cap, len);
}

lba_status lba_run_train(lba_run* run, lba_epoch_callback on_epoch, void* user) {
  LBA_REQUIRE(run, "null run");
  return guarded([&] {
    set_thread_count(run->config.threads);
    const auto outcome = run_train(run->config, [&](const EpochMetrics& m) {
      if (!on_epoch) return;
      const lba_epoch_metrics cm{m.epoch, static_cast<int>(m.stage), m.stage_name.c_str(), m.lr,
                                 m.train_loss, m.train_acc, m.eval_acc, m.stuck_rate};
      on_epoch(&cm, user);
    });
    run->result = outcome.summary;
  });
}

namespace {

void require_checkpoint(const RunConfig& cfg) {
  if (cfg.init_checkpoint.empty())
    throw ConfigError({"model.checkpoint: a trained checkpoint is required"});
  if (!std::filesystem::exists(cfg.init_checkpoint))
    throw ConfigError({"model.checkpoint: file '" + cfg.init_checkpoint + "' does not exist"});
}

}  // namespace

lba_status lba_run_zeroshot(lba_run* run) {
  LBA_REQUIRE(run, "null run");
  return guarded([&] {
    require_checkpoint(run->config);
    set_thread_count(run->config.threads);
    const LoadedData data = load_data(run->config.data);
    const Mlp model = build_model(run->config);
    const auto rows = run_zeroshot(run->config, model, data.eval);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) j.push_back({{"label", r.label}, {"accuracy", r.accuracy}});
    run->result = {{"zeroshot", j}};
  });
}

lba_status lba_run_landscape(lba_run* run) {
  LBA_REQUIRE(run, "null run");
  return guarded([&] {
    require_checkpoint(run->config);
    if (!run->config.arithmetic.fmaq) throw ConfigError({"fmaq: landscape probing needs an FMAq config"});
    set_thread_count(run->config.threads);
    const LoadedData data = load_data(run->config.data);
    const Mlp model = build_model(run->config);
    const auto grids = run_landscape(run->config, model, data.eval.head(run->config.landscape.samples));
    const auto variants = standard_landscape_variants(*run->config.arithmetic.fmaq);
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t v = 0; v < grids.size(); ++v) {
      const std::size_t mid = grids[v].rows() / 2;
      j[variants[v].name] = {{"center_loss", grids[v](mid, mid)},
                             {"file", "landscape_" + variants[v].name + ".csv"}};
    }
    run->result = {{"landscape", j}};
  });
}

lba_status lba_run_gates(lba_run* run) {
  LBA_REQUIRE(run, "null run");
  return guarded([&] {
    const auto rows = gate_ratio_report(run->config.gates);
    std::filesystem::create_directories(run->config.out);
    std::ofstream os(std::filesystem::path(run->config.out) / "gates.csv", std::ios::trunc);
    if (!os) throw CheckpointError("cannot write gates.csv in '" + run->config.out + "'");
    write_gate_report_csv(os, rows);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows)
      j.push_back({{"m", r.params.m}, {"e", r.params.e}, {"M", r.params.M}, {"E", r.params.E},
                   {"F", r.params.canvas_bits()}, {"shift_bits", r.params.shift_bits()},
                   {"total", r.breakdown.total}, {"ratio_percent", r.ratio_percent}});
    run->result = {{"gates", j}};
  });
}

lba_status lba_run_result_json(const lba_run* run, char* buf, size_t cap, size_t* len) {
  LBA_REQUIRE(run, "null run");
  return copy_text(run->result.dump(2), buf, cap, len);
}

lba_status lba_report(const char* run_dir, char* buf, size_t cap, size_t* len) {
  LBA_REQUIRE(run_dir, "null argument");
  std::string text;
  const lba_status st = guarded([&] { text = summarize_run_dir(run_dir).dump(2); });
  return st != LBA_OK ? st : copy_text(text, buf, cap, len);
}

}  // extern "C"
