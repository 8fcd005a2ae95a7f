/* Low bit-width accumulator simulation: C interface.
 *
 * Every function returns an lba_status. On failure, lba_last_error() holds a
 * message for the calling thread until its next failing call. Handles are
 * opaque and owned by the caller; release them with the matching _free.
 * Functions that return text copy it into (buf, cap) and report the full
 * length (excluding the terminator) through *len, so a NULL/0 buffer can be
 * used to query the size.
 */
#ifndef LBA_LBA_H
#define LBA_LBA_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(LBA_BUILDING_LIBRARY)
#    define LBA_API __declspec(dllexport)
#  else
#    define LBA_API __declspec(dllimport)
#  endif
#else
#  define LBA_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum lba_status {
  LBA_OK = 0,
  LBA_ERR_INVALID_ARGUMENT = 1,
  LBA_ERR_PARSE = 2,
  LBA_ERR_CONFIG = 3,
  LBA_ERR_IO = 4,
  LBA_ERR_SHAPE = 5,
  LBA_ERR_UNSUPPORTED = 6,
  LBA_ERR_DIVERGED = 7,
  LBA_ERR_BUFFER_TOO_SMALL = 8,
  LBA_ERR_INTERNAL = 9
} lba_status;

LBA_API const char* lba_last_error(void);
LBA_API const char* lba_status_name(lba_status status);
LBA_API const char* lba_version(void);

/* Worker threads for the GEMM kernels; results do not depend on it. */
LBA_API lba_status lba_set_threads(int threads);

/* ---- number formats --------------------------------------------------- */

typedef struct lba_float_format {
  int mantissa_bits;
  int exponent_bits;
  int bias;
} lba_float_format;

typedef struct lba_fixed_format {
  int total_bits;
  int bias;
} lba_fixed_format;

typedef enum lba_round_mode {
  LBA_ROUND_TRUNCATE = 0,
  LBA_ROUND_NEAREST = 1,
  LBA_ROUND_STOCHASTIC = 2
} lba_round_mode;

typedef enum lba_event_kind {
  LBA_EVENT_EXACT = 0,
  LBA_EVENT_UNDERFLOW = 1,
  LBA_EVENT_OVERFLOW = 2,
  LBA_EVENT_SWAMP = 3
} lba_event_kind;

typedef struct lba_format_spec {
  int is_fixed;  /* 0: float_format is valid, 1: fixed_format is valid */
  int flex_bias; /* float only: bias chosen per tensor */
  lba_float_format float_format;
  lba_fixed_format fixed_format;
} lba_format_spec;

typedef struct lba_quant_event {
  lba_event_kind kind;
  double absolute_error;
  double relative_error;
} lba_quant_event;

/* "M7E4b10", "M4E3" (default bias), "M4E3flex", "FIXED8b4". On a parse
 * error *error_position (if non-NULL) receives the 0-based offset. */
LBA_API lba_status lba_parse_format(const char* text, lba_format_spec* out, size_t* error_position);

/* Stochastic rounding draws from a stream seeded by `seed`. */
LBA_API lba_status lba_quantize_float(double x, const lba_float_format* fmt, lba_round_mode mode,
                                      int underflow, int extra_mantissa, uint64_t seed, double* out);
LBA_API lba_status lba_quantize_fixed(double x, const lba_fixed_format* fmt, lba_round_mode mode,
                                      uint64_t seed, double* out);
LBA_API lba_status lba_classify(double x, const lba_float_format* fmt, lba_round_mode mode,
                                int underflow, int extra_mantissa, lba_quant_event* out);

/* ---- quantized FMA and GEMM ------------------------------------------ */

typedef struct lba_fmaq_config {
  lba_float_format prod;
  lba_float_format acc;
  int chunk_size;
  int underflow;
  int acc_extra_mantissa;
} lba_fmaq_config;

typedef enum lba_ste_kind {
  LBA_STE_IDENTITY = 0,
  LBA_STE_RECURSIVE_OF = 1,
  LBA_STE_IMMEDIATE_OF = 2,
  LBA_STE_IMMEDIATE_DIFF = 3
} lba_ste_kind;

/* eps1 = NaN selects 2^-126. */
typedef struct lba_diff_params {
  double eps1;
  double eps2;
} lba_diff_params;

LBA_API lba_fmaq_config lba_fmaq_config_default(void);
LBA_API lba_diff_params lba_diff_params_default(void);
/* Accumulator bias = product bias - log2(chunk)/2, same M/E as the product. */
LBA_API lba_status lba_fmaq_config_bias_rule(const lba_float_format* prod, int chunk_size,
                                             lba_fmaq_config* out);
LBA_API lba_status lba_fmaq(double x, double w, double s, const lba_fmaq_config* cfg, double* out);

/* Row-major Y(m x n) = A(m x k) B(k x n), one chunked FMAq accumulation per
 * output element. */
LBA_API lba_status lba_gemm_forward(const double* a, const double* b, size_t m, size_t k, size_t n,
                                    const lba_fmaq_config* cfg, double* y);
/* Gradients of sum(G .* Y) under the estimator; grad_a is m x k, grad_b k x n. */
LBA_API lba_status lba_gemm_backward(const double* a, const double* b, const double* g, size_t m,
                                     size_t k, size_t n, const lba_fmaq_config* cfg,
                                     lba_ste_kind ste, const lba_diff_params* diff,
                                     double* grad_a, double* grad_b);
/* Per-summand event trace of the forward GEMM, written as CSV to `path`. */
LBA_API lba_status lba_gemm_trace_csv(const double* a, const double* b, size_t m, size_t k,
                                      size_t n, const lba_fmaq_config* cfg,
                                      const lba_diff_params* diff, const char* path);

/* ---- gate-count model ------------------------------------------------- */

typedef struct lba_gate_point {
  int m, e; /* multiplier input mantissa/exponent */
  int M, E; /* product/accumulator mantissa/exponent */
} lba_gate_point;

typedef struct lba_gate_row {
  int canvas_bits;
  int shift_bits;
  double total;
  double ratio_percent; /* relative to the first point */
} lba_gate_row;

LBA_API lba_status lba_gate_report(const lba_gate_point* points, size_t count, lba_gate_row* rows);
LBA_API lba_status lba_gate_report_csv(const lba_gate_point* points, size_t count, char* buf,
                                       size_t cap, size_t* len);

/* ---- datasets and models ---------------------------------------------- */

typedef struct lba_dataset lba_dataset;
typedef struct lba_model lba_model;

LBA_API lba_status lba_dataset_load_idx(const char* images, const char* labels, lba_dataset** out);
LBA_API size_t lba_dataset_size(const lba_dataset* ds);
LBA_API size_t lba_dataset_dimension(const lba_dataset* ds);
LBA_API void lba_dataset_free(lba_dataset* ds);

/* widths[0] inputs ... widths[count-1] outputs, ReLU between layers. */
LBA_API lba_status lba_model_create(const size_t* widths, size_t count, uint64_t seed, lba_model** out);
LBA_API lba_status lba_model_load(const char* checkpoint, lba_model** out);
LBA_API lba_status lba_model_save(const lba_model* model, const char* checkpoint);
LBA_API void lba_model_free(lba_model* model);
/* cfg NULL restores exact accumulation. */
LBA_API lba_status lba_model_set_fmaq(lba_model* model, const lba_fmaq_config* cfg, lba_ste_kind ste);
/* x is rows x input_size row-major; logits receives rows x output_size. */
LBA_API lba_status lba_model_forward(const lba_model* model, const float* x, size_t rows,
                                     size_t cols, float* logits);
LBA_API lba_status lba_model_evaluate(const lba_model* model, const lba_dataset* ds,
                                      double* accuracy, double* loss);
LBA_API lba_status lba_model_stuck_rate(const lba_model* model, const lba_dataset* ds,
                                        size_t samples, double* rate);

/* ---- configured runs -------------------------------------------------- */

typedef struct lba_run lba_run;

typedef struct lba_epoch_metrics {
  int epoch;
  int stage;
  const char* stage_name;
  double lr;
  double train_loss;
  double train_acc;
  double eval_acc;
  double stuck_rate;
} lba_epoch_metrics;

typedef void (*lba_epoch_callback)(const lba_epoch_metrics* metrics, void* user);

/* Parses and validates a JSON run configuration; LBA_ERR_CONFIG lists every
 * problem found, one per line. Relative data and checkpoint paths resolve
 * against the config file's directory (base_dir for lba_run_parse). */
LBA_API lba_status lba_run_load(const char* config_path, lba_run** out);
LBA_API lba_status lba_run_parse(const char* json_text, const char* base_dir, lba_run** out);
LBA_API void lba_run_free(lba_run* run);

LBA_API lba_status lba_run_set_seed(lba_run* run, uint64_t seed);
LBA_API lba_status lba_run_set_threads(lba_run* run, int threads);
LBA_API lba_status lba_run_set_out(lba_run* run, const char* out_dir);
LBA_API lba_status lba_run_set_checkpoint(lba_run* run, const char* checkpoint);
LBA_API lba_status lba_run_config_json(const lba_run* run, char* buf, size_t cap, size_t* len);

/* Writes metrics.csv, checkpoint.lba and summary.json into the output dir. */
LBA_API lba_status lba_run_train(lba_run* run, lba_epoch_callback on_epoch, void* user);
/* Needs a model checkpoint; writes zeroshot.csv. */
LBA_API lba_status lba_run_zeroshot(lba_run* run);
/* Needs a model checkpoint and an fmaq config; writes landscape_<variant>.csv. */
LBA_API lba_status lba_run_landscape(lba_run* run);
/* Writes gates.csv for the configured design points. */
LBA_API lba_status lba_run_gates(lba_run* run);
/* JSON summary of the most recent train/zeroshot/landscape/gates call. */
LBA_API lba_status lba_run_result_json(const lba_run* run, char* buf, size_t cap, size_t* len);

/* Condenses a run directory's metrics.csv into JSON. */
LBA_API lba_status lba_report(const char* run_dir, char* buf, size_t cap, size_t* len);

#ifdef __cplusplus
}
#endif

#endif /* LBA_LBA_H */
