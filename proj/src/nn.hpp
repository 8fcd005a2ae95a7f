#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "data.hpp"
#include "fmaq.hpp"
#include "formats.hpp"
#include "grad.hpp"
#include "matrix.hpp"

namespace lba {

/// Weight/activation quantization applied around the LBA GEMMs.
struct WaQuant {
  FloatFormat format{4, 3, 4};
  bool flex_bias = true;
  RoundMode weight_round = RoundMode::Stochastic;
  RoundMode activation_round = RoundMode::Nearest;
};

/// Largest integer bias b with max|t| < R_OF(format with bias b); the format
/// default 2^(E-1) for an all-zero tensor.
int flex_bias(std::span<const float> tensor, const FloatFormat& fmt);

/// Fully-connected layer whose GEMM runs on simulated FMAq units.
struct LbaLinear {
  Matrix<float> weight;  // out x in
  std::vector<float> bias;
  bool has_bias = true;
  std::optional<FmaqConfig> fmaq;  // nullopt: exact accumulation
  SteKind ste = SteKind::Identity;
  DiffParams diff{};
  std::optional<WaQuant> wa;

  std::size_t inputs() const { return weight.cols(); }
  std::size_t outputs() const { return weight.rows(); }

  /// Weights as seen by the GEMM (quantized copy when W/A quantization is on).
  const Matrix<float>& effective_weight() const { return wa ? qweight_ : weight; }
  /// Re-quantizes the weight copy; stochastic rounding draws from rng,
  /// a null rng falls back to nearest rounding.
  void refresh_quantized_weight(std::mt19937_64* rng);

 private:
  Matrix<float> qweight_;
};

/// Arithmetic shared by every layer of a model.
struct Arithmetic {
  std::optional<FmaqConfig> fmaq;
  SteKind ste = SteKind::Identity;
  DiffParams diff{};
  std::optional<WaQuant> wa;
};

struct LayerCache {
  Matrix<float> input;       // GEMM input after activation quantization
  Matrix<double> gemm_out;   // before bias
  Matrix<float> output;      // after bias and ReLU
};

struct ForwardCache {
  std::vector<LayerCache> layers;
};

struct LayerGrad {
  Matrix<double> weight;
  std::vector<double> bias;
};

/// ReLU MLP: activation quantization (all but the classifier) -> LBA GEMM ->
/// bias add -> ReLU (all but the classifier).
class Mlp {
 public:
  Mlp() = default;
  /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases, drawn from the
  /// "init" stream of seed.
  static Mlp create(const std::vector<std::size_t>& widths, std::uint64_t seed);
  static Mlp from_checkpoint(const std::vector<CheckpointLayer>& layers);
  std::vector<CheckpointLayer> to_checkpoint() const;

  void set_arithmetic(const Arithmetic& arith);
  void set_underflow(bool enabled);
  void refresh_quantized_weights(std::mt19937_64* rng);

  std::vector<LbaLinear>& layers() { return layers_; }
  const std::vector<LbaLinear>& layers() const { return layers_; }
  std::size_t input_size() const { return layers_.front().inputs(); }
  std::size_t output_size() const { return layers_.back().outputs(); }

  Matrix<float> forward(const Matrix<float>& x, ForwardCache* cache = nullptr) const;
  /// grad_logits is dLoss/dlogits; returns per-layer gradients.
  std::vector<LayerGrad> backward(const ForwardCache& cache, const Matrix<double>& grad_logits) const;

 private:
  std::vector<LbaLinear> layers_;
};

struct LossResult {
  double loss = 0.0;
  std::size_t correct = 0;
  Matrix<double> grad;  // d(mean loss)/dlogits
};

/// Mean softmax cross-entropy in double precision.
LossResult softmax_cross_entropy(const Matrix<float>& logits, std::span<const int> labels,
                                 bool with_grad = true);

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(const Mlp& model, AdamParams params);
  void step(Mlp& model, const std::vector<LayerGrad>& grads, double lr);

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamParams params_;
  std::vector<Moments> weight_state_, bias_state_;
  long long t_ = 0;
};

enum class LrShape { Constant, Cosine, Step };
LrShape parse_lr_shape(const std::string& text);
std::string to_string(LrShape shape);

struct Stage {
  std::string name = "main";
  int epochs = 1;
  double lr = 1e-3;
  double lr_end = 0.0;  // cosine target
  LrShape shape = LrShape::Constant;
  double gamma = 0.95;  // step decay per epoch
  bool underflow = true;

  double lr_at(int epoch_in_stage) const;
};

struct TrainSchedule {
  std::vector<Stage> stages;
};

struct TrainOptions {
  std::size_t batch_size = 16;
  AdamParams adam{};
  std::uint64_t seed = 1;
  std::size_t stuck_samples = 256;  // rows of the training set used for the stuck rate
};

struct EpochMetrics {
  int epoch = 0;  // 1-based, across stages
  std::size_t stage = 0;
  std::string stage_name;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  double stuck_rate = 0.0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

Evaluation evaluate(const Mlp& model, const Dataset& data, std::size_t batch_size = 500);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs the stages in order. Switching stages only toggles the FMAq
/// underflow flag. Throws DivergenceError on a non-finite loss.
std::vector<EpochMetrics> train(Mlp& model, const Dataset& train_set, const Dataset& eval_set,
                                const TrainSchedule& schedule, const TrainOptions& opts,
                                const EpochCallback& on_epoch = {});

/// Fraction of (nonzero activation, weight) pairs of the LBA layers whose
/// product falls below the product format's underflow threshold, i.e. is
/// flushed to zero when underflow is enabled. 0 when no such pair exists.
double stuck_underflow_rate(const Mlp& model, const Matrix<float>& x,
                            const std::optional<FmaqConfig>& cfg_override = std::nullopt);

/// Accuracy after swapping every GEMM onto the given FMAq config, without
/// retraining. nullopt evaluates exact accumulation.
double zeroshot_accuracy(const Mlp& model, const Dataset& data,
                         const std::optional<FmaqConfig>& cfg);

struct LandscapeSpec {
  double radius = 1.0;
  std::size_t resolution = 11;  // points per axis
  std::uint64_t seed = 1;
  bool filter_normalize = true;
};

struct LandscapeVariant {
  std::string name;
  std::optional<FmaqConfig> fmaq;
};

/// Loss over the grid W + a d1 + b d2, a, b in linspace(-r, r, resolution),
/// for each variant; grids are resolution x resolution, row index = a. A zero
/// radius gives a 1 x 1 grid at the model's own weights.
std::vector<Matrix<double>> landscape_probe(const Mlp& model, const Dataset& sample,
                                            const LandscapeSpec& spec,
                                            const std::vector<LandscapeVariant>& variants);

/// Full FMAq, underflow excluded, swamping suppressed (+16 mantissa bits).
std::vector<LandscapeVariant> standard_landscape_variants(const FmaqConfig& cfg);

}  // namespace lba
