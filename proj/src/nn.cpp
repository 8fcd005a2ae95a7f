#include "nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "rng.hpp"

namespace lba {

int flex_bias(std::span<const float> tensor, const FloatFormat& fmt) {
  double peak = 0.0;
  for (float v : tensor) peak = std::max(peak, std::fabs(static_cast<double>(v)));
  if (peak == 0.0 || !std::isfinite(peak)) return 1 << (fmt.exponent_bits - 1);
  // smallest top exponent k with 2^k (2 - 2^-M) > peak
  const double top = 2.0 - std::ldexp(1.0, -fmt.mantissa_bits);
  int k = std::ilogb(peak) - 1;
  while (std::ldexp(top, k) <= peak) ++k;
  while (std::ldexp(top, k - 1) > peak) --k;
  return (1 << fmt.exponent_bits) - 1 - k;
}

namespace {

FloatFormat with_bias(const WaQuant& wa, std::span<const float> tensor) {
  FloatFormat fmt = wa.format;
  if (wa.flex_bias) fmt.bias = flex_bias(tensor, fmt);
  return fmt;
}

Matrix<float> quantize_tensor(const Matrix<float>& t, const WaQuant& wa, RoundMode mode,
                              std::mt19937_64* rng) {
  const FloatFormat fmt = with_bias(wa, t.values());
  FloatQuantOptions opts{mode, true, 0};
  if (mode == RoundMode::Stochastic && rng == nullptr) opts.mode = RoundMode::Nearest;
  Matrix<float> out(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double v = t.data()[i];
    out.data()[i] = static_cast<float>(opts.mode == RoundMode::Stochastic
                                           ? quantize_float(v, fmt, opts, *rng)
                                           : quantize_float(v, fmt, opts));
  }
  return out;
}

}  // namespace

void LbaLinear::refresh_quantized_weight(std::mt19937_64* rng) {
  if (!wa) {
    qweight_ = Matrix<float>();
    return;
  }
  qweight_ = quantize_tensor(weight, *wa, wa->weight_round, rng);
}

Mlp Mlp::create(const std::vector<std::size_t>& widths, std::uint64_t seed) {
  if (widths.size() < 2) throw std::invalid_argument("an MLP needs at least input and output widths");
  for (auto w : widths)
    if (w == 0) throw std::invalid_argument("layer widths must be positive");
  auto rng = substream(seed, "init");
  Mlp model;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    LbaLinear layer;
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    layer.weight = Matrix<float>(widths[l + 1], widths[l]);
    for (auto& v : layer.weight.values()) v = static_cast<float>(dist(rng));
    layer.bias.resize(widths[l + 1]);
    for (auto& v : layer.bias) v = static_cast<float>(dist(rng));
    model.layers_.push_back(std::move(layer));
  }
  return model;
}

Mlp Mlp::from_checkpoint(const std::vector<CheckpointLayer>& layers) {
  if (layers.empty()) throw CheckpointError("checkpoint has no layers");
  Mlp model;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (l > 0 && layers[l].weights.cols() != layers[l - 1].weights.rows())
      throw ShapeError("checkpoint layer " + std::to_string(l) + " expects " +
                       std::to_string(layers[l].weights.cols()) + " inputs but layer " +
                       std::to_string(l - 1) + " produces " +
                       std::to_string(layers[l - 1].weights.rows()));
    LbaLinear layer;
    layer.weight = layers[l].weights;
    layer.has_bias = layers[l].bias.has_value();
    layer.bias = layer.has_bias ? *layers[l].bias : std::vector<float>(layer.outputs(), 0.0f);
    model.layers_.push_back(std::move(layer));
  }
  return model;
}

std::vector<CheckpointLayer> Mlp::to_checkpoint() const {
  std::vector<CheckpointLayer> out;
  for (const auto& layer : layers_) {
    CheckpointLayer c;
    c.weights = layer.weight;
    if (layer.has_bias) c.bias = layer.bias;
    out.push_back(std::move(c));
  }
  return out;
}

void Mlp::set_arithmetic(const Arithmetic& arith) {
  if (arith.fmaq) arith.fmaq->validate();
  for (auto& layer : layers_) {
    layer.fmaq = arith.fmaq;
    layer.ste = arith.ste;
    layer.diff = arith.diff;
    layer.wa = arith.wa;
    layer.refresh_quantized_weight(nullptr);
  }
}

void Mlp::set_underflow(bool enabled) {
  for (auto& layer : layers_)
    if (layer.fmaq) layer.fmaq->underflow = enabled;
}

void Mlp::refresh_quantized_weights(std::mt19937_64* rng) {
  for (auto& layer : layers_) layer.refresh_quantized_weight(rng);
}

Matrix<float> Mlp::forward(const Matrix<float>& x, ForwardCache* cache) const {
  if (layers_.empty()) throw std::logic_error("forward on an empty model");
  if (x.cols() != input_size())
    throw ShapeError("model expects " + std::to_string(input_size()) + " features, got " +
                     std::to_string(x.cols()));
  if (cache) cache->layers.clear();
  Matrix<float> a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LbaLinear& layer = layers_[l];
    const bool last = l + 1 == layers_.size();
    Matrix<float> in = (layer.wa && !last)
                           ? quantize_tensor(a, *layer.wa, layer.wa->activation_round, nullptr)
                           : std::move(a);
    const Matrix<float>& w = layer.effective_weight();
    Matrix<double> y = layer.fmaq ? linear_forward(in, w, *layer.fmaq) : linear_forward_exact(in, w);
    Matrix<float> out(y.rows(), y.cols());
    if (layer.fmaq) {
      const Fmaq unit(*layer.fmaq);
      std::vector<double> bq(layer.outputs(), 0.0);
      if (layer.has_bias)
        for (std::size_t j = 0; j < bq.size(); ++j) bq[j] = unit.accumulator()(layer.bias[j]);
      for (std::size_t k = 0; k < y.rows(); ++k)
        for (std::size_t j = 0; j < y.cols(); ++j) {
          const double z = layer.has_bias ? unit.add(bq[j], y(k, j)) : y(k, j);
          out(k, j) = static_cast<float>(last ? z : std::max(z, 0.0));
        }
    } else {
      for (std::size_t k = 0; k < y.rows(); ++k)
        for (std::size_t j = 0; j < y.cols(); ++j) {
          const double z = y(k, j) + (layer.has_bias ? layer.bias[j] : 0.0);
          out(k, j) = static_cast<float>(last ? z : std::max(z, 0.0));
        }
    }
    if (cache) cache->layers.push_back({std::move(in), std::move(y), out});
    a = std::move(out);
  }
  return a;
}

std::vector<LayerGrad> Mlp::backward(const ForwardCache& cache,
                                     const Matrix<double>& grad_logits) const {
  if (cache.layers.size() != layers_.size())
    throw std::logic_error("forward cache does not match the model");
  std::vector<LayerGrad> grads(layers_.size());
  Matrix<double> g = grad_logits;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const LbaLinear& layer = layers_[l];
    const LayerCache& c = cache.layers[l];
    if (g.rows() != c.output.rows() || g.cols() != c.output.cols())
      throw ShapeError("upstream gradient shape does not match layer output");
    if (l + 1 < layers_.size())
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(c.output.data()[i] > 0.0f)) g.data()[i] = 0.0;

    // bias add z = Q_acc(y + Q_acc(b)) under the layer's estimator
    LayerGrad& out = grads[l];
    out.bias.assign(layer.outputs(), 0.0);
    Matrix<double> gy = g;
    if (layer.fmaq && layer.has_bias) {
      const Fmaq unit(*layer.fmaq);
      const double eps1 = layer.diff.resolved_eps1(*layer.fmaq);
      for (std::size_t k = 0; k < g.rows(); ++k)
        for (std::size_t j = 0; j < g.cols(); ++j) {
          const double bq = unit.accumulator()(layer.bias[j]);
          const double y = c.gemm_out(k, j);
          double db = 1.0, dy = 1.0;
          switch (layer.ste) {
            case SteKind::Identity:
              break;
            case SteKind::RecursiveOF:
              if (unit.overflows(bq, y)) db = dy = 0.0;
              break;
            case SteKind::ImmediateOF:
              if (unit.overflows(bq, y)) db = 0.0;
              break;
            case SteKind::ImmediateDIFF: {
              const double z = unit.add(bq, y);
              if (!(std::fabs(z - y) / (std::fabs(bq) + eps1) > layer.diff.eps2)) db = 0.0;
              break;
            }
          }
          out.bias[j] += g(k, j) * db;
          gy(k, j) = g(k, j) * dy;
        }
    } else if (layer.has_bias) {
      for (std::size_t k = 0; k < g.rows(); ++k)
        for (std::size_t j = 0; j < g.cols(); ++j) out.bias[j] += g(k, j);
    }

    const FmaqConfig* cfg = layer.fmaq ? &*layer.fmaq : nullptr;
    GemmGradients gg = linear_backward(c.input, layer.effective_weight(), gy, cfg, layer.ste, layer.diff, l > 0);
    out.weight = std::move(gg.grad_b);
    g = std::move(gg.grad_a);
  }
  return grads;
}

LossResult softmax_cross_entropy(const Matrix<float>& logits, std::span<const int> labels,
                                 bool with_grad) {
  if (logits.rows() != labels.size())
    throw ShapeError("logit rows and label count differ");
  LossResult r;
  const std::size_t n = logits.rows(), c = logits.cols();
  if (with_grad) r.grad = Matrix<double>(n, c);
  std::vector<double> p(c);
  for (std::size_t k = 0; k < n; ++k) {
    const auto row = logits.row(k);
    const auto y = static_cast<std::size_t>(labels[k]);
    if (y >= c) throw std::invalid_argument("label outside the logit range");
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += p[j] = std::exp(row[j] - peak);
    r.loss += std::log(total) - (row[y] - peak);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == y) ++r.correct;
    if (with_grad)
      for (std::size_t j = 0; j < c; ++j)
        r.grad(k, j) = (p[j] / total - (j == y ? 1.0 : 0.0)) / static_cast<double>(n);
  }
  r.loss /= static_cast<double>(n);
  return r;
}

Adam::Adam(const Mlp& model, AdamParams params) : params_(params) {
  for (const auto& layer : model.layers()) {
    weight_state_.push_back({std::vector<double>(layer.weight.size()), std::vector<double>(layer.weight.size())});
    bias_state_.push_back({std::vector<double>(layer.bias.size()), std::vector<double>(layer.bias.size())});
  }
}

namespace {

template <typename Param>
void adam_update(Param* values, const double* grads, std::size_t n, std::vector<double>& m,
                 std::vector<double>& v, const AdamParams& p, double lr, double c1, double c2) {
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grads[i] + p.weight_decay * values[i];
    m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g;
    v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g * g;
    const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + p.eps);
    values[i] = static_cast<Param>(values[i] - update);
  }
}

}  // namespace

void Adam::step(Mlp& model, const std::vector<LayerGrad>& grads, double lr) {
  auto& layers = model.layers();
  if (grads.size() != layers.size() || weight_state_.size() != layers.size())
    throw std::logic_error("optimizer state does not match the model");
  ++t_;
  const double c1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t_));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& layer = layers[l];
    adam_update(layer.weight.data(), grads[l].weight.data(), layer.weight.size(),
                weight_state_[l].m, weight_state_[l].v, params_, lr, c1, c2);
    if (layer.has_bias)
      adam_update(layer.bias.data(), grads[l].bias.data(), layer.bias.size(), bias_state_[l].m,
                  bias_state_[l].v, params_, lr, c1, c2);
  }
}

LrShape parse_lr_shape(const std::string& text) {
  if (text == "constant") return LrShape::Constant;
  if (text == "cosine") return LrShape::Cosine;
  if (text == "step") return LrShape::Step;
  throw std::invalid_argument("unknown learning-rate shape '" + text +
                              "' (expected constant, cosine or step)");
}

std::string to_string(LrShape shape) {
  switch (shape) {
    case LrShape::Constant: return "constant";
    case LrShape::Cosine: return "cosine";
    case LrShape::Step: return "step";
  }
  return "?";
}

double Stage::lr_at(int epoch_in_stage) const {
  switch (shape) {
    case LrShape::Constant:
      return lr;
    case LrShape::Step:
      return lr * std::pow(gamma, epoch_in_stage);
    case LrShape::Cosine: {
      const double t = epochs > 0 ? static_cast<double>(epoch_in_stage) / epochs : 0.0;
      return lr_end + (lr - lr_end) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
    }
  }
  return lr;
}

Evaluation evaluate(const Mlp& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw std::invalid_argument("cannot evaluate on an empty dataset");
  Evaluation ev;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    Matrix<float> xb(end - start, data.dimension());
    std::copy(data.features.row(start).begin(), data.features.row(start).begin() +
                  static_cast<std::ptrdiff_t>((end - start) * data.dimension()), xb.data());
    const auto logits = model.forward(xb);
    const auto r = softmax_cross_entropy(
        logits, std::span<const int>(data.labels).subspan(start, end - start), false);
    ev.loss += r.loss * static_cast<double>(end - start);
    correct += r.correct;
  }
  ev.loss /= static_cast<double>(data.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return ev;
}

std::vector<EpochMetrics> train(Mlp& model, const Dataset& train_set, const Dataset& eval_set,
                                const TrainSchedule& schedule, const TrainOptions& opts,
                                const EpochCallback& on_epoch) {
  if (schedule.stages.empty()) throw std::invalid_argument("training schedule has no stages");
  if (train_set.size() == 0) throw std::invalid_argument("training set is empty");
  if (opts.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (train_set.dimension() != model.input_size())
    throw ShapeError("model expects " + std::to_string(model.input_size()) +
                     " features, dataset has " + std::to_string(train_set.dimension()));

  auto shuffle_rng = substream(opts.seed, "shuffle");
  auto rounding_rng = substream(opts.seed, "stochastic-rounding");
  model.refresh_quantized_weights(&rounding_rng);
  Adam adam(model, opts.adam);
  const Dataset stuck_probe = train_set.head(opts.stuck_samples);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochMetrics> history;
  int epoch = 0;
  for (std::size_t s = 0; s < schedule.stages.size(); ++s) {
    const Stage& stage = schedule.stages[s];
    model.set_underflow(stage.underflow);
    for (int e = 0; e < stage.epochs; ++e) {
      const double lr = stage.lr_at(e);
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double loss_sum = 0.0;
      std::size_t correct = 0;
      for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
        const std::size_t end = std::min(order.size(), start + opts.batch_size);
        const Dataset batch = train_set.select({order.begin() + static_cast<std::ptrdiff_t>(start),
                                                order.begin() + static_cast<std::ptrdiff_t>(end)});
        ForwardCache cache;
        const auto logits = model.forward(batch.features, &cache);
        const auto r = softmax_cross_entropy(logits, batch.labels);
        if (!std::isfinite(r.loss))
          throw DivergenceError("loss became non-finite in epoch " + std::to_string(epoch + 1) +
                                " (stage '" + stage.name + "')");
        loss_sum += r.loss * static_cast<double>(end - start);
        correct += r.correct;
        adam.step(model, model.backward(cache, r.grad), lr);
        model.refresh_quantized_weights(&rounding_rng);
      }
      EpochMetrics m;
      m.epoch = ++epoch;
      m.stage = s;
      m.stage_name = stage.name;
      m.lr = lr;
      m.train_loss = loss_sum / static_cast<double>(order.size());
      m.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
      m.eval_acc = eval_set.size() > 0 ? evaluate(model, eval_set).accuracy : 0.0;
      m.stuck_rate = stuck_probe.size() > 0 ? stuck_underflow_rate(model, stuck_probe.features) : 0.0;
      history.push_back(m);
      if (on_epoch) on_epoch(m);
    }
  }
  return history;
}

double stuck_underflow_rate(const Mlp& model, const Matrix<float>& x,
                            const std::optional<FmaqConfig>& cfg_override) {
  ForwardCache cache;
  model.forward(x, &cache);
  std::uint64_t pairs = 0, stuck = 0;
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const LbaLinear& layer = model.layers()[l];
    const std::optional<FmaqConfig>& cfg = cfg_override ? cfg_override : layer.fmaq;
    if (!cfg) continue;
    const double uf = cfg->prod_fmt.underflow_threshold();
    const Matrix<float>& in = cache.layers[l].input;
    const Matrix<float>& w = layer.effective_weight();
    for (std::size_t k = 0; k < in.rows(); ++k)
      for (std::size_t i = 0; i < in.cols(); ++i) {
        const double a = in(k, i);
        if (a == 0.0) continue;
        pairs += w.rows();
        for (std::size_t j = 0; j < w.rows(); ++j)
          if (std::fabs(a * static_cast<double>(w(j, i))) < uf) ++stuck;
      }
  }
  return pairs == 0 ? 0.0 : static_cast<double>(stuck) / static_cast<double>(pairs);
}

double zeroshot_accuracy(const Mlp& model, const Dataset& data,
                         const std::optional<FmaqConfig>& cfg) {
  if (cfg) cfg->validate();
  Mlp swapped = model;
  for (auto& layer : swapped.layers()) layer.fmaq = cfg;
  return evaluate(swapped, data).accuracy;
}

std::vector<Matrix<double>> landscape_probe(const Mlp& model, const Dataset& sample,
                                            const LandscapeSpec& spec,
                                            const std::vector<LandscapeVariant>& variants) {
  if (!(spec.radius >= 0.0)) throw std::invalid_argument("landscape radius must be nonnegative");
  if (spec.radius > 0.0 && spec.resolution < 2)
    throw std::invalid_argument("landscape resolution must be at least 2");
  auto rng = substream(spec.seed, "landscape");
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto& layers = model.layers();
  std::vector<Matrix<double>> d1, d2;
  for (const auto& layer : layers) {
    for (auto* d : {&d1, &d2}) {
      Matrix<double> dir(layer.weight.rows(), layer.weight.cols());
      for (auto& v : dir.values()) v = normal(rng);
      if (spec.filter_normalize)
        for (std::size_t r = 0; r < dir.rows(); ++r) {
          double wn = 0.0, dn = 0.0;
          for (std::size_t c = 0; c < dir.cols(); ++c) {
            wn += static_cast<double>(layer.weight(r, c)) * layer.weight(r, c);
            dn += dir(r, c) * dir(r, c);
          }
          const double scale = dn > 0.0 ? std::sqrt(wn / dn) : 0.0;
          for (std::size_t c = 0; c < dir.cols(); ++c) dir(r, c) *= scale;
        }
      d->push_back(std::move(dir));
    }
  }

  // a zero radius probes the model itself
  const std::size_t n = spec.radius == 0.0 ? 1 : spec.resolution;
  std::vector<double> axis(n, 0.0);
  for (std::size_t i = 0; n > 1 && i < n; ++i)
    axis[i] = -spec.radius + 2.0 * spec.radius * static_cast<double>(i) / static_cast<double>(n - 1);

  std::vector<Matrix<double>> grids;
  for (const auto& variant : variants) {
    if (variant.fmaq) variant.fmaq->validate();
    Matrix<double> grid(n, n);
    Mlp probe = model;
    for (auto& layer : probe.layers()) layer.fmaq = variant.fmaq;
    for (std::size_t ia = 0; ia < n; ++ia)
      for (std::size_t ib = 0; ib < n; ++ib) {
        for (std::size_t l = 0; l < layers.size(); ++l) {
          auto& w = probe.layers()[l].weight;
          for (std::size_t i = 0; i < w.size(); ++i)
            w.data()[i] = static_cast<float>(layers[l].weight.data()[i] +
                                             axis[ia] * d1[l].data()[i] + axis[ib] * d2[l].data()[i]);
        }
        probe.refresh_quantized_weights(nullptr);
        grid(ia, ib) = evaluate(probe, sample).loss;
      }
    grids.push_back(std::move(grid));
  }
  return grids;
}

std::vector<LandscapeVariant> standard_landscape_variants(const FmaqConfig& cfg) {
  FmaqConfig no_uf = cfg;
  no_uf.underflow = false;
  FmaqConfig no_swamp = cfg;
  no_swamp.acc_extra_mantissa = 16;
  return {{"full", cfg}, {"no-underflow", no_uf}, {"no-swamping", no_swamp}};
}

}  // namespace lba
