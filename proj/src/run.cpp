#include "run.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "rng.hpp"

namespace lba {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_problems(const std::vector<std::string>& problems) {
  std::string msg = "invalid run configuration:";
  for (const auto& p : problems) msg += "\n  - " + p;
  return msg;
}

/// Collects problems instead of stopping at the first one.
class Checker {
 public:
  std::vector<std::string> problems;

  void fail(const std::string& where, const std::string& what) { problems.push_back(where + ": " + what); }

  void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) return;
    for (const auto& [key, value] : j.items()) {
      bool known = false;
      for (const char* a : allowed) known = known || key == a;
      if (!known) fail(where, "unknown key '" + key + "'");
    }
  }

  template <typename T>
  T get(const json& j, const char* key, const std::string& where, T fallback) {
    if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
    try {
      return j.at(key).get<T>();
    } catch (const json::exception&) {
      fail(where + "." + key, "wrong type (" + std::string(j.at(key).type_name()) + ")");
      return fallback;
    }
  }

  /// Runs f, turning any exception into a recorded problem.
  template <typename F>
  bool attempt(const std::string& where, F&& f) {
    try {
      f();
      return true;
    } catch (const FormatParseError& e) {
      fail(where, std::string(e.what()) + " (at position " + std::to_string(e.position()) + ")");
    } catch (const std::exception& e) {
      fail(where, e.what());
    }
    return false;
  }
};

std::string resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return p;
  const fs::path path(p);
  return path.is_absolute() ? path.lexically_normal().string() : (base / path).lexically_normal().string();
}

FloatFormat strict_float(const std::string& text) {
  const FormatSpec spec = parse_format(text);
  if (spec.kind != FormatSpec::Kind::Float)
    throw std::invalid_argument("'" + text + "' is a fixed-point format; a float format is required");
  if (spec.flex_bias)
    throw std::invalid_argument("'" + text + "': flex bias is only available for W/A quantization");
  return spec.float_format;
}

std::string float_to_string(const FloatFormat& f) {
  return "M" + std::to_string(f.mantissa_bits) + "E" + std::to_string(f.exponent_bits) + "b" +
         std::to_string(f.bias);
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

FmaqConfig parse_fmaq_json(const json& j) {
  if (j.is_string()) return FmaqConfig::uniform(strict_float(j.get<std::string>()));
  if (!j.is_object()) throw std::invalid_argument("FMAq config must be a format string or an object");
  Checker c;
  c.only_keys(j, "fmaq", {"label", "prod", "acc", "chunk", "underflow", "acc_extra_mantissa"});
  if (!c.problems.empty()) throw ConfigError(c.problems);
  if (!j.contains("prod")) throw std::invalid_argument("FMAq config needs a 'prod' format");
  const FloatFormat prod = strict_float(j.at("prod").get<std::string>());
  const int chunk = j.value("chunk", 16);
  FmaqConfig cfg;
  if (j.contains("acc") && !j.at("acc").is_null()) {
    cfg.prod_fmt = prod;
    cfg.acc_fmt = strict_float(j.at("acc").get<std::string>());
    cfg.chunk_size = chunk;
  } else {
    if (chunk <= 0 || (chunk & (chunk - 1)) != 0)
      throw std::invalid_argument("chunk size " + std::to_string(chunk) + " is not a power of two");
    cfg = FmaqConfig::with_bias_rule(prod, chunk);
  }
  cfg.underflow = j.value("underflow", true);
  cfg.acc_extra_mantissa = j.value("acc_extra_mantissa", 0);
  cfg.validate();
  return cfg;
}

json fmaq_to_json(const FmaqConfig& cfg) {
  return {{"prod", float_to_string(cfg.prod_fmt)},
          {"acc", float_to_string(cfg.acc_fmt)},
          {"chunk", cfg.chunk_size},
          {"underflow", cfg.underflow},
          {"acc_extra_mantissa", cfg.acc_extra_mantissa}};
}

std::vector<GateParams> default_gate_points() {
  GateParams fp32, m10e5, m7e4;
  m10e5.M = 10;
  m10e5.E = 5;
  m7e4.M = 7;
  m7e4.E = 4;
  return {fp32, m10e5, m7e4};
}

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  Checker c;
  RunConfig cfg;
  if (!j.is_object()) throw ConfigError({"config: top level must be a JSON object"});
  c.only_keys(j, "config", {"seed", "threads", "out", "model", "fmaq", "ste", "diff", "wa_quant",
                            "train", "schedule", "data", "zeroshot", "landscape", "gates"});

  cfg.seed = c.get<std::uint64_t>(j, "seed", "config", 1);
  cfg.threads = c.get<int>(j, "threads", "config", 1);
  if (cfg.threads < 1) c.fail("config.threads", "must be at least 1");
  cfg.out = c.get<std::string>(j, "out", "config", "out");

  // model
  if (j.contains("model")) {
    const json& m = j.at("model");
    c.only_keys(m, "model", {"widths", "activation", "checkpoint"});
    cfg.widths = c.get<std::vector<std::size_t>>(m, "widths", "model", cfg.widths);
    const auto act = c.get<std::string>(m, "activation", "model", "relu");
    if (act != "relu") c.fail("model.activation", "only 'relu' is supported, got '" + act + "'");
    cfg.init_checkpoint = resolve(base_dir, c.get<std::string>(m, "checkpoint", "model", ""));
  }
  if (cfg.widths.size() < 2) c.fail("model.widths", "needs at least an input and an output width");
  for (auto w : cfg.widths)
    if (w == 0) c.fail("model.widths", "widths must be positive");

  // arithmetic
  if (j.contains("fmaq") && !j.at("fmaq").is_null())
    c.attempt("fmaq", [&] { cfg.arithmetic.fmaq = parse_fmaq_json(j.at("fmaq")); });
  c.attempt("ste", [&] {
    cfg.arithmetic.ste = parse_ste_kind(c.get<std::string>(j, "ste", "config", "identity"));
  });
  if (j.contains("diff")) {
    const json& d = j.at("diff");
    c.only_keys(d, "diff", {"eps1", "eps2"});
    cfg.arithmetic.diff.eps1 = c.get<double>(d, "eps1", "diff", cfg.arithmetic.diff.eps1);
    cfg.arithmetic.diff.eps2 = c.get<double>(d, "eps2", "diff", cfg.arithmetic.diff.eps2);
    if (!(cfg.arithmetic.diff.eps2 >= 0.0)) c.fail("diff.eps2", "must be non-negative");
  }
  if (j.contains("wa_quant") && !j.at("wa_quant").is_null()) {
    const json& w = j.at("wa_quant");
    c.only_keys(w, "wa_quant", {"format", "weight_round", "activation_round"});
    WaQuant wa;
    c.attempt("wa_quant.format", [&] {
      const FormatSpec spec = parse_format(c.get<std::string>(w, "format", "wa_quant", "M4E3flex"));
      if (spec.kind != FormatSpec::Kind::Float)
        throw std::invalid_argument("W/A quantization needs a float format");
      wa.format = spec.float_format;
      wa.flex_bias = spec.flex_bias;
      wa.format.validate();
    });
    c.attempt("wa_quant.weight_round", [&] {
      wa.weight_round = parse_round_mode(c.get<std::string>(w, "weight_round", "wa_quant", "stochastic"));
    });
    c.attempt("wa_quant.activation_round", [&] {
      wa.activation_round =
          parse_round_mode(c.get<std::string>(w, "activation_round", "wa_quant", "nearest"));
      if (wa.activation_round == RoundMode::Stochastic)
        throw std::invalid_argument("activations are quantized deterministically (truncate or nearest)");
    });
    cfg.arithmetic.wa = wa;
  }

  // optimizer and batching
  if (j.contains("train")) {
    const json& t = j.at("train");
    c.only_keys(t, "train", {"batch_size", "beta1", "beta2", "eps", "weight_decay", "stuck_samples"});
    cfg.train.batch_size = c.get<std::size_t>(t, "batch_size", "train", cfg.train.batch_size);
    cfg.train.adam.beta1 = c.get<double>(t, "beta1", "train", cfg.train.adam.beta1);
    cfg.train.adam.beta2 = c.get<double>(t, "beta2", "train", cfg.train.adam.beta2);
    cfg.train.adam.eps = c.get<double>(t, "eps", "train", cfg.train.adam.eps);
    cfg.train.adam.weight_decay = c.get<double>(t, "weight_decay", "train", cfg.train.adam.weight_decay);
    cfg.train.stuck_samples = c.get<std::size_t>(t, "stuck_samples", "train", cfg.train.stuck_samples);
  }
  if (cfg.train.batch_size == 0) c.fail("train.batch_size", "must be positive");
  cfg.train.seed = cfg.seed;

  // schedule
  if (!j.contains("schedule") || !j.at("schedule").is_array() || j.at("schedule").empty()) {
    c.fail("schedule", "training schedule is empty (needs at least one stage)");
  } else {
    std::set<std::string> names;
    for (std::size_t i = 0; i < j.at("schedule").size(); ++i) {
      const json& s = j.at("schedule")[i];
      const std::string where = "schedule[" + std::to_string(i) + "]";
      c.only_keys(s, where, {"name", "epochs", "lr", "lr_end", "shape", "gamma", "underflow"});
      Stage st;
      st.name = c.get<std::string>(s, "name", where, "stage" + std::to_string(i + 1));
      st.epochs = c.get<int>(s, "epochs", where, st.epochs);
      st.lr = c.get<double>(s, "lr", where, st.lr);
      st.lr_end = c.get<double>(s, "lr_end", where, st.lr_end);
      st.gamma = c.get<double>(s, "gamma", where, st.gamma);
      st.underflow = c.get<bool>(s, "underflow", where, st.underflow);
      c.attempt(where + ".shape", [&] { st.shape = parse_lr_shape(c.get<std::string>(s, "shape", where, "constant")); });
      if (st.epochs < 0) c.fail(where + ".epochs", "must be non-negative");
      if (!(st.lr >= 0.0)) c.fail(where + ".lr", "must be non-negative");
      if (!(st.lr_end >= 0.0)) c.fail(where + ".lr_end", "must be non-negative");
      if (!(st.gamma > 0.0)) c.fail(where + ".gamma", "must be positive");
      if (!names.insert(st.name).second) c.fail(where + ".name", "duplicate stage name '" + st.name + "'");
      cfg.schedule.stages.push_back(st);
    }
  }

  // data
  if (!j.contains("data")) {
    c.fail("data", "missing dataset source");
  } else {
    const json& d = j.at("data");
    const auto kind = c.get<std::string>(d, "kind", "data", "");
    if (kind == "idx") {
      c.only_keys(d, "data", {"kind", "train_images", "train_labels", "eval_images", "eval_labels",
                              "train_limit", "eval_limit"});
      cfg.data.kind = DataSource::Kind::Idx;
      for (auto [key, field] : {std::pair{"train_images", &cfg.data.train_images},
                                {"train_labels", &cfg.data.train_labels},
                                {"eval_images", &cfg.data.eval_images},
                                {"eval_labels", &cfg.data.eval_labels}}) {
        *field = resolve(base_dir, c.get<std::string>(d, key, "data", ""));
        if (field->empty()) c.fail(std::string("data.") + key, "path is required");
        else if (!fs::exists(*field)) c.fail(std::string("data.") + key, "file '" + *field + "' does not exist");
      }
      cfg.data.train_limit = c.get<std::size_t>(d, "train_limit", "data", 0);
      cfg.data.eval_limit = c.get<std::size_t>(d, "eval_limit", "data", 0);
    } else if (kind == "synthetic") {
      c.only_keys(d, "data", {"kind", "type", "dimension", "classes", "samples", "eval_samples",
                              "seed", "spread", "margin"});
      cfg.data.kind = DataSource::Kind::Synthetic;
      auto& s = cfg.data.synthetic;
      const auto type = c.get<std::string>(d, "type", "data", "gaussian-blobs");
      if (type == "gaussian-blobs") s.kind = SyntheticSpec::Kind::GaussianBlobs;
      else if (type == "linearly-separable") s.kind = SyntheticSpec::Kind::LinearlySeparable;
      else c.fail("data.type", "expected gaussian-blobs or linearly-separable, got '" + type + "'");
      s.dimension = c.get<std::size_t>(d, "dimension", "data", s.dimension);
      s.classes = c.get<int>(d, "classes", "data", s.classes);
      s.samples = c.get<std::size_t>(d, "samples", "data", s.samples);
      s.seed = c.get<std::uint64_t>(d, "seed", "data", s.seed);
      s.spread = c.get<double>(d, "spread", "data", s.spread);
      s.margin = c.get<double>(d, "margin", "data", s.margin);
      cfg.data.eval_samples = c.get<std::size_t>(d, "eval_samples", "data", s.samples / 4);
      if (s.samples == 0 || s.dimension == 0) c.fail("data", "samples and dimension must be positive");
      if (s.classes < 2) c.fail("data.classes", "needs at least 2 classes");
    } else {
      c.fail("data.kind", "expected 'idx' or 'synthetic', got '" + kind + "'");
    }
  }
  if (cfg.data.kind == DataSource::Kind::Synthetic && cfg.widths.size() >= 2) {
    if (cfg.widths.front() != cfg.data.synthetic.dimension)
      c.fail("model.widths", "input width " + std::to_string(cfg.widths.front()) +
                                 " != synthetic dimension " + std::to_string(cfg.data.synthetic.dimension));
    if (cfg.widths.back() < static_cast<std::size_t>(std::max(cfg.data.synthetic.classes, 1)))
      c.fail("model.widths", "output width is smaller than the class count");
  }

  // zero-shot sweep
  if (j.contains("zeroshot")) {
    const json& z = j.at("zeroshot");
    if (!z.is_array()) {
      c.fail("zeroshot", "must be a list of formats or FMAq objects");
    } else {
      for (std::size_t i = 0; i < z.size(); ++i) {
        const std::string where = "zeroshot[" + std::to_string(i) + "]";
        c.attempt(where, [&] {
          ZeroshotPoint p;
          p.fmaq = parse_fmaq_json(z[i]);
          p.label = z[i].is_string() ? z[i].get<std::string>()
                                     : z[i].value("label", float_to_string(p.fmaq.prod_fmt) + "/" +
                                                               float_to_string(p.fmaq.acc_fmt));
          cfg.zeroshot.push_back(p);
        });
      }
    }
  }

  if (j.contains("landscape")) {
    const json& l = j.at("landscape");
    c.only_keys(l, "landscape", {"radius", "resolution", "seed", "filter_normalize", "samples"});
    auto& g = cfg.landscape;
    g.spec.radius = c.get<double>(l, "radius", "landscape", g.spec.radius);
    g.spec.resolution = c.get<std::size_t>(l, "resolution", "landscape", g.spec.resolution);
    g.spec.seed = c.get<std::uint64_t>(l, "seed", "landscape", cfg.seed);
    g.spec.filter_normalize = c.get<bool>(l, "filter_normalize", "landscape", g.spec.filter_normalize);
    g.samples = c.get<std::size_t>(l, "samples", "landscape", g.samples);
    if (!(g.spec.radius >= 0.0)) c.fail("landscape.radius", "must be nonnegative");
    if (g.spec.radius > 0.0 && g.spec.resolution < 2)
      c.fail("landscape.resolution", "needs at least 2 points per axis");
    if (g.samples == 0) c.fail("landscape.samples", "must be positive");
  } else {
    cfg.landscape.spec.seed = cfg.seed;
  }

  if (j.contains("gates")) {
    const json& g = j.at("gates");
    if (!g.is_array() || g.empty()) {
      c.fail("gates", "must be a non-empty list of design points");
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::string where = "gates[" + std::to_string(i) + "]";
        c.only_keys(g[i], where, {"m", "e", "M", "E", "costs"});
        GateParams p;
        p.m = c.get<int>(g[i], "m", where, p.m);
        p.e = c.get<int>(g[i], "e", where, p.e);
        p.M = c.get<int>(g[i], "M", where, p.M);
        p.E = c.get<int>(g[i], "E", where, p.E);
        if (g[i].contains("costs")) {
          const json& k = g[i].at("costs");
          c.only_keys(k, where + ".costs", {"and2", "or2", "mux2", "half_adder", "full_adder"});
          p.costs.and2 = c.get<double>(k, "and2", where, p.costs.and2);
          p.costs.or2 = c.get<double>(k, "or2", where, p.costs.or2);
          p.costs.mux2 = c.get<double>(k, "mux2", where, p.costs.mux2);
          p.costs.half_adder = c.get<double>(k, "half_adder", where, p.costs.half_adder);
          p.costs.full_adder = c.get<double>(k, "full_adder", where, p.costs.full_adder);
        }
        if (p.m < 1 || p.e < 1 || p.M < 1 || p.E < 1) c.fail(where, "m, e, M, E must be >= 1");
        cfg.gates.push_back(p);
      }
    }
  } else {
    cfg.gates = default_gate_points();
  }

  if (!c.problems.empty()) throw ConfigError(c.problems);
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError({"config: cannot open '" + path.string() + "'"});
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError({"config: '" + path.string() + "' is not valid JSON (" + e.what() + ")"});
  }
  return parse_run_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

json to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  j["out"] = cfg.out;
  j["model"] = {{"widths", cfg.widths}, {"activation", "relu"}};
  if (!cfg.init_checkpoint.empty()) j["model"]["checkpoint"] = cfg.init_checkpoint;
  j["fmaq"] = cfg.arithmetic.fmaq ? fmaq_to_json(*cfg.arithmetic.fmaq) : json(nullptr);
  j["ste"] = std::string(to_string(cfg.arithmetic.ste));
  j["diff"] = {{"eps1", std::isnan(cfg.arithmetic.diff.eps1) ? json(nullptr) : json(cfg.arithmetic.diff.eps1)},
               {"eps2", cfg.arithmetic.diff.eps2}};
  if (cfg.arithmetic.wa) {
    const WaQuant& wa = *cfg.arithmetic.wa;
    FormatSpec spec;
    spec.float_format = wa.format;
    spec.flex_bias = wa.flex_bias;
    j["wa_quant"] = {{"format", spec.to_string()},
                     {"weight_round", std::string(to_string(wa.weight_round))},
                     {"activation_round", std::string(to_string(wa.activation_round))}};
  } else {
    j["wa_quant"] = nullptr;
  }
  const auto& adam = cfg.train.adam;
  j["train"] = {{"batch_size", cfg.train.batch_size}, {"beta1", adam.beta1}, {"beta2", adam.beta2},
                {"eps", adam.eps}, {"weight_decay", adam.weight_decay},
                {"stuck_samples", cfg.train.stuck_samples}};
  j["schedule"] = json::array();
  for (const auto& s : cfg.schedule.stages)
    j["schedule"].push_back({{"name", s.name}, {"epochs", s.epochs}, {"lr", s.lr}, {"lr_end", s.lr_end},
                             {"shape", to_string(s.shape)}, {"gamma", s.gamma}, {"underflow", s.underflow}});
  if (cfg.data.kind == DataSource::Kind::Idx) {
    j["data"] = {{"kind", "idx"}, {"train_images", cfg.data.train_images},
                 {"train_labels", cfg.data.train_labels}, {"eval_images", cfg.data.eval_images},
                 {"eval_labels", cfg.data.eval_labels}, {"train_limit", cfg.data.train_limit},
                 {"eval_limit", cfg.data.eval_limit}};
  } else {
    const auto& s = cfg.data.synthetic;
    j["data"] = {{"kind", "synthetic"},
                 {"type", s.kind == SyntheticSpec::Kind::GaussianBlobs ? "gaussian-blobs" : "linearly-separable"},
                 {"dimension", s.dimension}, {"classes", s.classes}, {"samples", s.samples},
                 {"eval_samples", cfg.data.eval_samples}, {"seed", s.seed}, {"spread", s.spread},
                 {"margin", s.margin}};
  }
  j["zeroshot"] = json::array();
  for (const auto& p : cfg.zeroshot) {
    json z = fmaq_to_json(p.fmaq);
    z["label"] = p.label;
    j["zeroshot"].push_back(z);
  }
  const auto& l = cfg.landscape;
  j["landscape"] = {{"radius", l.spec.radius}, {"resolution", l.spec.resolution}, {"seed", l.spec.seed},
                    {"filter_normalize", l.spec.filter_normalize}, {"samples", l.samples}};
  j["gates"] = json::array();
  for (const auto& g : cfg.gates)
    j["gates"].push_back({{"m", g.m}, {"e", g.e}, {"M", g.M}, {"E", g.E},
                          {"costs", {{"and2", g.costs.and2}, {"or2", g.costs.or2}, {"mux2", g.costs.mux2},
                                     {"half_adder", g.costs.half_adder}, {"full_adder", g.costs.full_adder}}}});
  return j;
}

LoadedData load_data(const DataSource& src) {
  LoadedData d;
  if (src.kind == DataSource::Kind::Idx) {
    d.train = load_idx(src.train_images, src.train_labels);
    d.eval = load_idx(src.eval_images, src.eval_labels);
    if (src.train_limit > 0) d.train = d.train.head(src.train_limit);
    if (src.eval_limit > 0) d.eval = d.eval.head(src.eval_limit);
    d.eval.num_classes = d.train.num_classes = std::max(d.train.num_classes, d.eval.num_classes);
  } else {
    SyntheticSpec spec = src.synthetic;
    spec.samples += src.eval_samples;
    const Dataset all = generate(spec);
    std::vector<std::size_t> train_idx(src.synthetic.samples), eval_idx(src.eval_samples);
    for (std::size_t i = 0; i < train_idx.size(); ++i) train_idx[i] = i;
    for (std::size_t i = 0; i < eval_idx.size(); ++i) eval_idx[i] = train_idx.size() + i;
    d.train = all.select(train_idx);
    d.eval = all.select(eval_idx);
  }
  d.train.validate();
  d.eval.validate();
  return d;
}

Mlp build_model(const RunConfig& cfg) {
  Mlp model;
  if (cfg.init_checkpoint.empty()) {
    model = Mlp::create(cfg.widths, cfg.seed);
  } else {
    model = Mlp::from_checkpoint(load_checkpoint(cfg.init_checkpoint));
    std::vector<std::size_t> widths{model.input_size()};
    for (const auto& layer : model.layers()) widths.push_back(layer.outputs());
    if (widths != cfg.widths)
      throw ShapeError("checkpoint '" + cfg.init_checkpoint + "' does not match model.widths");
  }
  model.set_arithmetic(cfg.arithmetic);
  return model;
}

void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& history) {
  os << "epoch,stage,lr,train_loss,train_acc,eval_acc,stuck_rate\n";
  for (const auto& m : history)
    os << m.epoch << ',' << m.stage_name << ',' << num(m.lr) << ',' << num(m.train_loss) << ','
       << num(m.train_acc) << ',' << num(m.eval_acc) << ',' << num(m.stuck_rate) << '\n';
}

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  return os;
}

}  // namespace

TrainOutcome run_train(const RunConfig& cfg, const EpochCallback& on_epoch) {
  const LoadedData data = load_data(cfg.data);
  if (data.train.dimension() != cfg.widths.front())
    throw ShapeError("dataset has " + std::to_string(data.train.dimension()) +
                     " features but model.widths starts with " + std::to_string(cfg.widths.front()));
  Mlp model = build_model(cfg);
  const fs::path out(cfg.out);
  fs::create_directories(out);

  TrainOutcome r;
  model.set_underflow(cfg.schedule.stages.front().underflow);
  r.initial = evaluate(model, data.eval);

  auto metrics = open_out(out / "metrics.csv");
  metrics << "epoch,stage,lr,train_loss,train_acc,eval_acc,stuck_rate\n";
  metrics.flush();
  r.history = train(model, data.train, data.eval, cfg.schedule, cfg.train, [&](const EpochMetrics& m) {
    std::ostringstream row;
    write_metrics_csv(row, {m});
    const std::string text = row.str();
    metrics << text.substr(text.find('\n') + 1);
    metrics.flush();
    if (on_epoch) on_epoch(m);
  });
  r.final_eval = evaluate(model, data.eval);
  r.final_stuck_rate = stuck_underflow_rate(model, data.train.head(cfg.train.stuck_samples).features);
  save_checkpoint((out / "checkpoint.lba").string(), model.to_checkpoint());

  json stages = json::array();
  for (std::size_t s = 0; s < cfg.schedule.stages.size(); ++s) {
    json entry = {{"name", cfg.schedule.stages[s].name}, {"epochs", cfg.schedule.stages[s].epochs}};
    for (const auto& m : r.history)
      if (m.stage == s) {
        entry["final_train_acc"] = m.train_acc;
        entry["final_eval_acc"] = m.eval_acc;
        entry["final_stuck_rate"] = m.stuck_rate;
      }
    stages.push_back(entry);
  }
  r.summary = {{"initial_eval_acc", r.initial.accuracy},
               {"initial_eval_loss", r.initial.loss},
               {"final_eval_acc", r.final_eval.accuracy},
               {"final_eval_loss", r.final_eval.loss},
               {"final_stuck_rate", r.final_stuck_rate},
               {"epochs", r.history.size()},
               {"stages", stages},
               {"config", to_json(cfg)}};
  open_out(out / "summary.json") << r.summary.dump(2) << '\n';
  return r;
}

void write_zeroshot_csv(std::ostream& os, const std::vector<ZeroshotRow>& rows) {
  os << "label,prod,acc,chunk,underflow,accuracy\n";
  for (const auto& r : rows) {
    os << r.label << ',';
    if (r.fmaq)
      os << float_to_string(r.fmaq->prod_fmt) << ',' << float_to_string(r.fmaq->acc_fmt) << ','
         << r.fmaq->chunk_size << ',' << (r.fmaq->underflow ? 1 : 0);
    else
      os << "exact,exact,,";
    os << ',' << num(r.accuracy) << '\n';
  }
}

std::vector<ZeroshotRow> run_zeroshot(const RunConfig& cfg, const Mlp& model, const Dataset& data) {
  std::vector<ZeroshotRow> rows;
  rows.push_back({"baseline", std::nullopt, zeroshot_accuracy(model, data, std::nullopt)});
  for (const auto& p : cfg.zeroshot) rows.push_back({p.label, p.fmaq, zeroshot_accuracy(model, data, p.fmaq)});
  const fs::path out(cfg.out);
  fs::create_directories(out);
  auto os = open_out(out / "zeroshot.csv");
  write_zeroshot_csv(os, rows);
  return rows;
}

std::vector<Matrix<double>> run_landscape(const RunConfig& cfg, const Mlp& model, const Dataset& sample) {
  if (!cfg.arithmetic.fmaq) throw std::invalid_argument("landscape probing needs an 'fmaq' config");
  const auto variants = standard_landscape_variants(*cfg.arithmetic.fmaq);
  const auto grids = landscape_probe(model, sample, cfg.landscape.spec, variants);
  const fs::path out(cfg.out);
  fs::create_directories(out);
  const double r = cfg.landscape.spec.radius;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const std::size_t n = grids[v].rows();
    auto coord = [&](std::size_t i) { return n > 1 ? -r + 2.0 * r * i / (n - 1) : 0.0; };
    auto os = open_out(out / ("landscape_" + variants[v].name + ".csv"));
    os << "alpha,beta,loss\n";
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        os << num(coord(a)) << ',' << num(coord(b)) << ',' << num(grids[v](a, b)) << '\n';
  }
  return grids;
}

json summarize_run_dir(const fs::path& dir) {
  std::ifstream is(dir / "metrics.csv");
  if (!is) throw std::runtime_error("no metrics.csv in '" + dir.string() + "'");
  std::string line;
  std::getline(is, line);
  json stages = json::array();
  json last;
  std::size_t epochs = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw std::runtime_error("malformed metrics row: " + line);
    ++epochs;
    json row = {{"stage", f[1]}, {"last_epoch", std::stoi(f[0])}, {"train_loss", std::stod(f[3])},
                {"train_acc", std::stod(f[4])}, {"eval_acc", std::stod(f[5])},
                {"stuck_rate", std::stod(f[6])}};
    if (!stages.empty() && stages.back()["stage"] == f[1]) stages.back() = row;
    else stages.push_back(row);
    last = row;
  }
  return {{"run", dir.string()}, {"epochs", epochs}, {"stages", stages}, {"final", last}};
}

}  // namespace lba
