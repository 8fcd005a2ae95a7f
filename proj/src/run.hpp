#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "data.hpp"
#include "gates.hpp"
#include "nn.hpp"

namespace lba {

/// Every problem found while validating a run configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct DataSource {
  enum class Kind { Idx, Synthetic };
  Kind kind = Kind::Synthetic;
  std::string train_images, train_labels, eval_images, eval_labels;
  std::size_t train_limit = 0;  // 0: all
  std::size_t eval_limit = 0;
  SyntheticSpec synthetic{};
  std::size_t eval_samples = 0;  // synthetic: extra samples generated for evaluation
};

struct ZeroshotPoint {
  std::string label;
  FmaqConfig fmaq;
};

struct LandscapeGrid {
  LandscapeSpec spec{};
  std::size_t samples = 256;
};

/// Complete, serializable description of a run. Paths are absolute after
/// parsing (resolved against the config file's directory).
struct RunConfig {
  std::vector<std::size_t> widths{784, 256, 256, 256, 10};
  std::string init_checkpoint;  // empty: random init
  Arithmetic arithmetic{};
  TrainSchedule schedule{};
  TrainOptions train{};
  DataSource data{};
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out = "out";
  std::vector<ZeroshotPoint> zeroshot;
  LandscapeGrid landscape{};
  std::vector<GateParams> gates;
};

/// Validates everything before any compute; throws ConfigError listing
/// every problem.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

/// FmaqConfig from {"prod": "M7E4b12", "acc": "M7E4b10", "chunk": 16, ...};
/// a missing "acc" applies the bias rule to "prod".
FmaqConfig parse_fmaq_json(const nlohmann::json& j);
nlohmann::json fmaq_to_json(const FmaqConfig& cfg);

struct LoadedData {
  Dataset train;
  Dataset eval;
};
LoadedData load_data(const DataSource& src);

Mlp build_model(const RunConfig& cfg);

struct TrainOutcome {
  std::vector<EpochMetrics> history;
  Evaluation initial;
  Evaluation final_eval;
  double final_stuck_rate = 0.0;
  nlohmann::json summary;
};

/// Trains per the config and writes metrics.csv, checkpoint.lba and
/// summary.json into cfg.out.
TrainOutcome run_train(const RunConfig& cfg, const EpochCallback& on_epoch = {});
void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& history);

struct ZeroshotRow {
  std::string label;
  std::optional<FmaqConfig> fmaq;
  double accuracy = 0.0;
};

/// Baseline row first, then one row per sweep point. Writes zeroshot.csv.
std::vector<ZeroshotRow> run_zeroshot(const RunConfig& cfg, const Mlp& model, const Dataset& data);
void write_zeroshot_csv(std::ostream& os, const std::vector<ZeroshotRow>& rows);

/// Writes landscape_<variant>.csv per variant (columns alpha,beta,loss).
std::vector<Matrix<double>> run_landscape(const RunConfig& cfg, const Mlp& model, const Dataset& sample);

/// Reads metrics.csv in a run directory and condenses it per stage.
nlohmann::json summarize_run_dir(const std::filesystem::path& dir);

std::vector<GateParams> default_gate_points();

}  // namespace lba
