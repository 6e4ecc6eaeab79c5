#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lap/network.hpp"
#include "lap/ot.hpp"
#include "lap/trainer.hpp"

namespace lap::exp {

enum class ExperimentKind { circles_table, mnist_table, correlation, oracle_check };

std::string_view to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(std::string_view name);

/// One of the small-circles settings: network too small, too large, badly
/// initialized, or trained on a tiny set.
struct CirclesScenario {
  std::string name;
  std::size_t points = 1000;
  std::size_t blocks = 9;
  InitScheme init{};
  double fixed_lambda = 0.04;
};

/// one_block, hundred_blocks, big_init, fifty_points.
const std::vector<CirclesScenario>& circles_scenarios();
const CirclesScenario& circles_scenario(std::string_view name);

enum class Metric { final_accuracy, best_accuracy };

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::circles_table;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path output;  // empty: nothing written
  std::size_t jobs = 1;
  bool save_checkpoints = false;

  Architecture architecture{};  // base; blocks/batch_norm/kind are set per cell
  InitScheme init{};            // MNIST table; circles scenarios and the correlation grid set their own
  std::vector<Regime> regimes{Regime::vanilla, Regime::fixed_lambda, Regime::lap};
  TrainConfig train{};          // regime and seed are set per cell
  LapConfig lap{};
  std::optional<double> fixed_lambda;  // overrides the scenario's value
  Metric metric = Metric::final_accuracy;
  std::size_t bound_batch = 256;

  struct Circles {
    double noise = 0.08;
    double ratio = 0.5;
    std::vector<std::string> scenarios{"one_block", "hundred_blocks", "big_init", "fifty_points"};
    std::vector<bool> batch_norm{false, true};
  } circles;

  struct Mnist {
    std::optional<std::filesystem::path> data_dir;  // falls back to $LAP_DATA_DIR
    std::vector<std::size_t> sizes{100, 200, 300, 400, 500};
    std::size_t eval_subset = 1000;  // 0: full test set
    std::uint64_t eval_seed = 0;
    bool stratified = true;
  } mnist;

  struct Correlation {
    std::vector<double> gains{0.01, 0.1, 0.5, 1.0, 2.0, 5.0};
    std::vector<InitKind> inits{InitKind::orthogonal, InitKind::normal};
    std::size_t train_size = 1000;
  } correlation;

  struct OracleCheck {
    std::vector<std::filesystem::path> checkpoints;
    std::filesystem::path dataset;
  } oracle;
};

/// Defaults for each experiment kind: circles use lambda0 0.1, tau 0.1,
/// s 5, constant lr; MNIST uses lambda0 5, tau 1, s 5, 30 epochs and
/// best-epoch accuracy.
ExperimentConfig default_config(ExperimentKind kind);

/// Reads a JSON config; keys that are absent keep `default_config(kind)`.
/// "seeds" is either a list or {"count": n, "start": s}.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every field that affects results, as compact JSON with sorted keys. The
/// output path and job count are left out.
std::string canonical_json(const ExperimentConfig& cfg);
/// FNV-1a 64 of canonical_json, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for n = 1
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n = 0;
};

/// mean +- 1.96 sd / sqrt(n). Throws on empty input.
Summary summarize(const std::vector<double>& values);

struct CellResult {
  std::string id;
  std::string group;  // row key of the result table
  Regime regime = Regime::vanilla;
  std::size_t train_size = 0;
  std::uint64_t seed = 0;
  double gain = 0.0;
  InitKind init = InitKind::orthogonal;

  double metric = NAN;
  double final_accuracy = NAN;
  double best_accuracy = NAN;
  double final_test_cost = NAN;
  double final_train_loss = NAN;
  double final_lambda = NAN;
  std::size_t lambda_updates = 0;
  bool lambda_nondecreasing = true;
  std::optional<ot::BoundReport> bound;
  std::string error;  // non-empty when the cell failed

  bool ok() const noexcept { return error.empty(); }
};

struct ResultRow {
  std::string config_id;
  Regime regime = Regime::vanilla;
  std::size_t train_size = 0;
  Summary summary;
  std::size_t failed = 0;
};

struct ResultTable {
  std::vector<ResultRow> rows;

  const ResultRow* find(std::string_view config_id, Regime regime) const;
  /// config_id,regime,train_size,mean,ci_low,ci_high,n_seeds,failed
  void write_csv(std::ostream& out) const;
};

struct SuiteResult {
  ResultTable table;
  std::vector<CellResult> cells;
};

struct LinearFit {
  double slope = NAN;
  double intercept = NAN;
  std::size_t n = 0;
};

struct CorrelationStats {
  double r = NAN;
  bool defined = false;  // false when either variable has zero variance
  std::size_t n = 0;
};

CorrelationStats pearson(const std::vector<double>& x, const std::vector<double>& y);
/// Least-squares y = slope * x + intercept.
LinearFit least_squares(const std::vector<double>& x, const std::vector<double>& y);

struct CorrelationResult {
  std::vector<CellResult> cells;
  CorrelationStats overall;  // test transport cost vs test accuracy over ok cells
  std::vector<std::pair<InitKind, LinearFit>> fits;
};

using Logger = std::function<void(const std::string&)>;

SuiteResult run_circles_suite(const ExperimentConfig& cfg, const Logger& log = {});
SuiteResult run_mnist_table(const ExperimentConfig& cfg, const Logger& log = {});
CorrelationResult run_correlation(const ExperimentConfig& cfg, const Logger& log = {});

struct OracleCheckEntry {
  std::filesystem::path checkpoint;
  ot::BoundReport report;
};
std::vector<OracleCheckEntry> run_oracle_check(const ExperimentConfig& cfg);

/// First `rows` samples used for a bound check of a checkpoint: a circles CSV
/// file, or a directory holding the MNIST IDX files (test split).
Tensor load_check_batch(const std::filesystem::path& dataset, std::size_t rows);

/// "# " lines: tool version, config hash, seeds, canonical config.
void write_provenance(std::ostream& out, const ExperimentConfig& cfg);

/// Runs whatever `cfg.kind` names and writes its files under cfg.output.
void run_experiment(const ExperimentConfig& cfg, const Logger& log = {});

/// Runs `count` independent tasks on `jobs` threads. Task i writes only to
/// slot i of whatever it fills, so the outcome does not depend on timing.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& task);

}  // namespace lap::exp
