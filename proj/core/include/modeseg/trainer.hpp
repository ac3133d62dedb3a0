#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modeseg/datapipe.hpp"
#include "modeseg/models.hpp"
#include "modeseg/objectives.hpp"
#include "modeseg/optim.hpp"

namespace modeseg {

struct TrainConfig {
  std::size_t batch_size = 32;
  int max_epochs = 60;
  int patience = 5;
  bool restore_best = true;
  std::uint64_t seed = 0;
  double min_delta = 1e-6;  // an epoch improves when val loss drops by at least this much
  double threshold = 0.5;   // probability cut for validation metrics

  void validate() const;
};

/// Patience rule on a monitored loss. `update` returns true when training
/// should stop after the epoch just reported.
class EarlyStopping {
 public:
  EarlyStopping(int patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  bool update(double loss);
  bool improved() const noexcept { return improved_; }
  int best_epoch() const noexcept { return best_epoch_; }
  double best_loss() const noexcept { return best_; }
  int epoch() const noexcept { return epoch_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  int epoch_ = 0;
  int wait_ = 0;
  bool improved_ = false;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  MetricReport val_metrics;
  double seconds = 0.0;
  double cumulative_seconds = 0.0;
};

struct RunRecord {
  std::string model;  // display name, e.g. "U-NetMN"
  std::vector<EpochRecord> epochs;
  int stopped_epoch = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  double total_seconds = 0.0;
  bool early_stopped = false;
  bool diverged = false;
  std::string error;
  std::uint64_t best_fingerprint = 0;   // weights at best_epoch
  std::uint64_t final_fingerprint = 0;  // weights the model holds after train()

  bool ok() const noexcept { return !diverged && error.empty(); }
};

/// Stacks tiles into [B, 1, T, T] image and mask tensors.
std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<Tile>& tiles,
                                                   std::span<const std::size_t> indices);

struct EvalResult {
  double loss = 0.0;  // tile-weighted mean of per-batch losses
  ConfusionMatrix confusion;
  MetricReport metrics;
};

/// Inference-mode pass over `tiles`.
EvalResult evaluate(Model<float>& model, const std::vector<Tile>& tiles, const LossConfig& loss,
                    std::size_t batch_size = 32, double threshold = 0.5);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Seeded mini-batch training with early stopping on validation loss.
/// Seconds are CPU time of the calling thread spent in the epoch loop
/// (training plus validation). A non-finite loss stops training and marks
/// the record diverged; epochs completed so far are kept.
RunRecord train(Model<float>& model, const std::vector<Tile>& train_tiles,
                const std::vector<Tile>& val_tiles, const TrainConfig& tcfg,
                const OptimizerConfig& ocfg, const LossConfig& lcfg,
                const EpochCallback& on_epoch = {});

struct GridConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double dropout = 0.0;
  LossKind loss = LossKind::dice;

  std::string label() const;
  friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

struct Grid {
  std::vector<OptimizerKind> optimizers{OptimizerKind::adam, OptimizerKind::sgd};
  std::vector<double> learning_rates{1e-4, 1e-3, 1e-2};
  std::vector<double> dropouts{0.0, 0.1, 0.2, 0.3, 0.5};
  std::vector<LossKind> losses{LossKind::dice, LossKind::focal, LossKind::combined};

  /// Cartesian product in nested order optimizer, learning rate, dropout, loss.
  std::vector<GridConfig> enumerate() const;
};

struct GridEntry {
  std::size_t index = 0;  // position in the enumeration
  GridConfig config;
  MetricReport val_metrics;
  RunRecord record;
  bool ok = false;
  std::string error;
};

struct GridResult {
  std::vector<GridEntry> entries;  // enumeration order
  std::size_t selected = 0;
  bool any_ok = false;

  const GridEntry& best() const { return entries.at(selected); }
};

/// Argmax of validation Dsc over successful entries; ties go to the lower
/// learning rate, then the earlier enumeration index.
std::size_t select_best(const std::vector<GridEntry>& entries);

/// Trains one model per configuration on `train_tiles` and scores it on
/// `val_tiles`. Runs are independent and may use `workers` threads; a
/// failed run is recorded and the search continues.
GridResult grid_search(const ModelSpec& base, const std::vector<GridConfig>& configs,
                       const std::vector<Tile>& train_tiles, const std::vector<Tile>& val_tiles,
                       const TrainConfig& tcfg, const OptimizerConfig& base_opt,
                       const LossConfig& base_loss, std::uint64_t model_seed,
                       unsigned workers = 1);

struct FoldResult {
  int zone = 0;  // held-out zone, 1..4
  std::size_t train_count = 0, val_count = 0, test_count = 0;
  StandardizationStats standardization;
  RunRecord record;
  MetricReport test_metrics;
  bool ok = false;
  std::string error;
};

struct CvResult {
  std::string model;
  std::array<FoldResult, 4> folds;
};

/// Four-fold zone cross-validation on raw (unstandardized) tiles. Each fold
/// standardizes with its training zones, holds out `val_fraction` of those
/// tiles for early stopping, trains and reports the six metrics on the test
/// zone. A failing fold is recorded and the remaining folds still run.
CvResult cross_validate(const ModelSpec& spec, const std::vector<Tile>& raw_tiles,
                        const TrainConfig& tcfg, const OptimizerConfig& ocfg,
                        const LossConfig& lcfg, std::uint64_t model_seed, unsigned workers = 1,
                        double val_fraction = 0.1);

struct SpeedupRow {
  std::string model;
  int epochs = 0;
  double seconds = 0.0;
  double speedup = 1.0;  // baseline seconds / this row's seconds
};

/// Baseline row (speed-up 1) followed by the mode-normalized row.
std::vector<SpeedupRow> speedup_report(const RunRecord& baseline, const RunRecord& normalized);

// Artifact writers.
void write_record_jsonl(const RunRecord& record, const std::filesystem::path& path);
std::string record_jsonl(const RunRecord& record);
void write_loss_curves_csv(const std::vector<RunRecord>& records, const std::filesystem::path& path);
void write_grid_results_csv(const GridResult& result, const std::string& model,
                            const std::filesystem::path& path);
/// Table layout: one row per (model, metric), columns zone1..zone4.
void write_cv_results_csv(const std::vector<CvResult>& results, const std::filesystem::path& path);
void write_speedup_csv(const std::vector<SpeedupRow>& rows, const std::filesystem::path& path);
void write_metrics_csv(const MetricReport& metrics, const std::filesystem::path& path);

/// Calls `job(i)` for every i < count on up to `workers` threads and rethrows
/// the first exception once all threads have joined.
void run_parallel(std::size_t count, unsigned workers, const std::function<void(std::size_t)>& job);

}  // namespace modeseg
