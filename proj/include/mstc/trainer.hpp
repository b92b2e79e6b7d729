#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mstc/data.hpp"
#include "mstc/metrics.hpp"
#include "mstc/model.hpp"

namespace mstc {

// --- optimizer ------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  AdamConfig hp;
  std::uint64_t t = 0;
  std::vector<Tensor> m, v;  // aligned with the parameter list

  /// Zeroed moments shaped like `params`.
  static OptimState fresh(std::span<Parameter<float>* const> params, const AdamConfig& hp);
};

/// One bias-corrected Adam update from the gradients stored in `params`.
/// A non-finite gradient throws NumericError naming the step, the parameter
/// and its gradient norm; nothing is modified in that case.
void adam_step(std::span<Parameter<float>* const> params, OptimState& state);

// --- training -------------------------------------------------------------

struct TrainPlan {
  std::uint64_t iterations = 15000;
  std::size_t batch_size = 100;
  /// Unset selects 1e-4, or 3e-4 for multi-task models.
  std::optional<double> lr;
  std::uint64_t eval_every = 500;
  std::uint64_t seed = 1;
  bool instance_weighting = true;
  bool regularization = true;
  double threshold = 0.5;

  double effective_lr(const ModelConfig& config) const;
  void validate() const;
};

nlohmann::json train_plan_to_json(const TrainPlan& plan);
/// Rejects unknown keys; absent keys keep their defaults.
TrainPlan train_plan_from_json(const nlohmann::json& j);

struct LogEntry {
  std::uint64_t step = 0;
  double wall_ms = 0.0;
  double loss = 0.0;  // data term + penalty on the batch at this step
  std::optional<double> val_ba;
};

/// {"step":..,"wall_ms":..,"loss":..,"val_ba":..} on one line.
std::string log_line(const LogEntry& e);

struct TrainHooks {
  /// Receives each log entry as it is produced.
  std::function<void(const LogEntry&)> on_log;
  /// Sees the dataset rows of every optimizer step, before the update.
  std::function<void(std::uint64_t step, std::span<const std::size_t> rows)> on_batch;
  /// When set, a checkpoint is written every `checkpoint_every` steps and at
  /// the end. A diverging run leaves the last one in place.
  std::optional<std::filesystem::path> checkpoint_dir;
  std::uint64_t checkpoint_every = 0;
};

struct TrainResult {
  std::vector<LogEntry> log;
  std::uint64_t final_step = 0;
};

/// Runs optimizer steps state.t .. plan.iterations-1 on `train_rows`. The
/// batch of global step s and its dropout stream depend only on (seed, s),
/// so a run resumed from a checkpoint follows the uninterrupted trajectory.
/// Log entries are written at every step divisible by eval_every, including
/// step 0 and the final step, and report the loss of that step's batch at
/// the parameters reached so far.
TrainResult train(Model<float>& model, OptimState& state, const Dataset& data,
                  std::span<const std::size_t> train_rows, std::span<const std::size_t> val_rows,
                  const TrainPlan& plan, const TrainHooks& hooks = {});

/// Throws FormatError when the dataset cannot feed the configured model.
void check_compatible(const ModelConfig& config, const Dataset& data);

/// Infer-mode probabilities [rows x C]. A multi-task model averages the heads
/// in `subset` (empty: all configured modalities).
Tensor predict(Model<float>& model, const Dataset& data, std::span<const std::size_t> rows,
               std::span<const Modality> subset = {}, std::size_t batch_size = 100);

FoldReport evaluate(const Tensor& probabilities, const LabelMatrix& labels, double threshold = 0.5);

void save_training_checkpoint(const Model<float>& model, const OptimState& state,
                              std::uint64_t seed, const std::filesystem::path& dir);

struct TrainingCheckpoint {
  Model<float> model;
  OptimState state;
  std::uint64_t seed = 0;
};

/// Restores the model and the Adam moments; `hp` supplies the hyperparameters.
TrainingCheckpoint load_training_checkpoint(const std::filesystem::path& dir, const AdamConfig& hp);

// --- cross-validation -----------------------------------------------------

struct CvOptions {
  std::size_t k = 5;
  /// Train on the nested 80% of the training users and log validation BA on
  /// the remaining 20%; otherwise train on all training users.
  bool nested_validation = false;
  std::function<void(std::size_t fold, const LogEntry&)> on_log;
};

struct LeakageAudit {
  std::size_t folds = 0;
  std::size_t batches = 0;
  std::size_t rows = 0;
  std::size_t violations = 0;
};

/// Throws std::logic_error if any of `rows` belongs to a user in `test_users`.
void audit_rows(const Dataset& data, std::span<const std::size_t> rows,
                const std::set<std::string>& test_users);

struct CvResult {
  FoldPlan plan;
  std::vector<FoldReport> folds;
  Summary summary;
  LeakageAudit audit;
};

/// Per fold: fresh model, weights from that fold's training users, train,
/// evaluate on the test users. Every training batch is audited for leakage.
CvResult run_cv(const Dataset& data, const ModelConfig& config, const TrainPlan& plan,
                const CvOptions& options = {});

// --- ablation -------------------------------------------------------------

/// Each axis left empty keeps the base value.
struct AblationGrid {
  std::vector<Fusion> fusions;
  std::vector<ConvKind> conv_kinds;
  std::vector<std::vector<Modality>> modality_sets;
  std::vector<bool> weighting;
  std::vector<bool> regularization;
};

AblationGrid ablation_grid_from_json(const nlohmann::json& j);

struct GridCell {
  std::string descriptor;
  ModelConfig model;
  TrainPlan plan;
  /// Set when the combination is not a valid model; such cells are not run.
  std::optional<std::string> invalid;
};

std::vector<GridCell> expand_grid(const AblationGrid& grid, const ModelConfig& base_model,
                                  const TrainPlan& base_plan);

struct AblationRow {
  GridCell cell;
  std::optional<CvResult> result;
};

/// One run_cv per valid cell with the same seeds everywhere.
std::vector<AblationRow> run_ablation(const Dataset& data, const AblationGrid& grid,
                                      const ModelConfig& base_model, const TrainPlan& base_plan,
                                      const CvOptions& options = {},
                                      const std::function<void(const AblationRow&)>& on_row = {});

/// Tab-separated: cell, ba, ba_sd, sens, sens_sd, spec, spec_sd, excluded.
void write_ablation_table(std::ostream& os, const std::vector<AblationRow>& rows);

}  // namespace mstc
