#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kt/eval.hpp"
#include "kt/features.hpp"
#include "kt/model.hpp"
#include "kt/optim.hpp"

namespace kt {

struct TrainConfig {
  int max_epochs = 100;
  int patience = 5;  // epochs without a validation-AUC improvement
  real lr = static_cast<real>(1e-3);
  real weight_decay = static_cast<real>(1e-5);
  real clip_norm = static_cast<real>(5.0);
  std::size_t batch_size = 64;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<real> beta_sweep = {static_cast<real>(0.01),
                                  static_cast<real>(0.05),
                                  static_cast<real>(0.1),
                                  static_cast<real>(0.2),
                                  static_cast<real>(0.5)};

  void validate() const;
  std::string to_json_text() const;
  static TrainConfig from_json_text(const std::string& text);
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;  // mean per valid step
  std::optional<double> val_auc;
  double val_acc = 0;
  double seconds = 0;
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  std::optional<double> best_val_auc;
  std::string checkpoint_path;  // empty when no run_dir was given
  EvalReport test_report;
  std::string epochs_json_lines() const;
};

// Trains in place, early-stopping on validation AUC and restoring the best
// parameters before returning. When run_dir is non-empty, writes
// best.ckpt.json there and one JSON line per epoch to epochs.jsonl.
// On NaN loss, saves/keeps the best checkpoint and throws DivergenceError.
RunRecord train(Model& model, const DatasetSplit& split,
                const TrainConfig& cfg, std::uint64_t seed,
                const std::string& run_dir = "");

// ---- experiment drivers -----------------------------------------------------

struct MatrixRow {
  Variant variant;
  std::vector<double> test_aucs;  // one per seed
  double mean_auc = 0;
  double std_auc = 0;
};

// Trains every (variant, seed) pair on the split and reports per-variant
// mean +/- std of pooled test AUC. Writes results.csv and runs.jsonl under
// out_dir when non-empty.
std::vector<MatrixRow> run_matrix(const DatasetSplit& split,
                                  const ModelConfig& base_config,
                                  const TrainConfig& cfg,
                                  const std::vector<Variant>& variants,
                                  const std::string& out_dir = "");

struct SweepPoint {
  real beta = 0;
  std::vector<double> test_aucs;
  double mean_auc = 0;
};

// Full-variant training across the beta list. Writes beta_curve.csv under
// out_dir when non-empty.
std::vector<SweepPoint> beta_sweep(const DatasetSplit& split,
                                   const ModelConfig& base_config,
                                   const TrainConfig& cfg,
                                   const std::string& out_dir = "");

}  // namespace kt
