#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kt/features.hpp"
#include "kt/model.hpp"

namespace kt {

// Rank-based (Mann-Whitney) AUC with midrank tie handling. Returns nullopt
// when only one class is present.
std::optional<double> auc(const std::vector<double>& scores,
                          const std::vector<int>& labels);

// Fraction of correct thresholded predictions; a score exactly at the
// threshold predicts 1. Throws DataError on empty input.
double accuracy(const std::vector<double>& scores,
                const std::vector<int>& labels, double threshold = 0.5);

// ---- pooled predictions ---------------------------------------------------

struct Predictions {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<int> source_len;  // pre-windowing student length per prediction
};

Predictions collect_predictions(Model& model,
                                const std::vector<AugmentedSequence>& seqs,
                                std::size_t batch_size = 64);

// ---- length buckets ---------------------------------------------------------

struct LengthBucket {
  int lo = 0;
  int hi = 0;  // exclusive; hi < 0 means unbounded
  std::size_t count = 0;
  std::optional<double> auc_value;
  std::string label() const;
};

// Buckets [0,b0), [b0,b1), ..., [b_last, inf) over source-sequence length.
std::vector<LengthBucket> length_bucket_auc(
    const Predictions& preds, const std::vector<int>& boundaries = {50, 100,
                                                                    200});

// ---- model accounting ---------------------------------------------------------

struct ParamCount {
  std::size_t exercise_embedding = 0;
  std::size_t answer_embedding = 0;
  std::size_t session_embedding = 0;   // E_S rows x d, when present
  std::size_t positional_embedding = 0;
  std::size_t time_channel = 0;
  std::size_t attention = 0;
  std::size_t ffn = 0;
  std::size_t layernorm = 0;
  std::size_t prediction_head = 0;
  std::size_t forgetting = 0;  // 0 for a global beta, heads when multi-rate
  std::size_t total = 0;
};

// Closed-form accounting from the config alone.
ParamCount count_params(const ModelConfig& cfg);
// Ground truth by summing live tensors; tests pin the two together.
std::size_t actual_param_count(Model& model);

// ---- flops -----------------------------------------------------------------

struct FlopsEstimate {
  double projections = 0;
  double attention = 0;
  double ffn = 0;
  double bias_adds = 0;  // injection overhead: additive mask per head/layer
  double prediction_head = 0;
  double total = 0;
  double bias_share() const { return total > 0 ? bias_adds / total : 0; }
};

FlopsEstimate flops_estimate(const ModelConfig& cfg, std::size_t seq_len,
                             std::size_t batch = 1);

// ---- latency ----------------------------------------------------------------

struct LatencyStats {
  double mean_ms = 0;
  double p50_ms = 0;
  double p95_ms = 0;
  int reps = 0;
};

// Wall-clock forward-only timing with masks pre-built outside the loop.
LatencyStats latency_bench(Model& model, const Batch& batch, int reps,
                           int warmup = 2);

// ---- evaluation report ---------------------------------------------------------

struct EvalReport {
  std::optional<double> auc_value;
  double acc = 0;
  std::size_t n_predictions = 0;
  std::vector<LengthBucket> buckets;
  std::string to_json_text() const;
};

EvalReport evaluate(Model& model, const std::vector<AugmentedSequence>& seqs,
                    std::size_t batch_size = 64);

// ---- attention export -----------------------------------------------------------

// Runs the model on one sequence and writes, under out_dir:
//   attention_l<layer>_h<head>.csv   (layer,head,query,key,weight)
//   session_boundaries.csv           (position,session,step,new_session)
//   time_lags.csv                    (query,key,lag_minutes,lag_normalized)
void export_attention(Model& model, const AugmentedSequence& seq,
                      const std::string& out_dir);

// Mean attention mass that queries at or after `gap_pos` put on keys strictly
// before it, averaged over layers, heads, and valid queries.
double pre_gap_attention_mass(const AttnCapture& capture,
                              std::size_t valid_len, std::size_t gap_pos);

}  // namespace kt
