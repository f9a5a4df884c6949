#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kt/common.hpp"

namespace kt {

// ---- raw log -------------------------------------------------------------

struct StudentSeq {
  std::string student_id;
  std::vector<int> exercise;        // vocabulary ids, 1-based (0 = padding)
  std::vector<int> response;        // 0/1
  std::vector<double> ts;           // minutes since epoch
  std::vector<double> time_spent;   // seconds; NaN when the column is absent
  std::vector<uint8_t> skill_null;  // 1 when the skill field was missing

  std::size_t size() const { return exercise.size(); }
};

struct ParseReport {
  std::size_t total_rows = 0;
  std::size_t parsed_rows = 0;
  std::size_t bad_rows = 0;
};

struct InteractionLog {
  std::vector<StudentSeq> students;   // first-seen file order
  std::vector<std::string> vocab;     // id -> token; vocab[0] = "<pad>"
  ParseReport parse_report;

  std::size_t total_interactions() const;
  std::size_t vocab_size() const { return vocab.empty() ? 0 : vocab.size() - 1; }
};

// Column mapping for delimited text logs. Columns are referenced by header
// name, or by 0-based index written as a number when has_header is false.
struct LogSchema {
  char delimiter = ',';
  bool has_header = true;
  std::string student_col = "student_id";
  std::string exercise_col = "exercise_id";
  std::string skill_col = "skill_id";    // empty: no skill field
  std::string correct_col = "correct";
  std::string timestamp_col = "timestamp";
  std::string time_spent_col;            // optional, seconds
  std::string timestamp_unit = "minutes";  // minutes|seconds|milliseconds|hours
  bool exercise_from_skill = false;        // feed the skill column as e_t

  static LogSchema from_json_file(const std::string& path);
  static LogSchema from_json_text(const std::string& text);
  std::string to_json_text() const;
};

// Reads and sorts per-student interactions, building the exercise vocabulary
// in first-seen order. Unparseable rows are counted and skipped; more than 1%
// bad rows is a hard DataError.
InteractionLog parse_log(const std::string& path, const LogSchema& schema);

// ---- cleaning ------------------------------------------------------------

struct CleanConfig {
  bool drop_null_skill = true;
  // Per-step elapsed time above this is treated as an outlier and the step
  // is dropped — but only when the gap is within one session; a gap larger
  // than session_gap_minutes is a session boundary, not time spent on a step.
  double max_step_seconds = 9999.0;
  double session_gap_minutes = 600.0;
  // Applies when the log carries an explicit time-spent column.
  double max_time_spent_seconds = 9999.0;
};

struct CleanReport {
  std::size_t input = 0;
  std::size_t dropped_null_skill = 0;
  std::size_t dropped_elapsed = 0;
  std::size_t dropped_time_spent = 0;
  std::size_t kept = 0;
  std::string summary() const;
};

InteractionLog clean(const InteractionLog& log, const CleanConfig& cfg,
                     CleanReport* report = nullptr);

// ---- derived features ------------------------------------------------------

// Session ids (1-based) and within-session steps (0-based) from timestamps.
// A gap strictly greater than gap_minutes opens a new session; the first
// interaction always opens session 1. Throws DataError on decreasing input.
void derive_sessions(const std::vector<double>& ts, double gap_minutes,
                     std::vector<int>& session_out, std::vector<int>& step_out);

// Lower-triangular elapsed-time matrix with the per-sequence normalizer
// Δt_max = max(span, 1).
struct LagMatrix {
  std::size_t len = 0;
  std::vector<double> dt;  // dt[t*len + j] = ts[t] - ts[j] for j <= t, else 0
  double dt_max = 1.0;

  double norm(std::size_t t, std::size_t j) const {
    return dt[t * len + j] / dt_max;
  }
};
LagMatrix time_lag_matrix(const std::vector<double>& ts);

struct AugmentedSequence {
  std::string student_id;
  std::vector<int> exercise;
  std::vector<int> response;
  std::vector<double> ts;
  std::vector<int> session;  // s_t, 1-based, non-decreasing
  std::vector<int> step;     // tau_t, 0-based within session
  int source_len = 0;        // student's post-clean total, for length buckets

  std::size_t size() const { return exercise.size(); }
};

// One full-history sequence per student with s/tau attached.
std::vector<AugmentedSequence> derive_features(const InteractionLog& log,
                                               double gap_minutes);

// Consecutive non-overlapping windows of at most l_max steps. Session ids,
// steps, and timestamps are carried through unchanged; windows shorter than
// min_len are dropped.
std::vector<AugmentedSequence> window(const AugmentedSequence& seq,
                                      std::size_t l_max,
                                      std::size_t min_len = 3);

// ---- chronological split ---------------------------------------------------

struct SplitManifest {
  struct Row {
    std::string student_id;
    int n_sessions = 0;
    int train_sessions = 0;
    int val_sessions = 0;
    int test_sessions = 0;
  };
  std::vector<Row> rows;
};

struct DatasetSplit {
  std::vector<AugmentedSequence> train;
  std::vector<AugmentedSequence> val;
  std::vector<AugmentedSequence> test;
  SplitManifest manifest;
};

// Per student: first ceil(0.6 n) sessions to train, next ceil(0.2 n) to
// validation, remainder to test. Students with fewer than 3 sessions go
// entirely to train. Each segment is windowed to l_max afterwards.
DatasetSplit split_by_sessions(const std::vector<AugmentedSequence>& students,
                               std::size_t l_max);

// ---- batching ---------------------------------------------------------------

struct Batch {
  std::size_t b = 0;  // sequences
  std::size_t l = 0;  // padded length
  std::vector<int> exercise;     // b*l, 0 where padded
  std::vector<int> prev_answer;  // b*l: 0/1, 2 = <START> at position 0
  std::vector<real> target;      // b*l
  std::vector<int> session;      // b*l, 0 where padded
  std::vector<int> step;         // b*l
  std::vector<double> ts;        // b*l, padded tail repeats the last value
  std::vector<real> valid;       // b*l, 1 on real steps
  std::vector<int> source_len;   // b

  std::size_t idx(std::size_t s, std::size_t t) const { return s * l + t; }
};

Batch make_batch(const std::vector<const AugmentedSequence*>& seqs);

// ---- dataset statistics ------------------------------------------------------

struct DatasetStats {
  std::size_t students = 0;
  std::size_t questions = 0;
  std::size_t interactions = 0;
  double avg_sessions = 0;
  double avg_interactions_per_session = 0;
  std::string summary() const;
};

DatasetStats dataset_stats(const std::vector<AugmentedSequence>& students,
                           std::size_t vocab_size);

// ---- shard io ----------------------------------------------------------------

// JSON-lines, one AugmentedSequence per line with a split tag.
void write_shards(const DatasetSplit& split, const std::string& dir);
DatasetSplit read_shards(const std::string& dir);

}  // namespace kt
