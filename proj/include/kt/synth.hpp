#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kt/features.hpp"

namespace kt {

// Synthetic student population with known generative dynamics. Success on a
// skill spikes right after practice and decays back toward a slowly growing
// base level along a power law of real elapsed time:
//   p = clamp(form * warmup * (base + (peak - base) * (dt+1)^(-decay)))
// with dt in minutes since that skill's last practice (first attempts sit at
// the base). Session schedules keep intra-session gaps far below the
// 10-hour session rule and draw inter-session gaps log-uniformly above it,
// so real gap durations carry label information that session indices alone
// do not.
struct SynthConfig {
  int n_students = 500;
  int n_skills = 50;

  double mastery_init_lo = 0.30;  // base success level before practice
  double mastery_init_hi = 0.55;
  double mastery_gain = 0.04;     // base increment per correct answer
  double mastery_cap = 0.75;
  double peak = 0.96;             // success right after practicing the skill
  double ability_spread = 0.15;   // per-student offset, uniform +/- spread
  double easiness_spread = 0.15;  // per-skill offset, uniform +/- spread

  // power-law exponent of the post-practice decay
  double decay = 0.3;

  int warmup_len = 4;         // affected steps at each session start
  double warmup_depth = 0.35; // multiplier at tau=0 is 1 - depth

  // Per-(student, session) performance multiplier drawn uniformly from
  // [1-spread, 1+spread]: a student's current sitting runs hot or cold, so
  // recent outcomes carry information that stale ones do not.
  double session_form_spread = 0.22;

  int sessions_lo = 6;
  int sessions_hi = 10;
  int session_len_lo = 15;
  int session_len_hi = 25;
  double intra_gap_lo = 1.0;     // minutes
  double intra_gap_hi = 4.0;
  double inter_gap_lo = 720.0;   // strictly above the 600-minute session gap
  double inter_gap_hi = 8640.0;  // up to six days, log-uniform
  int skills_per_session = 6;    // working set drawn per session
  // fraction of the working set carried over from the previous session, so
  // cross-session re-practice (where gap durations matter) is common
  double working_set_carryover = 0.5;

  double guess = 0.08;  // success probability floor
  double slip = 0.04;   // ceiling is 1 - slip

  std::uint64_t seed = 1;

  void validate() const;
  std::string to_json_text() const;
  static SynthConfig from_json_text(const std::string& text);
  static SynthConfig from_json_file(const std::string& path);
};

struct SynthDataset {
  InteractionLog log;
  // Hidden per-step success probabilities, aligned with log.students.
  std::vector<std::vector<double>> true_prob;
};

double retention(double dt_minutes, double decay);
double warmup_multiplier(int step_in_session, int warmup_len, double depth);

SynthDataset generate(const SynthConfig& cfg);

// AUC of the hidden probabilities against the realized responses — the
// ceiling no model trained on the realized data can beat beyond noise.
std::optional<double> oracle_auc(const SynthDataset& data);

// CSV in the exact shape parse_log consumes, plus a sidecar with the hidden
// probabilities.
void write_synth_csv(const SynthDataset& data, const std::string& log_path,
                     const std::string& probs_path);

}  // namespace kt
