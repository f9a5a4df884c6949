#include "kt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "kt/eval.hpp"

namespace kt {

using nlohmann::json;

void SynthConfig::validate() const {
  if (n_students <= 0 || n_skills <= 0) {
    throw ConfigError("synth: students and skills must be positive");
  }
  if (decay < 0) throw ConfigError("synth: decay must be >= 0");
  if (guess < 0 || slip < 0 || guess + slip >= 1) {
    throw ConfigError("synth: need guess, slip >= 0 and guess + slip < 1");
  }
  if (warmup_depth < 0 || warmup_depth > 1) {
    throw ConfigError("synth: warmup depth must be in [0,1]");
  }
  if (inter_gap_lo <= intra_gap_hi) {
    throw ConfigError("synth: inter-session gaps must exceed intra-session");
  }
  if (peak <= mastery_cap) {
    throw ConfigError("synth: peak must exceed the base-mastery cap");
  }
  if (working_set_carryover < 0 || working_set_carryover > 1) {
    throw ConfigError("synth: working-set carryover must be in [0,1]");
  }
}

std::string SynthConfig::to_json_text() const {
  json j;
  j["n_students"] = n_students;
  j["n_skills"] = n_skills;
  j["mastery_init_lo"] = mastery_init_lo;
  j["mastery_init_hi"] = mastery_init_hi;
  j["mastery_gain"] = mastery_gain;
  j["mastery_cap"] = mastery_cap;
  j["ability_spread"] = ability_spread;
  j["easiness_spread"] = easiness_spread;
  j["peak"] = peak;
  j["decay"] = decay;
  j["working_set_carryover"] = working_set_carryover;
  j["warmup_len"] = warmup_len;
  j["warmup_depth"] = warmup_depth;
  j["session_form_spread"] = session_form_spread;
  j["sessions_lo"] = sessions_lo;
  j["sessions_hi"] = sessions_hi;
  j["session_len_lo"] = session_len_lo;
  j["session_len_hi"] = session_len_hi;
  j["intra_gap_lo"] = intra_gap_lo;
  j["intra_gap_hi"] = intra_gap_hi;
  j["inter_gap_lo"] = inter_gap_lo;
  j["inter_gap_hi"] = inter_gap_hi;
  j["skills_per_session"] = skills_per_session;
  j["guess"] = guess;
  j["slip"] = slip;
  j["seed"] = seed;
  return j.dump(2);
}

SynthConfig SynthConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  SynthConfig c;
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j[key].get<std::decay_t<decltype(out)>>();
  };
  get("n_students", c.n_students);
  get("n_skills", c.n_skills);
  get("mastery_init_lo", c.mastery_init_lo);
  get("mastery_init_hi", c.mastery_init_hi);
  get("mastery_gain", c.mastery_gain);
  get("mastery_cap", c.mastery_cap);
  get("ability_spread", c.ability_spread);
  get("easiness_spread", c.easiness_spread);
  get("peak", c.peak);
  get("decay", c.decay);
  get("working_set_carryover", c.working_set_carryover);
  get("warmup_len", c.warmup_len);
  get("warmup_depth", c.warmup_depth);
  get("session_form_spread", c.session_form_spread);
  get("sessions_lo", c.sessions_lo);
  get("sessions_hi", c.sessions_hi);
  get("session_len_lo", c.session_len_lo);
  get("session_len_hi", c.session_len_hi);
  get("intra_gap_lo", c.intra_gap_lo);
  get("intra_gap_hi", c.intra_gap_hi);
  get("inter_gap_lo", c.inter_gap_lo);
  get("inter_gap_hi", c.inter_gap_hi);
  get("skills_per_session", c.skills_per_session);
  get("guess", c.guess);
  get("slip", c.slip);
  get("seed", c.seed);
  return c;
}

SynthConfig SynthConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("synth config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

double retention(double dt_minutes, double decay) {
  return std::pow(dt_minutes + 1.0, -decay);
}

double warmup_multiplier(int step_in_session, int warmup_len, double depth) {
  if (warmup_len <= 0 || step_in_session >= warmup_len) return 1.0;
  const double frac =
      static_cast<double>(warmup_len - step_in_session) / warmup_len;
  return 1.0 - depth * frac;
}

SynthDataset generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthDataset data;
  data.log.vocab.push_back("<pad>");
  for (int k = 0; k < cfg.n_skills; ++k) {
    data.log.vocab.push_back("skill_" + std::to_string(k));
  }

  Rng rng(cfg.seed);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  // Skill easiness offsets are population-level and drawn once.
  std::vector<double> easiness(cfg.n_skills);
  for (auto& e : easiness)
    e = uniform_in(rng, -cfg.easiness_spread, cfg.easiness_spread);

  for (int si = 0; si < cfg.n_students; ++si) {
    StudentSeq seq;
    seq.student_id = "stu_" + std::to_string(si);
    std::vector<double> probs;

    const double ability =
        uniform_in(rng, -cfg.ability_spread, cfg.ability_spread);
    std::vector<double> base(cfg.n_skills);
    for (int k = 0; k < cfg.n_skills; ++k) {
      base[k] = std::clamp(
          uniform_in(rng, cfg.mastery_init_lo, cfg.mastery_init_hi) + ability +
              easiness[k],
          0.05, cfg.mastery_cap);
    }
    std::vector<double> last_practice(cfg.n_skills, -1.0);

    const int n_sessions = uniform_int_in(rng, cfg.sessions_lo, cfg.sessions_hi);
    double now = uniform_in(rng, 0.0, 600.0);
    std::vector<int> working_set;
    for (int sess = 0; sess < n_sessions; ++sess) {
      if (sess > 0) {
        // log-uniform: gap size stays informative across its whole range
        const double lg = uniform_in(rng, std::log(cfg.inter_gap_lo),
                                     std::log(cfg.inter_gap_hi));
        now += std::exp(lg);
      }
      const double form = 1.0 + uniform_in(rng, -cfg.session_form_spread,
                                           cfg.session_form_spread);

      // Working set: part carried over from the previous sitting, the rest
      // fresh, so cross-session re-practice of a skill is routine.
      const int ws = std::min(cfg.skills_per_session, cfg.n_skills);
      std::vector<int> next_set;
      shuffle_vec(working_set, rng);
      const int keep = std::min<int>(
          static_cast<int>(working_set.size()),
          static_cast<int>(std::floor(ws * cfg.working_set_carryover)));
      for (int i = 0; i < keep; ++i) next_set.push_back(working_set[i]);
      std::vector<int> pool(cfg.n_skills);
      for (int k = 0; k < cfg.n_skills; ++k) pool[k] = k;
      shuffle_vec(pool, rng);
      for (int k : pool) {
        if (static_cast<int>(next_set.size()) >= ws) break;
        bool dup = false;
        for (int have : next_set) dup = dup || have == k;
        if (!dup) next_set.push_back(k);
      }
      working_set = next_set;

      const int len = uniform_int_in(rng, cfg.session_len_lo, cfg.session_len_hi);
      for (int step = 0; step < len; ++step) {
        if (step > 0) now += uniform_in(rng, cfg.intra_gap_lo, cfg.intra_gap_hi);
        const int skill =
            working_set[uniform_int_in(rng, 0, static_cast<int>(working_set.size()) - 1)];

        // Success spikes to `peak` right after practice and decays back
        // toward the base level with real elapsed time.
        double core = base[skill];
        if (last_practice[skill] >= 0) {
          const double ret = retention(now - last_practice[skill], cfg.decay);
          core = base[skill] + (cfg.peak - base[skill]) * ret;
        }
        const double warm =
            warmup_multiplier(step, cfg.warmup_len, cfg.warmup_depth);
        const double p =
            std::clamp(core * warm * form, cfg.guess, 1.0 - cfg.slip);
        const int response = uniform01(rng) < p ? 1 : 0;

        seq.exercise.push_back(skill + 1);  // vocab is 1-based
        seq.response.push_back(response);
        seq.ts.push_back(now);
        seq.time_spent.push_back(nan);
        seq.skill_null.push_back(0);
        probs.push_back(p);

        last_practice[skill] = now;
        if (response == 1) {
          base[skill] =
              std::min(base[skill] + cfg.mastery_gain, cfg.mastery_cap);
        }
      }
    }
    data.log.students.push_back(std::move(seq));
    data.true_prob.push_back(std::move(probs));
    data.log.parse_report.total_rows += data.true_prob.back().size();
    data.log.parse_report.parsed_rows += data.true_prob.back().size();
  }
  return data;
}

std::optional<double> oracle_auc(const SynthDataset& data) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t s = 0; s < data.log.students.size(); ++s) {
    const auto& seq = data.log.students[s];
    for (std::size_t t = 0; t < seq.size(); ++t) {
      scores.push_back(data.true_prob[s][t]);
      labels.push_back(seq.response[t]);
    }
  }
  return auc(scores, labels);
}

void write_synth_csv(const SynthDataset& data, const std::string& log_path,
                     const std::string& probs_path) {
  std::ofstream out(log_path);
  if (!out) throw DataError("write_synth_csv: cannot write " + log_path);
  out << "student_id,exercise_id,skill_id,correct,timestamp\n";
  out.precision(17);
  for (const auto& s : data.log.students) {
    for (std::size_t t = 0; t < s.size(); ++t) {
      const std::string& tok = data.log.vocab[s.exercise[t]];
      out << s.student_id << "," << tok << "," << tok << "," << s.response[t]
          << "," << s.ts[t] << "\n";
    }
  }

  std::ofstream probs(probs_path);
  if (!probs) throw DataError("write_synth_csv: cannot write " + probs_path);
  probs << "student_id,step,true_prob\n";
  probs.precision(17);
  for (std::size_t si = 0; si < data.log.students.size(); ++si) {
    for (std::size_t t = 0; t < data.true_prob[si].size(); ++t) {
      probs << data.log.students[si].student_id << "," << t << ","
            << data.true_prob[si][t] << "\n";
    }
  }
}

}  // namespace kt
