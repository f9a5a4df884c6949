#include "kt/features.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace kt {

using nlohmann::json;

std::size_t InteractionLog::total_interactions() const {
  std::size_t n = 0;
  for (const auto& s : students) n += s.size();
  return n;
}

// ---- schema ----------------------------------------------------------------

LogSchema LogSchema::from_json_text(const std::string& text) {
  json j = json::parse(text);
  LogSchema s;
  if (j.contains("delimiter")) {
    const std::string d = j["delimiter"].get<std::string>();
    if (d.size() != 1) throw ConfigError("schema: delimiter must be 1 char");
    s.delimiter = d[0];
  }
  if (j.contains("has_header")) s.has_header = j["has_header"].get<bool>();
  auto get = [&](const char* key, std::string& out) {
    if (j.contains(key)) out = j[key].get<std::string>();
  };
  get("student_col", s.student_col);
  get("exercise_col", s.exercise_col);
  get("skill_col", s.skill_col);
  get("correct_col", s.correct_col);
  get("timestamp_col", s.timestamp_col);
  get("time_spent_col", s.time_spent_col);
  get("timestamp_unit", s.timestamp_unit);
  if (j.contains("exercise_from_skill"))
    s.exercise_from_skill = j["exercise_from_skill"].get<bool>();
  return s;
}

LogSchema LogSchema::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("schema: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string LogSchema::to_json_text() const {
  json j;
  j["delimiter"] = std::string(1, delimiter);
  j["has_header"] = has_header;
  j["student_col"] = student_col;
  j["exercise_col"] = exercise_col;
  j["skill_col"] = skill_col;
  j["correct_col"] = correct_col;
  j["timestamp_col"] = timestamp_col;
  j["time_spent_col"] = time_spent_col;
  j["timestamp_unit"] = timestamp_unit;
  j["exercise_from_skill"] = exercise_from_skill;
  return j.dump(2);
}

// ---- parse -------------------------------------------------------------------

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

bool is_null_token(const std::string& s) {
  if (s.empty()) return true;
  static const char* nulls[] = {"null", "NULL", "Null", "NA", "na",
                                "nan",  "NaN",  "none", "None"};
  for (const char* n : nulls)
    if (s == n) return true;
  return false;
}

double timestamp_to_minutes(double v, const std::string& unit) {
  if (unit == "minutes") return v;
  if (unit == "seconds") return v / 60.0;
  if (unit == "milliseconds") return v / 60000.0;
  if (unit == "hours") return v * 60.0;
  throw ConfigError("schema: unknown timestamp_unit '" + unit + "'");
}

int resolve_column(const std::vector<std::string>& header, bool has_header,
                   const std::string& spec, const char* what) {
  if (spec.empty()) return -1;
  if (has_header) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == spec) return static_cast<int>(i);
    throw ConfigError(std::string("schema: column '") + spec + "' for " +
                      what + " not found in header");
  }
  try {
    return std::stoi(spec);
  } catch (...) {
    throw ConfigError(std::string("schema: expected numeric index for ") +
                      what + " in headerless file, got '" + spec + "'");
  }
}

}  // namespace

InteractionLog parse_log(const std::string& path, const LogSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("parse_log: cannot open " + path);

  std::string line;
  std::vector<std::string> header;
  if (schema.has_header) {
    if (!std::getline(in, line)) throw DataError("parse_log: empty file");
    header = split_line(line, schema.delimiter);
  }

  const std::string& ex_col =
      schema.exercise_from_skill ? schema.skill_col : schema.exercise_col;
  const int ci_student =
      resolve_column(header, schema.has_header, schema.student_col, "student");
  const int ci_exercise =
      resolve_column(header, schema.has_header, ex_col, "exercise");
  const int ci_skill =
      resolve_column(header, schema.has_header, schema.skill_col, "skill");
  const int ci_correct =
      resolve_column(header, schema.has_header, schema.correct_col, "correct");
  const int ci_ts = resolve_column(header, schema.has_header,
                                   schema.timestamp_col, "timestamp");
  const int ci_spent = resolve_column(header, schema.has_header,
                                      schema.time_spent_col, "time_spent");

  InteractionLog log;
  log.vocab.push_back("<pad>");
  std::unordered_map<std::string, std::size_t> student_index;
  std::unordered_map<std::string, int> vocab_index;

  const double nan = std::numeric_limits<double>::quiet_NaN();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++log.parse_report.total_rows;
    const auto fields = split_line(line, schema.delimiter);
    const int max_needed = std::max({ci_student, ci_exercise, ci_skill,
                                     ci_correct, ci_ts, ci_spent});
    if (max_needed >= static_cast<int>(fields.size())) {
      ++log.parse_report.bad_rows;
      continue;
    }
    const std::string& student = fields[ci_student];
    const std::string& ex_tok = fields[ci_exercise];
    const std::string& corr_tok = fields[ci_correct];
    const std::string& ts_tok = fields[ci_ts];
    double ts_v, spent_v = nan;
    int corr_v;
    try {
      ts_v = timestamp_to_minutes(std::stod(ts_tok), schema.timestamp_unit);
      corr_v = std::stoi(corr_tok);
      if (ci_spent >= 0 && !is_null_token(fields[ci_spent]))
        spent_v = std::stod(fields[ci_spent]);
    } catch (const ConfigError&) {
      throw;
    } catch (...) {
      ++log.parse_report.bad_rows;
      continue;
    }
    if (student.empty() || (corr_v != 0 && corr_v != 1) ||
        !std::isfinite(ts_v)) {
      ++log.parse_report.bad_rows;
      continue;
    }
    const bool skill_missing =
        ci_skill >= 0 ? is_null_token(fields[ci_skill]) : false;
    // An interaction whose exercise token is missing cannot be embedded and
    // counts as a bad row unless the skill-cleaning rule will drop it.
    if (is_null_token(ex_tok) && !skill_missing) {
      ++log.parse_report.bad_rows;
      continue;
    }

    auto [sit, snew] = student_index.try_emplace(student, log.students.size());
    if (snew) {
      log.students.emplace_back();
      log.students.back().student_id = student;
    }
    StudentSeq& seq = log.students[sit->second];

    int ex_id = 0;
    if (!is_null_token(ex_tok)) {
      auto [vit, vnew] =
          vocab_index.try_emplace(ex_tok, static_cast<int>(log.vocab.size()));
      if (vnew) log.vocab.push_back(ex_tok);
      ex_id = vit->second;
    }
    seq.exercise.push_back(ex_id);
    seq.response.push_back(corr_v);
    seq.ts.push_back(ts_v);
    seq.time_spent.push_back(spent_v);
    seq.skill_null.push_back(skill_missing ? 1 : 0);
    ++log.parse_report.parsed_rows;
  }

  if (log.parse_report.total_rows == 0) {
    throw DataError("parse_log: no data rows in " + path);
  }
  if (log.parse_report.bad_rows * 100 > log.parse_report.total_rows) {
    throw DataError("parse_log: " + std::to_string(log.parse_report.bad_rows) +
                    " of " + std::to_string(log.parse_report.total_rows) +
                    " rows unparseable (>1%)");
  }

  // Chronological order per student; stable so ties keep file order.
  for (auto& s : log.students) {
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       return s.ts[a] < s.ts[b];
                     });
    StudentSeq sorted;
    sorted.student_id = s.student_id;
    for (std::size_t i : order) {
      sorted.exercise.push_back(s.exercise[i]);
      sorted.response.push_back(s.response[i]);
      sorted.ts.push_back(s.ts[i]);
      sorted.time_spent.push_back(s.time_spent[i]);
      sorted.skill_null.push_back(s.skill_null[i]);
    }
    s = std::move(sorted);
  }
  return log;
}

// ---- clean -------------------------------------------------------------------

std::string CleanReport::summary() const {
  std::ostringstream os;
  os << "cleaning: " << input << " in, " << kept << " kept ("
     << dropped_null_skill << " null-skill, " << dropped_elapsed
     << " elapsed>max, " << dropped_time_spent << " time-spent>max)";
  return os.str();
}

InteractionLog clean(const InteractionLog& log, const CleanConfig& cfg,
                     CleanReport* report) {
  CleanReport rep;
  InteractionLog out;
  out.vocab = log.vocab;
  out.parse_report = log.parse_report;

  const double max_step_min = cfg.max_step_seconds / 60.0;
  const double eps = 1e-9;  // unit-conversion slack on the strict boundary
  for (const auto& s : log.students) {
    StudentSeq kept;
    kept.student_id = s.student_id;
    for (std::size_t i = 0; i < s.size(); ++i) {
      ++rep.input;
      if (cfg.drop_null_skill && s.skill_null[i]) {
        ++rep.dropped_null_skill;
        continue;
      }
      if (!std::isnan(s.time_spent[i]) &&
          s.time_spent[i] > cfg.max_time_spent_seconds + eps) {
        ++rep.dropped_time_spent;
        continue;
      }
      if (i > 0) {
        const double gap_min = s.ts[i] - s.ts[i - 1];
        // Elapsed-time outlier only inside a session: a gap beyond the
        // session threshold is a boundary, not time spent on one step.
        if (gap_min > max_step_min + eps &&
            gap_min <= cfg.session_gap_minutes) {
          ++rep.dropped_elapsed;
          continue;
        }
      }
      kept.exercise.push_back(s.exercise[i]);
      kept.response.push_back(s.response[i]);
      kept.ts.push_back(s.ts[i]);
      kept.time_spent.push_back(s.time_spent[i]);
      kept.skill_null.push_back(s.skill_null[i]);
      ++rep.kept;
    }
    if (!kept.exercise.empty()) out.students.push_back(std::move(kept));
  }
  if (report) *report = rep;
  return out;
}

// ---- derived features -----------------------------------------------------

void derive_sessions(const std::vector<double>& ts, double gap_minutes,
                     std::vector<int>& session_out, std::vector<int>& step_out) {
  if (gap_minutes <= 0) throw ConfigError("derive_sessions: gap must be > 0");
  session_out.clear();
  step_out.clear();
  session_out.reserve(ts.size());
  step_out.reserve(ts.size());
  int session = 0;
  int step = 0;
  double ts_last = -std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < ts.size(); ++t) {
    if (t > 0 && ts[t] < ts[t - 1]) {
      throw DataError("derive_sessions: timestamps decrease at index " +
                      std::to_string(t));
    }
    if (ts[t] - ts_last > gap_minutes) {
      ++session;
      step = 0;
    }
    session_out.push_back(session);
    step_out.push_back(step);
    ts_last = ts[t];
    ++step;
  }
}

LagMatrix time_lag_matrix(const std::vector<double>& ts) {
  LagMatrix m;
  m.len = ts.size();
  m.dt.assign(m.len * m.len, 0.0);
  if (m.len == 0) return m;
  for (std::size_t t = 0; t < m.len; ++t) {
    for (std::size_t j = 0; j < t; ++j) {
      const double lag = ts[t] - ts[j];
      if (lag < 0) throw DataError("time_lag_matrix: negative lag");
      m.dt[t * m.len + j] = lag;
    }
  }
  m.dt_max = std::max(ts[m.len - 1] - ts[0], 1.0);
  return m;
}

std::vector<AugmentedSequence> derive_features(const InteractionLog& log,
                                               double gap_minutes) {
  std::vector<AugmentedSequence> out;
  out.reserve(log.students.size());
  for (const auto& s : log.students) {
    AugmentedSequence a;
    a.student_id = s.student_id;
    a.exercise = s.exercise;
    a.response = s.response;
    a.ts = s.ts;
    derive_sessions(s.ts, gap_minutes, a.session, a.step);
    a.source_len = static_cast<int>(s.size());
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<AugmentedSequence> window(const AugmentedSequence& seq,
                                      std::size_t l_max,
                                      std::size_t min_len) {
  std::vector<AugmentedSequence> out;
  const std::size_t n = seq.size();
  for (std::size_t start = 0; start < n; start += l_max) {
    const std::size_t end = std::min(start + l_max, n);
    if (end - start < min_len) continue;
    AugmentedSequence w;
    w.student_id = seq.student_id;
    w.source_len = seq.source_len;
    w.exercise.assign(seq.exercise.begin() + start, seq.exercise.begin() + end);
    w.response.assign(seq.response.begin() + start, seq.response.begin() + end);
    w.ts.assign(seq.ts.begin() + start, seq.ts.begin() + end);
    w.session.assign(seq.session.begin() + start, seq.session.begin() + end);
    w.step.assign(seq.step.begin() + start, seq.step.begin() + end);
    out.push_back(std::move(w));
  }
  return out;
}

namespace {

AugmentedSequence slice_sequence(const AugmentedSequence& s, std::size_t lo,
                                 std::size_t hi) {
  AugmentedSequence out;
  out.student_id = s.student_id;
  out.source_len = s.source_len;
  out.exercise.assign(s.exercise.begin() + lo, s.exercise.begin() + hi);
  out.response.assign(s.response.begin() + lo, s.response.begin() + hi);
  out.ts.assign(s.ts.begin() + lo, s.ts.begin() + hi);
  out.session.assign(s.session.begin() + lo, s.session.begin() + hi);
  out.step.assign(s.step.begin() + lo, s.step.begin() + hi);
  return out;
}

}  // namespace

DatasetSplit split_by_sessions(const std::vector<AugmentedSequence>& students,
                               std::size_t l_max) {
  DatasetSplit split;
  for (const auto& s : students) {
    if (s.size() == 0) continue;
    const int n_sessions = s.session.back();
    SplitManifest::Row row;
    row.student_id = s.student_id;
    row.n_sessions = n_sessions;

    int train_n, val_n;
    if (n_sessions < 3) {
      train_n = n_sessions;
      val_n = 0;
    } else {
      train_n = static_cast<int>(std::ceil(0.6 * n_sessions));
      val_n = static_cast<int>(std::ceil(0.2 * n_sessions));
      if (train_n + val_n > n_sessions) val_n = n_sessions - train_n;
    }
    const int test_n = n_sessions - train_n - val_n;
    row.train_sessions = train_n;
    row.val_sessions = val_n;
    row.test_sessions = test_n;
    split.manifest.rows.push_back(row);

    // Session ids are 1-based and contiguous; find segment boundaries.
    std::size_t i = 0;
    auto take_until = [&](int last_session) {
      const std::size_t lo = i;
      while (i < s.size() && s.session[i] <= last_session) ++i;
      return std::make_pair(lo, i);
    };
    auto [tr_lo, tr_hi] = take_until(train_n);
    auto [va_lo, va_hi] = take_until(train_n + val_n);
    auto [te_lo, te_hi] = take_until(n_sessions);

    auto emit = [&](std::size_t lo, std::size_t hi,
                    std::vector<AugmentedSequence>& dst) {
      if (hi <= lo) return;
      for (auto& w : window(slice_sequence(s, lo, hi), l_max)) {
        dst.push_back(std::move(w));
      }
    };
    emit(tr_lo, tr_hi, split.train);
    emit(va_lo, va_hi, split.val);
    emit(te_lo, te_hi, split.test);
  }
  return split;
}

// ---- batching ----------------------------------------------------------------

Batch make_batch(const std::vector<const AugmentedSequence*>& seqs) {
  Batch batch;
  batch.b = seqs.size();
  for (const auto* s : seqs) batch.l = std::max(batch.l, s->size());
  const std::size_t total = batch.b * batch.l;
  batch.exercise.assign(total, 0);
  batch.prev_answer.assign(total, 0);
  batch.target.assign(total, 0);
  batch.session.assign(total, 0);
  batch.step.assign(total, 0);
  batch.ts.assign(total, 0.0);
  batch.valid.assign(total, 0);
  batch.source_len.assign(batch.b, 0);

  for (std::size_t si = 0; si < seqs.size(); ++si) {
    const AugmentedSequence& s = *seqs[si];
    batch.source_len[si] = s.source_len;
    const std::size_t n = s.size();
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t at = batch.idx(si, t);
      batch.exercise[at] = s.exercise[t];
      batch.prev_answer[at] = t == 0 ? 2 : s.response[t - 1];
      batch.target[at] = static_cast<real>(s.response[t]);
      batch.session[at] = s.session[t];
      batch.step[at] = s.step[t];
      batch.ts[at] = s.ts[t];
      batch.valid[at] = 1;
    }
    // Padded tail repeats the final timestamp so lag rows stay non-negative.
    for (std::size_t t = n; t < batch.l; ++t) {
      batch.ts[batch.idx(si, t)] = n > 0 ? s.ts[n - 1] : 0.0;
    }
  }
  return batch;
}

// ---- stats ---------------------------------------------------------------------

std::string DatasetStats::summary() const {
  std::ostringstream os;
  os << "students: " << students << "\n"
     << "questions: " << questions << "\n"
     << "interactions: " << interactions << "\n"
     << "avg sessions: " << avg_sessions << "\n"
     << "avg interactions/session: " << avg_interactions_per_session;
  return os.str();
}

DatasetStats dataset_stats(const std::vector<AugmentedSequence>& students,
                           std::size_t vocab_size) {
  DatasetStats st;
  st.students = students.size();
  st.questions = vocab_size;
  std::size_t sessions = 0;
  for (const auto& s : students) {
    st.interactions += s.size();
    if (!s.session.empty()) sessions += s.session.back();
  }
  if (st.students > 0)
    st.avg_sessions = static_cast<double>(sessions) / st.students;
  if (sessions > 0)
    st.avg_interactions_per_session =
        static_cast<double>(st.interactions) / sessions;
  return st;
}

// ---- shard io -------------------------------------------------------------------

namespace {

json sequence_to_json(const AugmentedSequence& s, const char* tag) {
  json j;
  j["split"] = tag;
  j["student"] = s.student_id;
  j["exercise"] = s.exercise;
  j["response"] = s.response;
  j["ts"] = s.ts;
  j["session"] = s.session;
  j["step"] = s.step;
  j["source_len"] = s.source_len;
  return j;
}

AugmentedSequence sequence_from_json(const json& j) {
  AugmentedSequence s;
  s.student_id = j.at("student").get<std::string>();
  s.exercise = j.at("exercise").get<std::vector<int>>();
  s.response = j.at("response").get<std::vector<int>>();
  s.ts = j.at("ts").get<std::vector<double>>();
  s.session = j.at("session").get<std::vector<int>>();
  s.step = j.at("step").get<std::vector<int>>();
  s.source_len = j.at("source_len").get<int>();
  return s;
}

}  // namespace

void write_shards(const DatasetSplit& split, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir + "/sequences.jsonl");
  if (!out) throw DataError("write_shards: cannot write to " + dir);
  auto dump = [&](const std::vector<AugmentedSequence>& seqs,
                  const char* tag) {
    for (const auto& s : seqs) out << sequence_to_json(s, tag).dump() << "\n";
  };
  dump(split.train, "train");
  dump(split.val, "val");
  dump(split.test, "test");

  json manifest = json::array();
  for (const auto& r : split.manifest.rows) {
    manifest.push_back({{"student", r.student_id},
                        {"sessions", r.n_sessions},
                        {"train", r.train_sessions},
                        {"val", r.val_sessions},
                        {"test", r.test_sessions}});
  }
  std::ofstream mf(dir + "/split_manifest.json");
  mf << manifest.dump(2) << "\n";
}

DatasetSplit read_shards(const std::string& dir) {
  std::ifstream in(dir + "/sequences.jsonl");
  if (!in) throw DataError("read_shards: cannot open " + dir);
  DatasetSplit split;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    const std::string tag = j.at("split").get<std::string>();
    AugmentedSequence s = sequence_from_json(j);
    if (tag == "train")
      split.train.push_back(std::move(s));
    else if (tag == "val")
      split.val.push_back(std::move(s));
    else if (tag == "test")
      split.test.push_back(std::move(s));
    else
      throw DataError("read_shards: unknown split tag '" + tag + "'");
  }

  std::ifstream mf(dir + "/split_manifest.json");
  if (mf) {
    json manifest = json::parse(mf);
    for (const auto& r : manifest) {
      SplitManifest::Row row;
      row.student_id = r.at("student").get<std::string>();
      row.n_sessions = r.at("sessions").get<int>();
      row.train_sessions = r.at("train").get<int>();
      row.val_sessions = r.at("val").get<int>();
      row.test_sessions = r.at("test").get<int>();
      split.manifest.rows.push_back(row);
    }
  }
  return split;
}

}  // namespace kt
