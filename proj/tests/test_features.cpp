#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "kt/features.hpp"

using kt::AugmentedSequence;
using kt::InteractionLog;
using kt::LogSchema;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  const std::string path =
      (std::filesystem::temp_directory_path() / name).string();
  std::ofstream out(path);
  out << content;
  return path;
}

// Independent sessionization: mark boundaries, then count. Used as the
// oracle for derive_sessions.
void brute_force_sessions(const std::vector<double>& ts, double gap,
                          std::vector<int>& session, std::vector<int>& step) {
  std::vector<std::size_t> starts;
  for (std::size_t t = 0; t < ts.size(); ++t) {
    if (t == 0 || ts[t] - ts[t - 1] > gap) starts.push_back(t);
  }
  session.assign(ts.size(), 0);
  step.assign(ts.size(), 0);
  for (std::size_t t = 0; t < ts.size(); ++t) {
    std::size_t k = 0;
    while (k + 1 < starts.size() && starts[k + 1] <= t) ++k;
    session[t] = static_cast<int>(k + 1);
    step[t] = static_cast<int>(t - starts[k]);
  }
}

}  // namespace

TEST_CASE("parse_log reads a well-formed file and builds the vocab") {
  const auto path = write_temp(
      "kt_parse1.csv",
      "student_id,exercise_id,skill_id,correct,timestamp\n"
      "s1,e7,k1,1,0\n"
      "s1,e3,k1,0,5\n"
      "s2,e7,k2,1,2\n");
  InteractionLog log = kt::parse_log(path, LogSchema{});
  CHECK(log.students.size() == 2);
  CHECK(log.total_interactions() == 3);
  CHECK(log.vocab_size() == 2);  // e7, e3
  CHECK(log.students[0].student_id == "s1");
  CHECK(log.students[0].exercise[0] == 1);  // e7 first seen
  CHECK(log.students[0].exercise[1] == 2);
  CHECK(log.parse_report.bad_rows == 0);
}

TEST_CASE("parse_log converts seconds to minutes") {
  const auto path = write_temp("kt_parse2.csv",
                               "student_id,exercise_id,correct,timestamp\n"
                               "s1,e1,1,120\n"
                               "s1,e2,0,300\n");
  LogSchema schema;
  schema.skill_col = "";
  schema.timestamp_unit = "seconds";
  InteractionLog log = kt::parse_log(path, schema);
  CHECK(log.students[0].ts[0] == doctest::Approx(2.0));
  CHECK(log.students[0].ts[1] == doctest::Approx(5.0));
}

TEST_CASE("parse_log counts bad rows and hard-fails above 1%") {
  std::string big = "student_id,exercise_id,correct,timestamp\n";
  for (int i = 0; i < 300; ++i)
    big += "s1,e" + std::to_string(i % 7) + ",1," + std::to_string(i) + "\n";
  big += "s1,e1,notanint,301\n";  // one bad row out of 301: under 1%
  LogSchema schema;
  schema.skill_col = "";
  auto path = write_temp("kt_parse3.csv", big);
  InteractionLog log = kt::parse_log(path, schema);
  CHECK(log.parse_report.bad_rows == 1);
  CHECK(log.total_interactions() == 300);

  // 2 bad rows out of 12 is a hard error
  std::string small = "student_id,exercise_id,correct,timestamp\n";
  for (int i = 0; i < 10; ++i)
    small += "s1,e1,1," + std::to_string(i) + "\n";
  small += "s1,e1,x,10\ns1,e1,y,11\n";
  auto path2 = write_temp("kt_parse4.csv", small);
  CHECK_THROWS_AS((void)kt::parse_log(path2, schema), kt::DataError);
}

TEST_CASE("parse_log sorts per-student interactions by timestamp") {
  const auto path = write_temp("kt_parse5.csv",
                               "student_id,exercise_id,correct,timestamp\n"
                               "s1,e1,1,50\n"
                               "s1,e2,0,10\n"
                               "s1,e3,1,30\n");
  LogSchema schema;
  schema.skill_col = "";
  InteractionLog log = kt::parse_log(path, schema);
  CHECK(log.students[0].ts == std::vector<double>{10, 30, 50});
  CHECK(log.students[0].exercise == std::vector<int>{2, 3, 1});
}

TEST_CASE("clean drops null-skill rows") {
  const auto path = write_temp(
      "kt_clean1.csv",
      "student_id,exercise_id,skill_id,correct,timestamp\n"
      "s1,e1,k1,1,0\n"
      "s1,e2,,0,5\n"
      "s1,e3,NULL,1,9\n"
      "s1,e4,k2,1,12\n");
  InteractionLog log = kt::parse_log(path, LogSchema{});
  kt::CleanReport rep;
  InteractionLog cleaned = kt::clean(log, kt::CleanConfig{}, &rep);
  CHECK(rep.dropped_null_skill == 2);
  CHECK(cleaned.total_interactions() == 2);
  CHECK(cleaned.students[0].exercise == std::vector<int>{1, 4});
}

TEST_CASE("clean removes within-session elapsed-time outliers, strict >") {
  InteractionLog log;
  kt::StudentSeq s;
  s.student_id = "s1";
  const double nan = std::nan("");
  // gaps: 9999 s (kept), 10000 s (removed), 11 h (session boundary, kept)
  const double m0 = 0;
  const double m1 = m0 + 9999.0 / 60.0;
  const double m2 = m1 + 10000.0 / 60.0;
  const double m3 = m2 + 11.0 * 60.0;
  for (double ts : {m0, m1, m2, m3}) {
    s.exercise.push_back(1);
    s.response.push_back(1);
    s.ts.push_back(ts);
    s.time_spent.push_back(nan);
    s.skill_null.push_back(0);
  }
  log.students.push_back(s);
  log.vocab = {"<pad>", "e1"};

  kt::CleanReport rep;
  InteractionLog cleaned = kt::clean(log, kt::CleanConfig{}, &rep);
  CHECK(rep.dropped_elapsed == 1);
  CHECK(cleaned.students[0].ts == std::vector<double>{m0, m1, m3});
}

TEST_CASE("clean drops excessive time-spent when the column exists") {
  InteractionLog log;
  kt::StudentSeq s;
  s.student_id = "s1";
  s.exercise = {1, 2};
  s.response = {1, 1};
  s.ts = {0, 1};
  s.time_spent = {42.0, 10000.0};
  s.skill_null = {0, 0};
  log.students.push_back(s);
  log.vocab = {"<pad>", "e1", "e2"};
  kt::CleanReport rep;
  InteractionLog cleaned = kt::clean(log, kt::CleanConfig{}, &rep);
  CHECK(rep.dropped_time_spent == 1);
  CHECK(cleaned.students[0].exercise == std::vector<int>{1});
}

TEST_CASE("clean of an empty log is an empty log") {
  InteractionLog log;
  kt::CleanReport rep;
  InteractionLog cleaned = kt::clean(log, kt::CleanConfig{}, &rep);
  CHECK(cleaned.students.empty());
  CHECK(rep.input == 0);
}

TEST_CASE("derive_sessions traces the documented example") {
  std::vector<int> s, tau;
  kt::derive_sessions({0, 5, 10, 800}, 600, s, tau);
  CHECK(s == std::vector<int>{1, 1, 1, 2});
  CHECK(tau == std::vector<int>{0, 1, 2, 0});
}

TEST_CASE("derive_sessions edge cases") {
  std::vector<int> s, tau;
  kt::derive_sessions({123456.0}, 600, s, tau);
  CHECK(s == std::vector<int>{1});
  CHECK(tau == std::vector<int>{0});

  // gap exactly equal to the threshold stays in-session
  kt::derive_sessions({0, 600}, 600, s, tau);
  CHECK(s == std::vector<int>{1, 1});
  CHECK(tau == std::vector<int>{0, 1});

  kt::derive_sessions({0, 600.0001}, 600, s, tau);
  CHECK(s == std::vector<int>{1, 2});

  CHECK_THROWS_AS(kt::derive_sessions({5, 4}, 600, s, tau), kt::DataError);
}

TEST_CASE("derive_sessions matches the brute-force oracle on random vectors") {
  kt::Rng rng(2024);
  std::uniform_int_distribution<int> len_dist(1, 40);
  // Gap distribution straddles the threshold.
  std::uniform_real_distribution<double> gap_dist(0.0, 1200.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = len_dist(rng);
    std::vector<double> ts(n);
    double t = 0;
    for (int i = 0; i < n; ++i) {
      double g = gap_dist(rng);
      if (trial % 7 == 0) g = std::floor(g / 600.0) * 600.0;  // hit boundary
      t += g;
      ts[i] = t;
    }
    std::vector<int> s1, tau1, s2, tau2;
    kt::derive_sessions(ts, 600, s1, tau1);
    brute_force_sessions(ts, 600, s2, tau2);
    REQUIRE(s1 == s2);
    REQUIRE(tau1 == tau2);

    //

    int gaps_over = 0;
    for (int i = 1; i < n; ++i)
      if (ts[i] - ts[i - 1] > 600) ++gaps_over;
    REQUIRE(s1.back() == 1 + gaps_over);
  }
}

TEST_CASE("time_lag_matrix values, floor, and monotonicity") {
  auto m = kt::time_lag_matrix({0, 30, 60});
  CHECK(m.dt[2 * 3 + 0] == 60.0);
  CHECK(m.dt[2 * 3 + 1] == 30.0);
  CHECK(m.dt_max == 60.0);
  for (std::size_t t = 0; t < 3; ++t) CHECK(m.dt[t * 3 + t] == 0.0);

  auto flat = kt::time_lag_matrix({7, 7, 7});
  CHECK(flat.dt_max == 1.0);
  for (double v : flat.dt) CHECK(v == 0.0);

  kt::Rng rng(5);
  std::uniform_real_distribution<double> gap(0.0, 100.0);
  std::vector<double> ts(12);
  double t = 0;
  for (auto& v : ts) {
    t += gap(rng);
    v = t;
  }
  auto big = kt::time_lag_matrix(ts);
  for (std::size_t i = 0; i < 12; ++i) {
    for (std::size_t j = 0; j + 1 <= i; ++j) {
      CHECK(big.dt[i * 12 + j] >= 0.0);
      if (j + 1 <= i) CHECK(big.dt[i * 12 + j] >= big.dt[i * 12 + j + 1]);
    }
  }
}

namespace {
AugmentedSequence make_seq(int n, double gap_every = 0, int gap_stride = 0) {
  AugmentedSequence s;
  s.student_id = "x";
  s.source_len = n;
  double t = 0;
  for (int i = 0; i < n; ++i) {
    t += (gap_stride > 0 && i > 0 && i % gap_stride == 0) ? gap_every : 1.0;
    s.exercise.push_back(1 + (i % 5));
    s.response.push_back(i % 2);
    s.ts.push_back(t);
  }
  kt::derive_sessions(s.ts, 600, s.session, s.step);
  return s;
}
}  // namespace

TEST_CASE("window splits long sequences and drops stubs") {
  auto long_seq = make_seq(450);
  auto w = kt::window(long_seq, 200);
  REQUIRE(w.size() == 3);
  CHECK(w[0].size() == 200);
  CHECK(w[1].size() == 200);
  CHECK(w[2].size() == 50);

  // lossless: concatenation reproduces the original
  std::vector<int> cat;
  for (const auto& ww : w)
    cat.insert(cat.end(), ww.exercise.begin(), ww.exercise.end());
  CHECK(cat == long_seq.exercise);

  CHECK(kt::window(make_seq(2), 200).empty());
  auto exact = kt::window(make_seq(200), 200);
  REQUIRE(exact.size() == 1);
  CHECK(exact[0].exercise == make_seq(200).exercise);

  // a 202-step sequence leaves a 2-step stub that is dropped
  auto stub = kt::window(make_seq(202), 200);
  CHECK(stub.size() == 1);
}

TEST_CASE("split_by_sessions follows the ceiling rule") {
  // 10 sessions of 5 interactions: 6/2/2
  auto s10 = make_seq(50, 700.0, 5);
  REQUIRE(s10.session.back() == 10);
  auto split = kt::split_by_sessions({s10}, 200);
  REQUIRE(split.manifest.rows.size() == 1);
  CHECK(split.manifest.rows[0].train_sessions == 6);
  CHECK(split.manifest.rows[0].val_sessions == 2);
  CHECK(split.manifest.rows[0].test_sessions == 2);

  auto s5 = make_seq(25, 700.0, 5);
  REQUIRE(s5.session.back() == 5);
  auto split5 = kt::split_by_sessions({s5}, 200);
  CHECK(split5.manifest.rows[0].train_sessions == 3);
  CHECK(split5.manifest.rows[0].val_sessions == 1);
  CHECK(split5.manifest.rows[0].test_sessions == 1);

  // fewer than 3 sessions: everything to train
  auto s2 = make_seq(10, 700.0, 5);
  REQUIRE(s2.session.back() == 2);
  auto split2 = kt::split_by_sessions({s2}, 200);
  CHECK(split2.manifest.rows[0].train_sessions == 2);
  CHECK(split2.manifest.rows[0].test_sessions == 0);
  CHECK(split2.test.empty());
  CHECK_FALSE(split2.train.empty());
}

TEST_CASE("no test session precedes a train session of the same student") {
  kt::Rng rng(77);
  std::uniform_int_distribution<int> n_dist(6, 60);
  for (int trial = 0; trial < 50; ++trial) {
    auto s = make_seq(n_dist(rng), 700.0, 4);
    auto split = kt::split_by_sessions({s}, 15);
    double max_train_ts = -1;
    for (const auto& w : split.train)
      for (double t : w.ts) max_train_ts = std::max(max_train_ts, t);
    for (const auto& w : split.val)
      for (double t : w.ts) REQUIRE(t > max_train_ts);
    double max_val_ts = max_train_ts;
    for (const auto& w : split.val)
      for (double t : w.ts) max_val_ts = std::max(max_val_ts, t);
    for (const auto& w : split.test)
      for (double t : w.ts) REQUIRE(t > max_val_ts);
  }
}

TEST_CASE("make_batch pads to the longest sequence and masks the tail") {
  auto a = make_seq(3);
  auto b = make_seq(5);
  auto c = make_seq(4);
  auto batch = kt::make_batch({&a, &b, &c});
  CHECK(batch.b == 3);
  CHECK(batch.l == 5);
  CHECK(batch.valid ==
        std::vector<kt::real>{1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0});
  // first position consumes the START answer token
  CHECK(batch.prev_answer[batch.idx(0, 0)] == 2);
  CHECK(batch.prev_answer[batch.idx(0, 1)] == a.response[0]);
  CHECK(batch.exercise[batch.idx(0, 3)] == 0);  // padding
}

TEST_CASE("shards round-trip") {
  auto s10 = make_seq(50, 700.0, 5);
  auto split = kt::split_by_sessions({s10}, 20);
  const std::string dir =
      (std::filesystem::temp_directory_path() / "kt_shards_test").string();
  kt::write_shards(split, dir);
  auto loaded = kt::read_shards(dir);
  REQUIRE(loaded.train.size() == split.train.size());
  REQUIRE(loaded.val.size() == split.val.size());
  REQUIRE(loaded.test.size() == split.test.size());
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    CHECK(loaded.train[i].exercise == split.train[i].exercise);
    CHECK(loaded.train[i].ts == split.train[i].ts);
    CHECK(loaded.train[i].session == split.train[i].session);
  }
  CHECK(loaded.manifest.rows.size() == split.manifest.rows.size());
}

TEST_CASE("dataset stats aggregate sessions and interactions") {
  auto s1 = make_seq(40, 700.0, 10);  // 4 sessions
  auto s2 = make_seq(20, 700.0, 10);  // 2 sessions
  auto st = kt::dataset_stats({s1, s2}, 5);
  CHECK(st.students == 2);
  CHECK(st.questions == 5);
  CHECK(st.interactions == 60);
  CHECK(st.avg_sessions == doctest::Approx(3.0));
  CHECK(st.avg_interactions_per_session == doctest::Approx(10.0));
}
