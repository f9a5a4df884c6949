#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "kt/eval.hpp"
#include "kt/synth.hpp"
#include "kt/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Usage-level problems that deserve exit code 2 but are not CLI11 parse
// errors (config/flag conflicts, bad combinations).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw kt::DataError("cannot hash missing file " + path);
  std::uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

std::string default_out(const std::string& command) {
  const char* root = std::getenv("KTNET_OUT_ROOT");
  const std::string base = root && *root ? root : "runs";
  return base + "/" + command;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw kt::DataError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Single declarative config file with optional sections; flags override.
struct FileConfig {
  json root = json::object();

  static FileConfig load(const std::string& path) {
    FileConfig fc;
    if (!path.empty()) fc.root = json::parse(read_file(path));
    return fc;
  }
  json section(const char* name) const {
    return root.contains(name) ? root[name] : json::object();
  }
};

struct Manifest {
  std::string command;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::array();
  std::uint64_t seed = 0;

  void add_input(const std::string& path) {
    inputs[path] = fnv1a_file(path);
  }
  void write(const std::string& out_dir) const {
    fs::create_directories(out_dir);
    json j;
    j["command"] = command;
    j["tool_version"] = "1.0";
    j["seed"] = seed;
    j["config"] = config;
    j["input_hashes"] = inputs;
    j["outputs"] = outputs;
    std::ofstream out(out_dir + "/manifest.json");
    out << j.dump(2) << "\n";
  }
};

kt::ModelConfig model_config_from(const FileConfig& fc) {
  const json sec = fc.section("model");
  return kt::ModelConfig::from_json_text(sec.dump());
}

kt::TrainConfig train_config_from(const FileConfig& fc) {
  const json sec = fc.section("train");
  return kt::TrainConfig::from_json_text(sec.dump());
}

kt::SynthConfig synth_config_from(const FileConfig& fc) {
  const json sec = fc.section("synth");
  return kt::SynthConfig::from_json_text(sec.dump());
}

std::size_t infer_vocab(const kt::DatasetSplit& split) {
  int max_id = 0;
  auto scan = [&](const std::vector<kt::AugmentedSequence>& seqs) {
    for (const auto& s : seqs)
      for (int e : s.exercise) max_id = std::max(max_id, e);
  };
  scan(split.train);
  scan(split.val);
  scan(split.test);
  return static_cast<std::size_t>(max_id);
}

// ---- command bodies -------------------------------------------------------

int cmd_synth(const std::string& config_path, const std::string& out,
              std::uint64_t seed, bool seed_given) {
  FileConfig fc = FileConfig::load(config_path);
  kt::SynthConfig sc = synth_config_from(fc);
  if (seed_given) sc.seed = seed;

  kt::SynthDataset data = kt::generate(sc);
  fs::create_directories(out);
  kt::write_synth_csv(data, out + "/log.csv", out + "/true_probs.csv");
  {
    std::ofstream cfg(out + "/synth_config.json");
    cfg << sc.to_json_text() << "\n";
  }

  Manifest man;
  man.command = "synth";
  man.seed = sc.seed;
  man.config = json::parse(sc.to_json_text());
  if (!config_path.empty()) man.add_input(config_path);
  man.outputs = {out + "/log.csv", out + "/true_probs.csv",
                 out + "/synth_config.json"};
  man.write(out);

  const auto oauc = kt::oracle_auc(data);
  std::cout << "students: " << data.log.students.size() << "\n"
            << "interactions: " << data.log.total_interactions() << "\n"
            << "oracle auc: "
            << (oauc ? std::to_string(*oauc) : std::string("n/a")) << "\n"
            << "wrote " << out << "/log.csv\n";
  return 0;
}

int cmd_derive(const std::string& log_path, const std::string& schema_path,
               double gap_hours, std::size_t max_len, const std::string& out) {
  kt::LogSchema schema = schema_path.empty()
                             ? kt::LogSchema{}
                             : kt::LogSchema::from_json_file(schema_path);
  kt::InteractionLog raw = kt::parse_log(log_path, schema);

  kt::CleanConfig clean_cfg;
  clean_cfg.session_gap_minutes = gap_hours * 60.0;
  kt::CleanReport clean_rep;
  kt::InteractionLog cleaned = kt::clean(raw, clean_cfg, &clean_rep);

  auto feats = kt::derive_features(cleaned, gap_hours * 60.0);
  kt::DatasetSplit split = kt::split_by_sessions(feats, max_len);
  kt::write_shards(split, out);

  kt::DatasetStats stats = kt::dataset_stats(feats, cleaned.vocab_size());
  {
    std::ofstream rep(out + "/cleaning_report.txt");
    rep << "parsed rows: " << raw.parse_report.parsed_rows << " ("
        << raw.parse_report.bad_rows << " bad skipped)\n"
        << clean_rep.summary() << "\n\n"
        << stats.summary() << "\n";
  }

  Manifest man;
  man.command = "derive";
  man.add_input(log_path);
  if (!schema_path.empty()) man.add_input(schema_path);
  man.config = {{"gap_hours", gap_hours},
                {"max_len", max_len},
                {"schema", json::parse(schema.to_json_text())}};
  man.outputs = {out + "/sequences.jsonl", out + "/split_manifest.json",
                 out + "/cleaning_report.txt"};
  man.write(out);

  std::cout << stats.summary() << "\n"
            << clean_rep.summary() << "\n"
            << "windows: train " << split.train.size() << ", val "
            << split.val.size() << ", test " << split.test.size() << "\n"
            << "wrote " << out << "/sequences.jsonl\n";
  return 0;
}

struct ModelFlagOverrides {
  std::string variant;
  double beta = -1;
  bool multi_rate = false;
  std::size_t max_len = 0;

  void apply(kt::ModelConfig& mc) const {
    if (!variant.empty()) mc.variant = kt::variant_from_name(variant);
    if (max_len) mc.max_len = max_len;
    if (multi_rate) mc.multi_rate = true;
    if (beta >= 0) {
      if (!mc.uses_forgetting_bias()) {
        throw UsageError("--beta conflicts with --variant " +
                         kt::variant_name(mc.variant) +
                         " (that variant forces beta = 0)");
      }
      mc.beta = static_cast<kt::real>(beta);
    }
    if (!mc.uses_forgetting_bias()) mc.beta = 0;
  }
};

int cmd_train(const std::string& data_dir, const std::string& config_path,
              std::uint64_t seed, bool seed_given,
              const ModelFlagOverrides& over, const std::string& out) {
  FileConfig fc = FileConfig::load(config_path);
  kt::DatasetSplit split = kt::read_shards(data_dir);
  kt::ModelConfig mc = model_config_from(fc);
  if (mc.vocab == 0) mc.vocab = infer_vocab(split);
  over.apply(mc);
  kt::TrainConfig tc = train_config_from(fc);
  const std::uint64_t run_seed =
      seed_given ? seed : (tc.seeds.empty() ? 1 : tc.seeds[0]);

  kt::Model model(mc, run_seed);
  kt::RunRecord rec = kt::train(model, split, tc, run_seed, out);

  {
    std::ofstream rep(out + "/eval.json");
    rep << rec.test_report.to_json_text() << "\n";
  }
  Manifest man;
  man.command = "train";
  man.seed = run_seed;
  man.add_input(data_dir + "/sequences.jsonl");
  if (!config_path.empty()) man.add_input(config_path);
  man.config = {{"model", json::parse(mc.to_json_text())},
                {"train", json::parse(tc.to_json_text())}};
  man.outputs = {out + "/best.ckpt.json", out + "/epochs.jsonl",
                 out + "/eval.json"};
  man.write(out);

  std::cout << "epochs run: " << rec.epochs.size() << " (best "
            << rec.best_epoch << ")\n";
  if (rec.best_val_auc)
    std::cout << "best val auc: " << *rec.best_val_auc << "\n";
  if (rec.test_report.auc_value)
    std::cout << "test auc: " << *rec.test_report.auc_value << ", acc "
              << rec.test_report.acc << "\n";
  std::cout << "checkpoint: " << rec.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& which, const std::string& out) {
  kt::Model model = kt::Model::load_checkpoint(ckpt_path);
  kt::DatasetSplit split = kt::read_shards(data_dir);
  const std::vector<kt::AugmentedSequence>& seqs =
      which == "train" ? split.train : (which == "val" ? split.val : split.test);
  if (seqs.empty()) throw kt::DataError("eval: split '" + which + "' is empty");

  kt::EvalReport rep = kt::evaluate(model, seqs);
  kt::ParamCount params = kt::count_params(model.config());
  kt::FlopsEstimate flops =
      kt::flops_estimate(model.config(), model.config().max_len);

  fs::create_directories(out);
  {
    json j = json::parse(rep.to_json_text());
    j["param_count"] = {{"total", params.total},
                        {"session_embedding", params.session_embedding},
                        {"positional_embedding", params.positional_embedding},
                        {"forgetting", params.forgetting}};
    j["flops_per_forward"] = {{"total", flops.total},
                              {"bias_share", flops.bias_share()}};
    std::ofstream f(out + "/eval.json");
    f << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
  }

  Manifest man;
  man.command = "eval";
  man.add_input(ckpt_path);
  man.add_input(data_dir + "/sequences.jsonl");
  man.config = {{"split", which}};
  man.outputs = {out + "/eval.json"};
  man.write(out);
  return 0;
}

int cmd_ablate(const std::string& data_dir, const std::string& config_path,
               const std::string& out) {
  FileConfig fc = FileConfig::load(config_path);
  kt::DatasetSplit split = kt::read_shards(data_dir);
  kt::ModelConfig mc = model_config_from(fc);
  if (mc.vocab == 0) mc.vocab = infer_vocab(split);
  kt::TrainConfig tc = train_config_from(fc);

  const std::vector<kt::Variant> variants = {
      kt::Variant::backbone, kt::Variant::no_session,
      kt::Variant::no_forgetting, kt::Variant::full};
  auto rows = kt::run_matrix(split, mc, tc, variants, out);

  Manifest man;
  man.command = "ablate";
  man.add_input(data_dir + "/sequences.jsonl");
  if (!config_path.empty()) man.add_input(config_path);
  man.config = {{"model", json::parse(mc.to_json_text())},
                {"train", json::parse(tc.to_json_text())}};
  man.outputs = {out + "/results.csv", out + "/runs.jsonl"};
  man.write(out);

  std::cout << "variant         mean_auc  std\n";
  for (const auto& r : rows) {
    std::cout << kt::variant_name(r.variant);
    for (std::size_t i = kt::variant_name(r.variant).size(); i < 16; ++i)
      std::cout << ' ';
    std::cout << r.mean_auc << "  " << r.std_auc << "\n";
  }
  return 0;
}

int cmd_sweep_beta(const std::string& data_dir, const std::string& config_path,
                   std::vector<double> betas, const std::string& out) {
  FileConfig fc = FileConfig::load(config_path);
  kt::DatasetSplit split = kt::read_shards(data_dir);
  kt::ModelConfig mc = model_config_from(fc);
  if (mc.vocab == 0) mc.vocab = infer_vocab(split);
  kt::TrainConfig tc = train_config_from(fc);
  if (!betas.empty()) {
    tc.beta_sweep.clear();
    for (double b : betas) tc.beta_sweep.push_back(static_cast<kt::real>(b));
  }

  auto points = kt::beta_sweep(split, mc, tc, out);

  Manifest man;
  man.command = "sweep-beta";
  man.add_input(data_dir + "/sequences.jsonl");
  if (!config_path.empty()) man.add_input(config_path);
  man.config = {{"model", json::parse(mc.to_json_text())},
                {"train", json::parse(tc.to_json_text())}};
  man.outputs = {out + "/beta_curve.csv"};
  man.write(out);

  std::cout << "beta  mean_auc\n";
  for (const auto& p : points)
    std::cout << p.beta << "  " << p.mean_auc << "\n";
  return 0;
}

int cmd_export_attention(const std::string& ckpt_path,
                         const std::string& data_dir, const std::string& which,
                         std::size_t index, const std::string& out) {
  kt::Model model = kt::Model::load_checkpoint(ckpt_path);
  kt::DatasetSplit split = kt::read_shards(data_dir);
  const std::vector<kt::AugmentedSequence>& seqs =
      which == "train" ? split.train : (which == "val" ? split.val : split.test);
  if (index >= seqs.size()) {
    throw UsageError("sequence index " + std::to_string(index) +
                     " out of range (split has " +
                     std::to_string(seqs.size()) + ")");
  }
  kt::export_attention(model, seqs[index], out);

  Manifest man;
  man.command = "export-attention";
  man.add_input(ckpt_path);
  man.add_input(data_dir + "/sequences.jsonl");
  man.config = {{"split", which}, {"sequence", index}};
  for (std::size_t layer = 0; layer < model.config().layers; ++layer)
    for (std::size_t head = 0; head < model.config().heads; ++head)
      man.outputs.push_back(out + "/attention_l" + std::to_string(layer) +
                            "_h" + std::to_string(head) + ".csv");
  man.outputs.push_back(out + "/session_boundaries.csv");
  man.outputs.push_back(out + "/time_lags.csv");
  man.write(out);

  std::cout << "wrote attention maps for " << model.config().layers
            << " layers x " << model.config().heads << " heads under " << out
            << "\n";
  return 0;
}

int cmd_bench(const std::string& config_path, std::size_t batch,
              std::size_t len, int reps, const std::string& out) {
  FileConfig fc = FileConfig::load(config_path);
  kt::ModelConfig mc = model_config_from(fc);
  if (mc.vocab == 0) mc.vocab = 100;
  mc.max_len = std::max(mc.max_len, len);

  // Fixed synthetic batch: one session break halfway through.
  kt::Rng rng(7);
  std::vector<kt::AugmentedSequence> seqs(batch);
  for (auto& s : seqs) {
    double t = 0;
    for (std::size_t i = 0; i < len; ++i) {
      t += i == len / 2 ? 900.0 : kt::uniform_in(rng, 1.0, 3.0);
      s.exercise.push_back(1 + static_cast<int>(i % mc.vocab));
      s.response.push_back(static_cast<int>(i % 2));
      s.ts.push_back(t);
    }
    kt::derive_sessions(s.ts, 600, s.session, s.step);
    s.source_len = static_cast<int>(len);
  }
  std::vector<const kt::AugmentedSequence*> ptrs;
  for (auto& s : seqs) ptrs.push_back(&s);
  kt::Batch b = kt::make_batch(ptrs);

  json j;
  for (auto variant : {kt::Variant::full, kt::Variant::no_forgetting}) {
    kt::ModelConfig vc = mc;
    vc.variant = variant;
    if (!vc.uses_forgetting_bias()) vc.beta = 0;
    kt::Model model(vc, 1);
    kt::LatencyStats st = kt::latency_bench(model, b, reps);
    j[kt::variant_name(variant)] = {{"mean_ms", st.mean_ms},
                                    {"p50_ms", st.p50_ms},
                                    {"p95_ms", st.p95_ms},
                                    {"reps", st.reps}};
  }
  j["full_over_no_forgetting"] =
      j["full"]["mean_ms"].get<double>() /
      j["no_forgetting"]["mean_ms"].get<double>();

  fs::create_directories(out);
  std::ofstream f(out + "/latency.json");
  f << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";

  Manifest man;
  man.command = "bench";
  if (!config_path.empty()) man.add_input(config_path);
  man.config = {{"batch", batch}, {"len", len}, {"reps", reps}};
  man.outputs = {out + "/latency.json"};
  man.write(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-tracing transformer with session features and a "
               "time-decay attention bias"};
  app.require_subcommand(1);

  std::string config_path, out, schema_path, log_path, data_dir, ckpt_path;
  std::string variant, split_name = "test";
  std::uint64_t seed = 0;
  bool seed_given = false;
  double gap_hours = 10.0;
  std::size_t max_len = 200;
  double beta = -1;
  bool multi_rate = false;
  std::vector<double> betas;
  std::size_t batch = 64, len = 200, seq_index = 0;
  int reps = 20;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "declarative JSON config file");
    cmd->add_option("--out", out, "output directory");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic log");
  add_common(synth);
  synth->add_option("--seed", seed, "generator seed")
      ->each([&](const std::string&) { seed_given = true; });

  CLI::App* derive =
      app.add_subcommand("derive", "parse, clean, sessionize, window, split");
  add_common(derive);
  derive->add_option("--log", log_path, "interaction log (CSV/TSV)")
      ->required();
  derive->add_option("--schema", schema_path, "column-mapping JSON");
  derive->add_option("--gap-hours", gap_hours, "session gap threshold");
  derive->add_option("--max-len", max_len, "window length cap");

  CLI::App* train = app.add_subcommand("train", "train one model");
  add_common(train);
  train->add_option("--data", data_dir, "feature shard directory")->required();
  train->add_option("--seed", seed, "run seed")
      ->each([&](const std::string&) { seed_given = true; });
  train->add_option("--variant", variant,
                    "full|no_session|no_forgetting|backbone");
  train->add_option("--beta", beta, "decay rate for the attention bias");
  train->add_flag("--multi-rate", multi_rate, "learnable per-head decay");
  train->add_option("--max-len", max_len, "window length cap");

  CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(evalc);
  evalc->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  evalc->add_option("--data", data_dir, "feature shard directory")->required();
  evalc->add_option("--split", split_name, "train|val|test");

  CLI::App* ablate = app.add_subcommand(
      "ablate", "train the four variants across seeds and summarize");
  add_common(ablate);
  ablate->add_option("--data", data_dir, "feature shard directory")
      ->required();

  CLI::App* sweep =
      app.add_subcommand("sweep-beta", "train the full variant across betas");
  add_common(sweep);
  sweep->add_option("--data", data_dir, "feature shard directory")->required();
  sweep->add_option("--beta", betas, "beta values (repeatable)");

  CLI::App* exporta = app.add_subcommand("export-attention",
                                         "dump attention maps for a sequence");
  add_common(exporta);
  exporta->add_option("--checkpoint", ckpt_path, "checkpoint file")
      ->required();
  exporta->add_option("--data", data_dir, "feature shard directory")
      ->required();
  exporta->add_option("--split", split_name, "train|val|test");
  exporta->add_option("--sequence", seq_index, "sequence index in the split");

  CLI::App* bench = app.add_subcommand(
      "bench", "forward-pass latency, full vs no_forgetting");
  add_common(bench);
  bench->add_option("--batch", batch, "batch size");
  bench->add_option("--len", len, "sequence length");
  bench->add_option("--reps", reps, "timed repetitions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (out.empty()) out = default_out(app.get_subcommands()[0]->get_name());
    if (synth->parsed()) return cmd_synth(config_path, out, seed, seed_given);
    if (derive->parsed())
      return cmd_derive(log_path, schema_path, gap_hours, max_len, out);
    if (train->parsed()) {
      ModelFlagOverrides over;
      over.variant = variant;
      over.beta = beta;
      over.multi_rate = multi_rate;
      if (train->count("--max-len")) over.max_len = max_len;
      return cmd_train(data_dir, config_path, seed, seed_given, over, out);
    }
    if (evalc->parsed()) return cmd_eval(ckpt_path, data_dir, split_name, out);
    if (ablate->parsed()) return cmd_ablate(data_dir, config_path, out);
    if (sweep->parsed())
      return cmd_sweep_beta(data_dir, config_path, betas, out);
    if (exporta->parsed())
      return cmd_export_attention(ckpt_path, data_dir, split_name, seq_index,
                                  out);
    if (bench->parsed())
      return cmd_bench(config_path, batch, len, reps, out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const kt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const kt::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const kt::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
