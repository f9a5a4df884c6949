#include "kt/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace kt {

using nlohmann::json;

void TrainConfig::validate() const {
  if (max_epochs <= 0) throw ConfigError("train: max_epochs must be positive");
  if (patience >= max_epochs) {
    throw ConfigError("train: patience must be below max_epochs");
  }
  if (seeds.empty()) throw ConfigError("train: need at least one seed");
  if (batch_size == 0) throw ConfigError("train: batch size must be positive");
}

std::string TrainConfig::to_json_text() const {
  json j;
  j["max_epochs"] = max_epochs;
  j["patience"] = patience;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["clip_norm"] = clip_norm;
  j["batch_size"] = batch_size;
  j["seeds"] = seeds;
  j["beta_sweep"] = beta_sweep;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j[key].get<std::decay_t<decltype(out)>>();
  };
  get("max_epochs", c.max_epochs);
  get("patience", c.patience);
  get("lr", c.lr);
  get("weight_decay", c.weight_decay);
  get("clip_norm", c.clip_norm);
  get("batch_size", c.batch_size);
  get("seeds", c.seeds);
  get("beta_sweep", c.beta_sweep);
  return c;
}

std::string RunRecord::epochs_json_lines() const {
  std::ostringstream os;
  for (const auto& e : epochs) {
    json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    if (e.val_auc)
      j["val_auc"] = *e.val_auc;
    else
      j["val_auc"] = nullptr;
    j["val_acc"] = e.val_acc;
    j["seconds"] = e.seconds;
    os << j.dump() << "\n";
  }
  return os.str();
}

namespace {

struct ParamSnapshot {
  std::vector<std::vector<real>> values;
  void capture(std::vector<NamedParam>& params) {
    values.clear();
    for (auto& p : params) values.push_back(p.tensor.vec());
  }
  void restore(std::vector<NamedParam>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].tensor.vec() = values[i];
    }
  }
};

// Batches are built once, bucketed by length so padding stays tight, and
// reused every epoch together with their bias masks.
struct PreparedBatches {
  std::vector<Batch> batches;
  std::vector<BiasMasks> masks;
};

PreparedBatches prepare_batches(const Model& model,
                                const std::vector<AugmentedSequence>& seqs,
                                std::size_t batch_size) {
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return seqs[a].size() < seqs[b].size();
                   });
  PreparedBatches out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, order.size());
    std::vector<const AugmentedSequence*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&seqs[order[i]]);
    out.batches.push_back(make_batch(chunk));
    out.masks.push_back(model.build_masks(out.batches.back()));
  }
  return out;
}

struct PooledEval {
  std::optional<double> auc_value;
  double acc = 0;
};

PooledEval eval_prepared(Model& model, const PreparedBatches& prepared) {
  NoGradGuard ng;
  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t bi = 0; bi < prepared.batches.size(); ++bi) {
    const Batch& batch = prepared.batches[bi];
    Tensor p = model.forward(batch, prepared.masks[bi], false);
    for (std::size_t i = 0; i < batch.b * batch.l; ++i) {
      if (batch.valid[i] == 0) continue;
      scores.push_back(static_cast<double>(p.data()[i]));
      labels.push_back(static_cast<int>(batch.target[i]));
    }
  }
  PooledEval ev;
  if (!scores.empty()) {
    ev.auc_value = auc(scores, labels);
    ev.acc = accuracy(scores, labels);
  }
  return ev;
}

}  // namespace

RunRecord train(Model& model, const DatasetSplit& split,
                const TrainConfig& cfg, std::uint64_t seed,
                const std::string& run_dir) {
  cfg.validate();
  if (split.train.empty()) throw DataError("train: empty training split");

  RunRecord record;
  record.seed = seed;
  if (!run_dir.empty()) std::filesystem::create_directories(run_dir);

  auto params = model.parameters();
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  adam_cfg.weight_decay = cfg.weight_decay;
  Adam opt(params, adam_cfg);

  Rng rng(seed * 0x9e3779b97f4a7c15ull + 1);  // shuffle + dropout stream

  PreparedBatches train_set = prepare_batches(model, split.train, cfg.batch_size);
  PreparedBatches val_set;
  if (!split.val.empty()) {
    val_set = prepare_batches(model, split.val, cfg.batch_size);
  }
  std::vector<std::size_t> order(train_set.batches.size());
  std::iota(order.begin(), order.end(), 0);

  ParamSnapshot best;
  best.capture(params);
  int epochs_since_best = 0;

  const std::string ckpt_path =
      run_dir.empty() ? "" : run_dir + "/best.ckpt.json";
  auto save_best = [&]() {
    if (ckpt_path.empty()) return;
    ParamSnapshot current;
    current.capture(params);
    best.restore(params);
    model.save_checkpoint(ckpt_path, seed);
    current.restore(params);
    record.checkpoint_path = ckpt_path;
  };

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    shuffle_vec(order, rng);

    double loss_sum = 0;
    std::size_t loss_steps = 0;
    for (std::size_t bi : order) {
      const Batch& batch = train_set.batches[bi];
      Tensor p = model.forward(batch, train_set.masks[bi], true, &rng);
      Tensor targets = Tensor::from_data({batch.b, batch.l, 1}, batch.target);
      Tensor mask = Tensor::from_data({batch.b, batch.l, 1}, batch.valid);
      BceResult loss = bce_loss(p, targets, mask);

      const double mean_loss = loss.mean.item();
      if (!std::isfinite(mean_loss)) {
        save_best();
        throw DivergenceError("train: non-finite loss at epoch " +
                              std::to_string(epoch));
      }
      loss_sum += loss.sum.item();
      loss_steps += loss.valid_count;

      opt.zero_grad();
      loss.mean.backward();
      clip_grad_norm(params, cfg.clip_norm);
      opt.step();
    }

    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = loss_steps ? loss_sum / static_cast<double>(loss_steps) : 0;

    bool improved;
    if (!split.val.empty()) {
      PooledEval val = eval_prepared(model, val_set);
      er.val_auc = val.auc_value;
      er.val_acc = val.acc;
      const double score = val.auc_value.value_or(val.acc);
      const double best_score =
          record.best_val_auc.value_or(-std::numeric_limits<double>::infinity());
      improved = score > best_score;
      if (improved) record.best_val_auc = score;
    } else {
      improved = true;  // no validation signal: keep the latest
    }

    if (improved) {
      record.best_epoch = epoch;
      best.capture(params);
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
    }

    const auto t1 = std::chrono::steady_clock::now();
    er.seconds = std::chrono::duration<double>(t1 - t0).count();
    record.epochs.push_back(er);

    if (epochs_since_best > cfg.patience) break;
  }

  best.restore(params);
  save_best();
  if (!run_dir.empty()) {
    std::ofstream out(run_dir + "/epochs.jsonl");
    out << record.epochs_json_lines();
  }
  if (!split.test.empty()) {
    record.test_report = evaluate(model, split.test, cfg.batch_size);
  }
  return record;
}

// ---- experiment drivers ------------------------------------------------------

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0;
  return std::accumulate(v.begin(), v.end(), 0.0) / v.size();
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  const double m = mean_of(v);
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / (v.size() - 1));
}

}  // namespace

std::vector<MatrixRow> run_matrix(const DatasetSplit& split,
                                  const ModelConfig& base_config,
                                  const TrainConfig& cfg,
                                  const std::vector<Variant>& variants,
                                  const std::string& out_dir) {
  cfg.validate();
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  std::ofstream runs_out;
  if (!out_dir.empty()) runs_out.open(out_dir + "/runs.jsonl");

  std::vector<MatrixRow> rows;
  for (Variant v : variants) {
    MatrixRow row;
    row.variant = v;
    for (std::uint64_t seed : cfg.seeds) {
      ModelConfig mc = base_config;
      mc.variant = v;
      if (!mc.uses_forgetting_bias()) mc.beta = 0;
      Model model(mc, seed);
      const std::string run_dir =
          out_dir.empty() ? ""
                          : out_dir + "/" + variant_name(v) + "_seed" +
                                std::to_string(seed);
      RunRecord rec = train(model, split, cfg, seed, run_dir);
      const double test_auc = rec.test_report.auc_value.value_or(0.5);
      row.test_aucs.push_back(test_auc);
      if (runs_out) {
        json j;
        j["variant"] = variant_name(v);
        j["seed"] = seed;
        j["best_epoch"] = rec.best_epoch;
        j["epochs_run"] = rec.epochs.size();
        if (rec.best_val_auc) j["best_val_auc"] = *rec.best_val_auc;
        j["test_auc"] = test_auc;
        j["test_acc"] = rec.test_report.acc;
        runs_out << j.dump() << "\n";
        runs_out.flush();
      }
    }
    row.mean_auc = mean_of(row.test_aucs);
    row.std_auc = std_of(row.test_aucs);
    rows.push_back(row);
  }

  if (!out_dir.empty()) {
    std::ofstream csv(out_dir + "/results.csv");
    csv << "variant,mean_auc,std_auc,seeds\n";
    for (const auto& r : rows) {
      csv << variant_name(r.variant) << "," << r.mean_auc << "," << r.std_auc
          << "," << r.test_aucs.size() << "\n";
    }
  }
  return rows;
}

std::vector<SweepPoint> beta_sweep(const DatasetSplit& split,
                                   const ModelConfig& base_config,
                                   const TrainConfig& cfg,
                                   const std::string& out_dir) {
  cfg.validate();
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  std::vector<SweepPoint> points;
  for (real beta : cfg.beta_sweep) {
    SweepPoint pt;
    pt.beta = beta;
    for (std::uint64_t seed : cfg.seeds) {
      ModelConfig mc = base_config;
      mc.variant = Variant::full;
      mc.beta = beta;
      Model model(mc, seed);
      RunRecord rec = train(model, split, cfg, seed, "");
      pt.test_aucs.push_back(rec.test_report.auc_value.value_or(0.5));
    }
    pt.mean_auc = mean_of(pt.test_aucs);
    points.push_back(pt);
  }

  if (!out_dir.empty()) {
    std::ofstream csv(out_dir + "/beta_curve.csv");
    csv << "beta,mean_auc,seeds\n";
    for (const auto& p : points) {
      csv << p.beta << "," << p.mean_auc << "," << p.test_aucs.size() << "\n";
    }
  }
  return points;
}

}  // namespace kt
