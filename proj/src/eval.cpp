#include "kt/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace kt {

using nlohmann::json;

std::optional<double> auc(const std::vector<double>& scores,
                          const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw ConfigError("auc: scores and labels differ in length");
  }
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });

  // Midranks over tie groups, 1-based.
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j + 1);
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }

  double rank_sum_pos = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (labels[k]) rank_sum_pos += rank[k];
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                      static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double accuracy(const std::vector<double>& scores,
                const std::vector<int>& labels, double threshold) {
  if (scores.empty() || scores.size() != labels.size()) {
    throw DataError("accuracy: empty or mismatched input");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int pred = scores[i] >= threshold ? 1 : 0;
    if (pred == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

// ---- predictions -----------------------------------------------------------

Predictions collect_predictions(Model& model,
                                const std::vector<AugmentedSequence>& seqs,
                                std::size_t batch_size) {
  Predictions out;
  NoGradGuard ng;
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, seqs.size());
    std::vector<const AugmentedSequence*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&seqs[i]);
    Batch batch = make_batch(chunk);
    Tensor p = model.forward(batch, false);
    for (std::size_t s = 0; s < batch.b; ++s) {
      for (std::size_t t = 0; t < batch.l; ++t) {
        const std::size_t at = batch.idx(s, t);
        if (batch.valid[at] == 0) continue;
        out.scores.push_back(static_cast<double>(p.data()[at]));
        out.labels.push_back(static_cast<int>(batch.target[at]));
        out.source_len.push_back(batch.source_len[s]);
      }
    }
  }
  return out;
}

// ---- length buckets ------------------------------------------------------------

std::string LengthBucket::label() const {
  std::ostringstream os;
  if (hi < 0)
    os << ">=" << lo;
  else
    os << "[" << lo << "," << hi << ")";
  return os.str();
}

std::vector<LengthBucket> length_bucket_auc(
    const Predictions& preds, const std::vector<int>& boundaries) {
  std::vector<LengthBucket> buckets;
  int lo = 0;
  for (int b : boundaries) {
    buckets.push_back({lo, b});
    lo = b;
  }
  buckets.push_back({lo, -1});

  std::vector<std::vector<double>> sc(buckets.size());
  std::vector<std::vector<int>> lb(buckets.size());
  for (std::size_t i = 0; i < preds.scores.size(); ++i) {
    const int len = preds.source_len[i];
    std::size_t k = buckets.size() - 1;
    for (std::size_t bi = 0; bi < buckets.size(); ++bi) {
      if (buckets[bi].hi >= 0 && len < buckets[bi].hi && len >= buckets[bi].lo) {
        k = bi;
        break;
      }
    }
    sc[k].push_back(preds.scores[i]);
    lb[k].push_back(preds.labels[i]);
  }
  for (std::size_t bi = 0; bi < buckets.size(); ++bi) {
    buckets[bi].count = sc[bi].size();
    if (!sc[bi].empty()) buckets[bi].auc_value = auc(sc[bi], lb[bi]);
  }
  return buckets;
}

// ---- accounting ------------------------------------------------------------------

ParamCount count_params(const ModelConfig& cfg) {
  ParamCount c;
  const std::size_t d = cfg.d;
  const std::size_t f = cfg.ffn_width();
  c.exercise_embedding = (cfg.vocab + 1) * d;
  c.answer_embedding = 3 * d;
  if (cfg.uses_session_embedding()) {
    c.session_embedding = cfg.session_vocab * d;
  } else {
    c.positional_embedding = cfg.max_len * d;
  }
  if (cfg.variant == Variant::backbone) c.time_channel = d;
  c.attention = cfg.layers * 4 * d * d;
  c.ffn = cfg.layers * (d * f + f + f * d + d);
  c.layernorm = cfg.layers * 4 * d + 2 * d;  // two pairs per block + final
  c.prediction_head = d * (d / 2) + d / 2 + (d / 2) + 1;
  c.forgetting = (cfg.multi_rate && cfg.uses_forgetting_bias()) ? cfg.heads : 0;
  c.total = c.exercise_embedding + c.answer_embedding + c.session_embedding +
            c.positional_embedding + c.time_channel + c.attention + c.ffn +
            c.layernorm + c.prediction_head + c.forgetting;
  return c;
}

std::size_t actual_param_count(Model& model) {
  std::size_t n = 0;
  for (auto& p : model.parameters()) n += p.tensor.numel();
  return n;
}

// ---- flops -----------------------------------------------------------------------

FlopsEstimate flops_estimate(const ModelConfig& cfg, std::size_t seq_len,
                             std::size_t batch) {
  FlopsEstimate e;
  const double b = static_cast<double>(batch);
  const double l = static_cast<double>(seq_len);
  const double d = static_cast<double>(cfg.d);
  const double f = static_cast<double>(cfg.ffn_width());
  const double h = static_cast<double>(cfg.heads);
  const double layers = static_cast<double>(cfg.layers);
  const double dk = d / h;

  e.projections = layers * 4 * 2 * b * l * d * d;
  e.attention = layers * 2 * (2 * b * h * l * l * dk);  // scores + weighted sum
  e.ffn = layers * 2 * 2 * b * l * d * f;
  e.bias_adds = layers * h * b * l * l;
  e.prediction_head = 2 * b * l * (d * (d / 2) + (d / 2));
  e.total = e.projections + e.attention + e.ffn + e.bias_adds +
            e.prediction_head;
  return e;
}

// ---- latency ----------------------------------------------------------------------

LatencyStats latency_bench(Model& model, const Batch& batch, int reps,
                           int warmup) {
  if (reps < 1) throw ConfigError("latency_bench: reps must be >= 1");
  NoGradGuard ng;
  const BiasMasks masks = model.build_masks(batch);
  for (int i = 0; i < warmup; ++i) (void)model.forward(batch, masks, false);

  std::vector<double> samples;
  samples.reserve(reps);
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)model.forward(batch, masks, false);
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  LatencyStats st;
  st.reps = reps;
  st.mean_ms = std::accumulate(samples.begin(), samples.end(), 0.0) / reps;
  st.p50_ms = sorted[(sorted.size() - 1) / 2];
  st.p95_ms = sorted[static_cast<std::size_t>(
      std::min<double>(sorted.size() - 1, std::ceil(0.95 * sorted.size()) - 1))];
  return st;
}

// ---- report ------------------------------------------------------------------------

std::string EvalReport::to_json_text() const {
  json j;
  if (auc_value)
    j["auc"] = *auc_value;
  else
    j["auc"] = nullptr;
  j["acc"] = acc;
  j["n_predictions"] = n_predictions;
  json buck = json::array();
  for (const auto& b : buckets) {
    json e;
    e["bucket"] = b.label();
    e["count"] = b.count;
    if (b.auc_value)
      e["auc"] = *b.auc_value;
    else
      e["auc"] = nullptr;
    buck.push_back(e);
  }
  j["length_buckets"] = buck;
  return j.dump(2);
}

EvalReport evaluate(Model& model, const std::vector<AugmentedSequence>& seqs,
                    std::size_t batch_size) {
  Predictions preds = collect_predictions(model, seqs, batch_size);
  EvalReport rep;
  rep.n_predictions = preds.scores.size();
  if (!preds.scores.empty()) {
    rep.auc_value = auc(preds.scores, preds.labels);
    rep.acc = accuracy(preds.scores, preds.labels);
    rep.buckets = length_bucket_auc(preds);
  }
  return rep;
}

// ---- attention export ------------------------------------------------------------------

void export_attention(Model& model, const AugmentedSequence& seq,
                      const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  Batch batch = make_batch({&seq});
  NoGradGuard ng;
  AttnCapture capture;
  (void)model.forward(batch, false, nullptr, &capture);

  const std::size_t l = batch.l;
  for (std::size_t layer = 0; layer < capture.weights.size(); ++layer) {
    for (std::size_t head = 0; head < capture.weights[layer].size(); ++head) {
      std::ostringstream name;
      name << out_dir << "/attention_l" << layer << "_h" << head << ".csv";
      std::ofstream out(name.str());
      if (!out) throw DataError("export_attention: cannot write " + name.str());
      out.precision(17);
      out << "layer,head,query,key,weight\n";
      const auto& w = capture.weights[layer][head];
      for (std::size_t q = 0; q < l; ++q) {
        for (std::size_t k = 0; k < l; ++k) {
          out << layer << "," << head << "," << q << "," << k << ","
              << w[q * l + k] << "\n";
        }
      }
    }
  }

  {
    std::ofstream out(out_dir + "/session_boundaries.csv");
    out << "position,session,step,new_session\n";
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const bool boundary = t == 0 || seq.session[t] != seq.session[t - 1];
      out << t << "," << seq.session[t] << "," << seq.step[t] << ","
          << (boundary ? 1 : 0) << "\n";
    }
  }
  {
    LagMatrix lags = time_lag_matrix(seq.ts);
    std::ofstream out(out_dir + "/time_lags.csv");
    out << "query,key,lag_minutes,lag_normalized\n";
    for (std::size_t t = 0; t < lags.len; ++t) {
      for (std::size_t j = 0; j <= t; ++j) {
        out << t << "," << j << "," << lags.dt[t * lags.len + j] << ","
            << lags.norm(t, j) << "\n";
      }
    }
  }
}

double pre_gap_attention_mass(const AttnCapture& capture,
                              std::size_t valid_len, std::size_t gap_pos) {
  if (gap_pos == 0 || gap_pos >= valid_len) {
    throw ConfigError("pre_gap_attention_mass: gap_pos out of range");
  }
  const std::size_t l = capture.l;
  double sum = 0;
  std::size_t count = 0;
  for (const auto& layer : capture.weights) {
    for (const auto& head : layer) {
      for (std::size_t q = gap_pos; q < valid_len; ++q) {
        double mass = 0;
        for (std::size_t k = 0; k < gap_pos; ++k) mass += head[q * l + k];
        sum += mass;
        ++count;
      }
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace kt
