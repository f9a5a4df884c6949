#include "kt/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace kt {

using nlohmann::json;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_session: return "no_session";
    case Variant::no_forgetting: return "no_forgetting";
    case Variant::backbone: return "backbone";
  }
  throw ConfigError("variant_name: bad enum value");
}

Variant variant_from_name(const std::string& name) {
  if (name == "full") return Variant::full;
  if (name == "no_session") return Variant::no_session;
  if (name == "no_forgetting") return Variant::no_forgetting;
  if (name == "backbone") return Variant::backbone;
  throw ConfigError("unknown variant '" + name +
                    "' (expected full|no_session|no_forgetting|backbone)");
}

void ModelConfig::validate() const {
  if (d == 0 || layers == 0 || heads == 0 || max_len == 0 ||
      session_vocab == 0) {
    throw ConfigError("model config: sizes must be positive");
  }
  if (d % heads != 0) {
    throw ConfigError("model config: d=" + std::to_string(d) +
                      " not divisible by heads=" + std::to_string(heads));
  }
  if (vocab == 0) throw ConfigError("model config: vocab size not set");
  if (beta < 0) throw ConfigError("model config: beta must be >= 0");
  if (dropout_p < 0 || dropout_p >= 1) {
    throw ConfigError("model config: dropout must be in [0,1)");
  }
}

std::string ModelConfig::to_json_text() const {
  json j;
  j["d"] = d;
  j["layers"] = layers;
  j["heads"] = heads;
  j["d_ff"] = d_ff;
  j["vocab"] = vocab;
  j["session_vocab"] = session_vocab;
  j["max_len"] = max_len;
  j["beta"] = beta;
  j["multi_rate"] = multi_rate;
  j["dropout"] = dropout_p;
  j["variant"] = variant_name(variant);
  j["post_ln"] = post_ln;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j[key].get<std::decay_t<decltype(out)>>();
  };
  get("d", c.d);
  get("layers", c.layers);
  get("heads", c.heads);
  get("d_ff", c.d_ff);
  get("vocab", c.vocab);
  get("session_vocab", c.session_vocab);
  get("max_len", c.max_len);
  get("beta", c.beta);
  get("multi_rate", c.multi_rate);
  get("dropout", c.dropout_p);
  get("post_ln", c.post_ln);
  if (j.contains("variant"))
    c.variant = variant_from_name(j["variant"].get<std::string>());
  return c;
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("model config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::vector<real> sinusoidal_pe(long tau, std::size_t d) {
  std::vector<real> pe(d);
  for (std::size_t k = 0; 2 * k < d; ++k) {
    const double freq =
        std::pow(10000.0, -(2.0 * static_cast<double>(k)) /
                              static_cast<double>(d));
    const double arg = static_cast<double>(tau) * freq;
    pe[2 * k] = static_cast<real>(std::sin(arg));
    if (2 * k + 1 < d) pe[2 * k + 1] = static_cast<real>(std::cos(arg));
  }
  return pe;
}

// ---- construction ----------------------------------------------------------

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(init_seed);
  const real init_std = static_cast<real>(0.02);
  const std::size_t d = cfg_.d;

  auto weight = [&](Shape shape) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    fill_trunc_normal(t, init_std, rng);
    return t;
  };
  auto zeros = [&](Shape shape) { return Tensor::zeros(std::move(shape), true); };

  e_q_ = weight({cfg_.vocab + 1, d});
  e_a_ = weight({3, d});
  if (cfg_.uses_session_embedding()) {
    e_s_ = weight({cfg_.session_vocab, d});
  } else {
    e_pos_ = weight({cfg_.max_len, d});
  }
  if (cfg_.variant == Variant::backbone) w_time_ = weight({d});

  layers_.resize(cfg_.layers);
  for (auto& l : layers_) {
    l.w_q = weight({d, d});
    l.w_k = weight({d, d});
    l.w_v = weight({d, d});
    l.w_o = weight({d, d});
    l.ffn_w1 = weight({d, cfg_.ffn_width()});
    l.ffn_b1 = zeros({cfg_.ffn_width()});
    l.ffn_w2 = weight({cfg_.ffn_width(), d});
    l.ffn_b2 = zeros({d});
    l.ln1_gain = Tensor::full({d}, 1, true);
    l.ln1_bias = zeros({d});
    l.ln2_gain = Tensor::full({d}, 1, true);
    l.ln2_bias = zeros({d});
  }
  final_ln_gain_ = Tensor::full({d}, 1, true);
  final_ln_bias_ = zeros({d});
  mlp_w1_ = weight({d, d / 2});
  mlp_b1_ = zeros({d / 2});
  mlp_w2_ = weight({d / 2, 1});
  mlp_b2_ = zeros({1});

  if (cfg_.multi_rate && cfg_.uses_forgetting_bias()) {
    // Geometric ladder of decay rates, capped near 0.4.
    beta_heads_ = Tensor::zeros({cfg_.heads}, true);
    real b = static_cast<real>(0.0125);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      beta_heads_.data()[h] = std::min(b, static_cast<real>(0.4));
      b *= 2;
    }
  }
}

std::vector<NamedParam> Model::parameters() {
  std::vector<NamedParam> out;
  out.push_back({"e_q", e_q_});
  out.push_back({"e_a", e_a_});
  if (e_s_.defined()) out.push_back({"e_s", e_s_});
  if (e_pos_.defined()) out.push_back({"e_pos", e_pos_});
  if (w_time_.defined()) out.push_back({"w_time", w_time_});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    Layer& l = layers_[i];
    out.push_back({p + "w_q", l.w_q});
    out.push_back({p + "w_k", l.w_k});
    out.push_back({p + "w_v", l.w_v});
    out.push_back({p + "w_o", l.w_o});
    out.push_back({p + "ffn_w1", l.ffn_w1});
    out.push_back({p + "ffn_b1", l.ffn_b1});
    out.push_back({p + "ffn_w2", l.ffn_w2});
    out.push_back({p + "ffn_b2", l.ffn_b2});
    out.push_back({p + "ln1_gain", l.ln1_gain});
    out.push_back({p + "ln1_bias", l.ln1_bias});
    out.push_back({p + "ln2_gain", l.ln2_gain});
    out.push_back({p + "ln2_bias", l.ln2_bias});
  }
  out.push_back({"final_ln_gain", final_ln_gain_});
  out.push_back({"final_ln_bias", final_ln_bias_});
  out.push_back({"mlp_w1", mlp_w1_});
  out.push_back({"mlp_b1", mlp_b1_});
  out.push_back({"mlp_w2", mlp_w2_});
  out.push_back({"mlp_b2", mlp_b2_});
  if (beta_heads_.defined()) out.push_back({"beta_heads", beta_heads_});
  return out;
}

// ---- masks ---------------------------------------------------------------

BiasMasks Model::build_masks(const Batch& batch) const {
  const std::size_t b = batch.b;
  const std::size_t l = batch.l;
  BiasMasks masks;
  masks.per_head = cfg_.multi_rate && cfg_.uses_forgetting_bias();
  masks.shared = Tensor::zeros({b, l, l});
  if (masks.per_head) masks.neg_log_lag = Tensor::zeros({b, l, l});

  const real beta =
      cfg_.uses_forgetting_bias() && !masks.per_head ? cfg_.beta : real{0};

  real* shared = masks.shared.data();
  real* lag_out = masks.per_head ? masks.neg_log_lag.data() : nullptr;
  for (std::size_t s = 0; s < b; ++s) {
    // Per-window normalizer from this sequence's own span.
    std::vector<double> ts(batch.ts.begin() + s * l,
                           batch.ts.begin() + (s + 1) * l);
    const double dt_max = std::max(ts[l - 1] - ts[0], 1.0);
    real* mrow = shared + s * l * l;
    real* lrow = lag_out ? lag_out + s * l * l : nullptr;
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t j = 0; j < l; ++j) {
        const std::size_t at = t * l + j;
        if (j > t) {
          mrow[at] = kMaskValue;  // causal
          continue;
        }
        if (batch.valid[s * l + j] == 0) {
          mrow[at] = kMaskValue;  // padded key
          continue;
        }
        const double lag = ts[t] - ts[j];
        if (lag < 0) throw DataError("build_masks: negative time lag");
        const double nl = std::log(lag / dt_max + 1.0);
        if (beta != 0) mrow[at] = static_cast<real>(-beta * nl);
        if (lrow) lrow[at] = static_cast<real>(-nl);
      }
    }
  }
  return masks;
}

// ---- forward ---------------------------------------------------------------

Tensor Model::input_embedding(const Batch& batch, bool training, Rng* rng) {
  const std::size_t b = batch.b;
  const std::size_t l = batch.l;
  const std::size_t d = cfg_.d;
  const Shape prefix{b, l};

  Tensor x = add(embedding_lookup(e_q_, batch.exercise, prefix),
                 embedding_lookup(e_a_, batch.prev_answer, prefix));

  if (cfg_.uses_session_embedding()) {
    std::vector<int> sess(batch.session.size());
    for (std::size_t i = 0; i < sess.size(); ++i) {
      sess[i] = batch.session[i] % static_cast<int>(cfg_.session_vocab);
    }
    x = add(x, embedding_lookup(e_s_, sess, prefix));

    Tensor pe = Tensor::zeros({b, l, d});
    for (std::size_t i = 0; i < b * l; ++i) {
      const auto v = sinusoidal_pe(batch.step[i], d);
      std::copy(v.begin(), v.end(), pe.data() + i * d);
    }
    x = add(x, pe);
  } else {
    std::vector<int> pos(b * l);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t t = 0; t < l; ++t) pos[s * l + t] = static_cast<int>(t);
    x = add(x, embedding_lookup(e_pos_, pos, prefix));
  }

  if (cfg_.variant == Variant::backbone) {
    // Raw temporal channel: ln(dt'_{t,t-1} + 1) scaled into the embedding.
    std::vector<real> coef(b * l, 0);
    for (std::size_t s = 0; s < b; ++s) {
      const double first = batch.ts[s * l];
      const double last = batch.ts[(s + 1) * l - 1];
      const double dt_max = std::max(last - first, 1.0);
      for (std::size_t t = 1; t < l; ++t) {
        const double lag = batch.ts[s * l + t] - batch.ts[s * l + t - 1];
        coef[s * l + t] = static_cast<real>(std::log(lag / dt_max + 1.0));
      }
    }
    x = add(x, rows_outer(coef, w_time_, prefix));
  }

  if (training) x = dropout(x, cfg_.dropout_p, *rng, true);
  return x;
}

Tensor Model::forward(const Batch& batch, const BiasMasks& masks,
                      bool training, Rng* dropout_rng, AttnCapture* capture) {
  if (training && dropout_rng == nullptr) {
    throw ConfigError("forward: training mode needs a dropout rng");
  }
  const std::size_t heads = cfg_.heads;

  if (capture) {
    capture->b = batch.b;
    capture->l = batch.l;
    capture->weights.assign(cfg_.layers, {});
  }

  // Bias tensors are shared across layers; the multi-rate variant scales the
  // lag term per head inside the graph so the decay rates stay trainable.
  std::vector<Tensor> head_bias;
  if (masks.per_head) {
    head_bias.resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor beta_h = slice_lastdim(beta_heads_, h, 1);
      head_bias[h] = add(scale_by(masks.neg_log_lag, beta_h), masks.shared);
    }
  } else {
    head_bias.push_back(masks.shared);
  }

  Tensor x = input_embedding(batch, training, dropout_rng);
  for (std::size_t li = 0; li < cfg_.layers; ++li) {
    Layer& lay = layers_[li];
    const Tensor x_in = x;
    Tensor xn = cfg_.post_ln ? x : layernorm(x, lay.ln1_gain, lay.ln1_bias);
    Tensor q = matmul(xn, lay.w_q);
    Tensor k = matmul(xn, lay.w_k);
    Tensor v = matmul(xn, lay.w_v);

    Tensor attn = causal_mhsa(q, k, v, head_bias, heads,
                              capture ? &capture->weights[li] : nullptr);
    Tensor ctx = matmul(attn, lay.w_o);
    if (training) ctx = dropout(ctx, cfg_.dropout_p, *dropout_rng, true);
    Tensor res = add(x_in, ctx);
    if (cfg_.post_ln) res = layernorm(res, lay.ln1_gain, lay.ln1_bias);

    Tensor f = relu(add_bias(matmul(res, lay.ffn_w1), lay.ffn_b1));
    f = add_bias(matmul(f, lay.ffn_w2), lay.ffn_b2);
    if (training) f = dropout(f, cfg_.dropout_p, *dropout_rng, true);
    x = layernorm(add(res, f), lay.ln2_gain, lay.ln2_bias);
  }

  Tensor xf = layernorm(x, final_ln_gain_, final_ln_bias_);
  Tensor h1 = relu(add_bias(matmul(xf, mlp_w1_), mlp_b1_));
  Tensor logits = add_bias(matmul(h1, mlp_w2_), mlp_b2_);
  return sigmoid(logits);  // [B, L, 1]
}

Tensor Model::forward(const Batch& batch, bool training, Rng* dropout_rng,
                      AttnCapture* capture) {
  return forward(batch, build_masks(batch), training, dropout_rng, capture);
}

// ---- checkpoints -------------------------------------------------------------

void Model::save_checkpoint(const std::string& path,
                            std::uint64_t seed) const {
  json j;
  j["format"] = "ktnet-checkpoint-v1";
  j["seed"] = seed;
  j["config"] = json::parse(cfg_.to_json_text());
  json params = json::object();
  for (auto& p : const_cast<Model*>(this)->parameters()) {
    params[p.name] = {{"shape", p.tensor.shape()},
                      {"data", p.tensor.vec()}};
  }
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw DataError("save_checkpoint: cannot write " + path);
  out << j.dump() << "\n";
}

Model Model::load_checkpoint(const std::string& path,
                             std::uint64_t* seed_out) {
  std::ifstream in(path);
  if (!in) throw DataError("load_checkpoint: cannot open " + path);
  json j = json::parse(in);
  if (!j.contains("format") ||
      j["format"].get<std::string>() != "ktnet-checkpoint-v1") {
    throw DataError("load_checkpoint: unrecognized format in " + path);
  }
  ModelConfig cfg = ModelConfig::from_json_text(j["config"].dump());
  const std::uint64_t seed = j.value("seed", std::uint64_t{0});
  if (seed_out) *seed_out = seed;
  Model model(cfg, seed);
  for (auto& p : model.parameters()) {
    if (!j["params"].contains(p.name)) {
      throw DataError("load_checkpoint: missing parameter '" + p.name + "'");
    }
    const auto& entry = j["params"][p.name];
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != p.tensor.shape()) {
      throw DataError("load_checkpoint: shape mismatch for '" + p.name + "'");
    }
    p.tensor.vec() = entry.at("data").get<std::vector<real>>();
  }
  return model;
}

}  // namespace kt
