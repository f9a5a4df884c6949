#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kt/features.hpp"
#include "kt/optim.hpp"
#include "kt/tensor.hpp"

namespace kt {

enum class Variant { full, no_session, no_forgetting, backbone };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct ModelConfig {
  std::size_t d = 128;             // model width
  std::size_t layers = 2;          // encoder blocks
  std::size_t heads = 8;
  std::size_t d_ff = 0;            // FFN hidden width, 0 -> 4d
  std::size_t vocab = 0;           // |Q|; embedding table has vocab+1 rows
  std::size_t session_vocab = 512; // L_S, session ids wrap modulo this
  std::size_t max_len = 200;       // window length cap
  real beta = static_cast<real>(0.1);
  bool multi_rate = false;         // learnable per-head decay rates
  real dropout_p = static_cast<real>(0.4);
  Variant variant = Variant::full;
  bool post_ln = false;            // pure post-LN block ordering

  std::size_t ffn_width() const { return d_ff ? d_ff : 4 * d; }
  std::size_t head_dim() const { return d / heads; }
  bool uses_session_embedding() const {
    return variant == Variant::full || variant == Variant::no_forgetting;
  }
  bool uses_forgetting_bias() const {
    return variant == Variant::full || variant == Variant::no_session;
  }
  void validate() const;

  std::string to_json_text() const;
  static ModelConfig from_json_text(const std::string& text);
  static ModelConfig from_json_file(const std::string& path);
};

// Even dims sin(tau / 10000^{2k/d}), odd dims cos of the same argument.
// Closed form, so any step index extrapolates.
std::vector<real> sinusoidal_pe(long tau, std::size_t d);

// Per-batch additive logit biases. Causality and key padding always live in
// `shared`; the time-decay term joins `shared` for a global beta and stays
// separate (per-head scaled in-graph) for the multi-rate variant.
struct BiasMasks {
  Tensor shared;       // [B,L,L], constant
  Tensor neg_log_lag;  // [B,L,L], constant: -ln(dt'+1) on the valid lower triangle
  bool per_head = false;
};

// Attention weights recorded during a forward pass:
// weights[layer][head] is a row-major B*L*L buffer.
struct AttnCapture {
  std::size_t b = 0, l = 0;
  std::vector<std::vector<std::vector<real>>> weights;
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }

  // Stable-ordered learnable parameters (feeds the optimizer and checkpoints).
  std::vector<NamedParam> parameters();

  BiasMasks build_masks(const Batch& batch) const;

  // Summed input representation X0 (content + session/position terms),
  // before the encoder stack. Dropout applies only in training mode.
  Tensor input_embedding(const Batch& batch, bool training = false,
                         Rng* dropout_rng = nullptr);

  // Probabilities [B, L, 1]. `training` enables dropout (rng required then).
  Tensor forward(const Batch& batch, const BiasMasks& masks, bool training,
                 Rng* dropout_rng = nullptr, AttnCapture* capture = nullptr);
  Tensor forward(const Batch& batch, bool training, Rng* dropout_rng = nullptr,
                 AttnCapture* capture = nullptr);

  void save_checkpoint(const std::string& path, std::uint64_t seed) const;
  static Model load_checkpoint(const std::string& path,
                               std::uint64_t* seed_out = nullptr);

 private:
  struct Layer {
    Tensor w_q, w_k, w_v, w_o;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  };

  ModelConfig cfg_;
  Tensor e_q_;          // [vocab+1, d], row 0 = padding
  Tensor e_a_;          // [3, d]: wrong, right, <START>
  Tensor e_s_;          // [L_S, d] when the variant uses session embeddings
  Tensor e_pos_;        // [max_len, d] absolute positions otherwise
  Tensor w_time_;       // [d], backbone raw-lag input channel
  std::vector<Layer> layers_;
  Tensor final_ln_gain_, final_ln_bias_;
  Tensor mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
  Tensor beta_heads_;   // [heads] when multi_rate
};

}  // namespace kt
