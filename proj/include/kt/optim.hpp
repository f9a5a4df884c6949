#pragma once

#include <string>
#include <vector>

#include "kt/tensor.hpp"

namespace kt {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct AdamConfig {
  real lr = static_cast<real>(1e-3);
  real beta1 = static_cast<real>(0.9);
  real beta2 = static_cast<real>(0.999);
  real eps = static_cast<real>(1e-8);
  real weight_decay = static_cast<real>(1e-5);  // decoupled
};

// Bias-corrected Adam with decoupled weight decay. Moment buffers mirror each
// parameter's shape; the step counter advances by 1 per update.
class Adam {
 public:
  Adam(std::vector<NamedParam> params, AdamConfig cfg);

  // Applies one update from the gradients currently stored on the
  // parameters. Throws DivergenceError when a gradient is NaN/Inf, naming
  // the offending parameter.
  void step();
  void zero_grad();

  long step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<NamedParam>& params() { return params_; }

 private:
  std::vector<NamedParam> params_;
  AdamConfig cfg_;
  std::vector<std::vector<real>> m_;
  std::vector<std::vector<real>> v_;
  long step_ = 0;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
real clip_grad_norm(std::vector<NamedParam>& params, real max_norm);

}  // namespace kt
