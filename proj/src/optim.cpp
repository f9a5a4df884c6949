#include "kt/optim.hpp"

#include <cmath>

namespace kt {

Adam::Adam(std::vector<NamedParam> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), real{0});
    v_.emplace_back(p.tensor.numel(), real{0});
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step() {
  ++step_;
  const real bc1 = real{1} - std::pow(cfg_.beta1, static_cast<real>(step_));
  const real bc2 = real{1} - std::pow(cfg_.beta2, static_cast<real>(step_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& t = params_[pi].tensor;
    const std::size_t n = t.numel();
    real* w = t.data();
    real* g = t.grad();
    real* m = m_[pi].data();
    real* v = v_[pi].data();
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(g[i])) {
        throw DivergenceError("adam: non-finite gradient in parameter '" +
                              params_[pi].name + "' at index " +
                              std::to_string(i));
      }
      m[i] = cfg_.beta1 * m[i] + (real{1} - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (real{1} - cfg_.beta2) * g[i] * g[i];
      const real mhat = m[i] / bc1;
      const real vhat = v[i] / bc2;
      w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                         cfg_.weight_decay * w[i]);
    }
  }
}

real clip_grad_norm(std::vector<NamedParam>& params, real max_norm) {
  real sq = 0;
  for (auto& p : params) {
    const real* g = p.tensor.grad();
    for (std::size_t i = 0; i < p.tensor.numel(); ++i) sq += g[i] * g[i];
  }
  const real norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const real s = max_norm / norm;
    for (auto& p : params) {
      real* g = p.tensor.grad();
      for (std::size_t i = 0; i < p.tensor.numel(); ++i) g[i] *= s;
    }
  }
  return norm;
}

}  // namespace kt
