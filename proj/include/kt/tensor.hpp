#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kt/common.hpp"

namespace kt {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// One node of the recorded computation. `parents` + `backward` form the
// reverse-mode tape; both are released after Tensor::backward() runs.
struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // allocated on demand, always data.size() long
  bool requires_grad{false};

  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), real{0});
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<real> values,
                          bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t numel() const { return impl_->numel(); }

  real* data() { return impl_->data.data(); }
  const real* data() const { return impl_->data.data(); }
  std::vector<real>& vec() { return impl_->data; }
  const std::vector<real>& vec() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  real* grad() {
    impl_->ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<real>& grad_vec() const { return impl_->grad; }
  void zero_grad() {
    impl_->grad.assign(impl_->data.size(), real{0});
  }

  // Scalar access for 1-element tensors.
  real item() const;

  // Row-major multi-index access (tests and small fixtures).
  real at(std::initializer_list<std::size_t> idx) const;

  // Reverse sweep from a scalar: seeds d(self)/d(self)=1, visits every
  // recorded node exactly once in reverse topological order, then frees the
  // tape. Gradients accumulate into each requires_grad leaf.
  void backward();

  std::shared_ptr<TensorImpl>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  bool all_finite() const;

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_op_result(Shape shape, std::vector<const Tensor*> parents);
};

// ---- grad mode ----------------------------------------------------------

bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- ops ----------------------------------------------------------------
//
// Shapes follow a [prefix..., rows, cols] convention: matmul contracts the
// last two dims and treats any leading dims as a batch. A 2-d right operand
// broadcasts across the batch (the usual X·W case).

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
// x[..., d] + bias[d]
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, real c);
// x * s where s is a learnable 1-element tensor (gradient flows to s).
Tensor scale_by(const Tensor& x, const Tensor& s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
// Inverted dropout; identity (same impl, no copy) when !training.
Tensor dropout(const Tensor& x, real p, Rng& rng, bool training);
// Numerically stable softmax over the last dim. Entries at or below the mask
// sentinel come out exactly 0; a fully masked row becomes all-zeros and is
// counted in *fully_masked_rows when provided.
Tensor softmax_lastdim(const Tensor& x, long* fully_masked_rows = nullptr);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 real eps = static_cast<real>(1e-5));
// table[v, d] gathered by ids (length = numel(prefix)) -> [prefix..., d]
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        Shape prefix);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(const Tensor& x, std::size_t offset, std::size_t len);
// out[pos, :] = coef[pos] * w[:], prefix = shape of coef -> [prefix..., d]
Tensor rows_outer(const std::vector<real>& coef, const Tensor& w, Shape prefix);

// Fused causal multi-head self-attention. q/k/v are [B,L,d]; the op splits
// them into `heads` slices of d/heads, computes
// softmax(q_h k_h^T / sqrt(d/h) + bias_h) v_h over the causal lower triangle
// only, and concatenates the heads back to [B,L,d]. head_bias holds either a
// single [B,L,L] tensor shared by all heads or one per head; bias entries at
// or below the mask sentinel are masked exactly as in softmax_lastdim.
// Results are identical to the op-by-op composition; this form exists so the
// hot loop allocates one attention buffer instead of one tensor per step.
// When `record` is non-null it receives a per-head copy of the attention
// weights (B*L*L each). fully_masked_rows counts all-masked query rows.
Tensor causal_mhsa(const Tensor& q, const Tensor& k, const Tensor& v,
                   const std::vector<Tensor>& head_bias, std::size_t heads,
                   std::vector<std::vector<real>>* record = nullptr,
                   long* fully_masked_rows = nullptr);

struct BceResult {
  Tensor sum;       // scalar
  Tensor mean;      // scalar, sum / valid_count
  std::size_t valid_count{0};
};
// -sum over masked steps of [t log p + (1-t) log(1-p)], p clamped to
// [1e-7, 1-1e-7]. Throws DataError when the mask selects nothing.
BceResult bce_loss(const Tensor& p, const Tensor& targets, const Tensor& mask);

// ---- init ---------------------------------------------------------------

// Normal(0, std) redrawn outside ±2 std.
void fill_trunc_normal(Tensor& t, real std_dev, Rng& rng);

}  // namespace kt
