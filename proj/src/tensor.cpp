#include "kt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "kt/kernels.hpp"

namespace kt {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace {
bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(shape_numel(impl->shape), real{0});
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl()->data.begin(), t.impl()->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<real> values,
                         bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ConfigError("from_data: " + shape_str(shape) + " does not hold " +
                      std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

real Tensor::item() const {
  if (numel() != 1) {
    throw ConfigError("item(): tensor has " + std::to_string(numel()) +
                      " elements");
  }
  return impl_->data[0];
}

real Tensor::at(std::initializer_list<std::size_t> idx) const {
  const Shape& s = impl_->shape;
  if (idx.size() != s.size()) throw ConfigError("at(): rank mismatch");
  std::size_t off = 0;
  std::size_t i = 0;
  for (auto v : idx) {
    if (v >= s[i]) throw ConfigError("at(): index out of range");
    off = off * s[i] + v;
    ++i;
  }
  return impl_->data[off];
}

bool Tensor::all_finite() const {
  for (real v : impl_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- backward sweep ------------------------------------------------------

void Tensor::backward() {
  if (numel() != 1) {
    throw ConfigError("backward(): only scalar roots are supported");
  }
  impl_->ensure_grad();
  impl_->grad[0] = real{1};

  // Iterative post-order DFS; `order` ends up topologically sorted with the
  // root last.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    TensorImpl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_.get(), 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorImpl* p = f.node->parents[f.next_parent++].get();
      if (!visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward) {
      for (auto& p : node->parents)
        if (p->requires_grad) p->ensure_grad();
      node->backward(*node);
    }
  }
  // Release the tape.
  for (TensorImpl* node : order) {
    node->backward = nullptr;
    node->parents.clear();
  }
}

// ---- op plumbing ---------------------------------------------------------

Tensor make_op_result(Shape shape, std::vector<const Tensor*> parents) {
  bool track = false;
  if (g_grad_enabled) {
    for (const Tensor* p : parents)
      if (p->requires_grad()) track = true;
  }
  Tensor out = Tensor::zeros(std::move(shape), track);
  if (track) {
    out.impl()->parents.reserve(parents.size());
    for (const Tensor* p : parents) out.impl()->parents.push_back(p->impl());
  }
  return out;
}

namespace {

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

#ifndef KT_REAL_FLOAT32
// Branch-free exp over a contiguous buffer (Cephes-style Pade kernel with
// bit-level 2^n reconstruction), accurate to ~2 ulp. Plain elementwise code
// so the compiler can vectorize it; libm's exp stays scalar here because FP
// reductions and errno block auto-vectorization. Inputs below the underflow
// edge come out exactly 0, which the masking contract relies on.
inline void exp_buffer(real* x, std::size_t n) {
  constexpr double log2e = 1.4426950408889634074;
  constexpr double c1 = 6.93145751953125e-1;
  constexpr double c2 = 1.42860682030941723212e-6;
  constexpr double p0 = 1.26177193074810590878e-4;
  constexpr double p1 = 3.02994407707441961300e-2;
  constexpr double p2 = 9.99999999999999999910e-1;
  constexpr double q0 = 3.00198505138664455042e-6;
  constexpr double q1 = 2.52448340349684104192e-3;
  constexpr double q2 = 2.27265548208155028766e-1;
  constexpr double q3 = 2.00000000000000000005e0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    const double vc = v < -708.0 ? -708.0 : v;
    double k = std::floor(log2e * vc + 0.5);
    const double r = (vc - k * c1) - k * c2;
    const double rr = r * r;
    const double px = r * ((p0 * rr + p1) * rr + p2);
    const double qx = ((q0 * rr + q1) * rr + q2) * rr + q3;
    const double e = 1.0 + 2.0 * px / (qx - px);
    const auto bits = static_cast<std::uint64_t>(
        static_cast<std::int64_t>(k) + 1023)
                      << 52;
    double result;
    std::memcpy(&result, &bits, sizeof(result));
    result *= e;
    x[i] = v < -708.0 ? 0.0 : result;
  }
}
#else
inline void exp_buffer(real* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(x[i]);
}
#endif

}  // namespace

// ---- matmul --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ConfigError("matmul: operands must have rank >= 2");
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t kb = sb[sb.size() - 2];
  const std::size_t n = sb[sb.size() - 1];
  if (k != kb) {
    throw ConfigError("matmul: inner dims differ, " + shape_str(sa) + " vs " +
                      shape_str(sb));
  }
  const bool shared_b = sb.size() == 2 && sa.size() > 2;
  if (!shared_b && sa.size() != sb.size()) {
    throw ConfigError("matmul: rank mismatch " + shape_str(sa) + " vs " +
                      shape_str(sb));
  }
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
    batch *= sa[i];
    if (!shared_b && sa[i] != sb[i]) {
      throw ConfigError("matmul: batch dims differ, " + shape_str(sa) +
                        " vs " + shape_str(sb));
    }
  }

  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  Tensor out = make_op_result(std::move(out_shape), {&a, &b});

  const real* ap = a.data();
  const real* bp = b.data();
  real* cp = out.data();
  if (shared_b) {
    // One kernel call over all batch rows.
    kernels::matmul(ap, bp, cp, batch * m, k, n, false);
  } else {
    for (std::size_t s = 0; s < batch; ++s) {
      kernels::matmul(ap + s * m * k, bp + s * k * n, cp + s * m * n, m, k, n,
                      false);
    }
  }

  if (out.requires_grad()) {
    out.impl()->backward = [m, k, n, batch, shared_b](TensorImpl& self) {
      TensorImpl& pa = *self.parents[0];
      TensorImpl& pb = *self.parents[1];
      const real* g = self.grad.data();
      if (shared_b) {
        if (pa.requires_grad) {
          // dA = dC · Bᵀ with Bᵀ materialized once so the kernel streams rows
          std::vector<real> bt(n * k);
          const real* bd = pb.data.data();
          for (std::size_t r = 0; r < k; ++r)
            for (std::size_t col = 0; col < n; ++col)
              bt[col * k + r] = bd[r * n + col];
          kernels::matmul(g, bt.data(), pa.grad.data(), batch * m, n, k, true);
        }
        if (pb.requires_grad) {
          // dB = Aᵀ · dC accumulated over every batch row
          kernels::matmul_tn(pa.data.data(), g, pb.grad.data(), k, batch * m,
                             n, true);
        }
        return;
      }
      for (std::size_t s = 0; s < batch; ++s) {
        const real* gslice = g + s * m * n;
        const real* bslice = pb.data.data() + s * k * n;
        const real* aslice = pa.data.data() + s * m * k;
        if (pa.requires_grad) {
          kernels::matmul_nt(gslice, bslice, pa.grad.data() + s * m * k, m, n,
                             k, true);
        }
        if (pb.requires_grad) {
          kernels::matmul_tn(aslice, gslice, pb.grad.data() + s * k * n, k, m,
                             n, true);
        }
      }
    };
  }
  return out;
}

Tensor transpose_last2(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ConfigError("transpose_last2: rank < 2");
  const std::size_t r = s[s.size() - 2];
  const std::size_t c = s[s.size() - 1];
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];

  Shape out_shape = s;
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  Tensor out = make_op_result(std::move(out_shape), {&x});

  const real* xp = x.data();
  real* op = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const real* xs = xp + b * r * c;
    real* os = op + b * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) os[j * r + i] = xs[i * c + j];
  }

  if (out.requires_grad()) {
    out.impl()->backward = [r, c, batch](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      if (!px.requires_grad) return;
      const real* g = self.grad.data();
      for (std::size_t b = 0; b < batch; ++b) {
        const real* gs = g + b * r * c;
        real* xs = px.grad.data() + b * r * c;
        for (std::size_t j = 0; j < c; ++j)
          for (std::size_t i = 0; i < r; ++i) xs[i * c + j] += gs[j * r + i];
      }
    };
  }
  return out;
}

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = make_op_result(a.shape(), {&a, &b});
  const std::size_t n = out.numel();
  const real* ap = a.data();
  const real* bp = b.data();
  real* op = out.data();
  for (std::size_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  if (out.requires_grad()) {
    out.impl()->backward = [n](TensorImpl& self) {
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        real* pg = p->grad.data();
        const real* g = self.grad.data();
        for (std::size_t i = 0; i < n; ++i) pg[i] += g[i];
      }
    };
  }
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.ndim() != 1 || bias.dim(0) != x.shape().back()) {
    throw ConfigError("add_bias: bias " + shape_str(bias.shape()) +
                      " does not match last dim of " + shape_str(x.shape()));
  }
  const std::size_t d = bias.dim(0);
  const std::size_t rows = x.numel() / d;
  Tensor out = make_op_result(x.shape(), {&x, &bias});
  const real* xp = x.data();
  const real* bp = bias.data();
  real* op = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) op[r * d + j] = xp[r * d + j] + bp[j];
  if (out.requires_grad()) {
    out.impl()->backward = [rows, d](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      TensorImpl& pb = *self.parents[1];
      const real* g = self.grad.data();
      if (px.requires_grad) {
        real* xg = px.grad.data();
        const std::size_t n = rows * d;
        for (std::size_t i = 0; i < n; ++i) xg[i] += g[i];
      }
      if (pb.requires_grad) {
        real* bg = pb.grad.data();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) bg[j] += g[r * d + j];
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& x, real c) {
  Tensor out = make_op_result(x.shape(), {&x});
  const std::size_t n = out.numel();
  const real* xp = x.data();
  real* op = out.data();
  for (std::size_t i = 0; i < n; ++i) op[i] = xp[i] * c;
  if (out.requires_grad()) {
    out.impl()->backward = [n, c](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      if (!px.requires_grad) return;
      real* xg = px.grad.data();
      const real* g = self.grad.data();
      for (std::size_t i = 0; i < n; ++i) xg[i] += g[i] * c;
    };
  }
  return out;
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ConfigError("scale_by: scale must be 1-element");
  Tensor out = make_op_result(x.shape(), {&x, &s});
  const std::size_t n = out.numel();
  const real sv = s.data()[0];
  const real* xp = x.data();
  real* op = out.data();
  for (std::size_t i = 0; i < n; ++i) op[i] = xp[i] * sv;
  if (out.requires_grad()) {
    out.impl()->backward = [n, sv](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      TensorImpl& ps = *self.parents[1];
      const real* g = self.grad.data();
      if (px.requires_grad) {
        real* xg = px.grad.data();
        for (std::size_t i = 0; i < n; ++i) xg[i] += g[i] * sv;
      }
      if (ps.requires_grad) {
        const real* xp2 = px.data.data();
        real acc = 0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * xp2[i];
        ps.grad[0] += acc;
      }
    };
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = make_op_result(x.shape(), {&x});
  const std::size_t n = out.numel();
  const real* xp = x.data();
  real* op = out.data();
  for (std::size_t i = 0; i < n; ++i) op[i] = xp[i] > 0 ? xp[i] : real{0};
  if (out.requires_grad()) {
    out.impl()->backward = [n](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      if (!px.requires_grad) return;
      real* xg = px.grad.data();
      const real* g = self.grad.data();
      const real* xp2 = px.data.data();
      for (std::size_t i = 0; i < n; ++i)
        if (xp2[i] > 0) xg[i] += g[i];
    };
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = make_op_result(x.shape(), {&x});
  const std::size_t n = out.numel();
  const real* xp = x.data();
  real* op = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const real v = xp[i];
    op[i] = v >= 0 ? real{1} / (real{1} + std::exp(-v))
                   : std::exp(v) / (real{1} + std::exp(v));
  }
  if (out.requires_grad()) {
    out.impl()->backward = [n](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      if (!px.requires_grad) return;
      real* xg = px.grad.data();
      const real* g = self.grad.data();
      const real* y = self.data.data();
      for (std::size_t i = 0; i < n; ++i)
        xg[i] += g[i] * y[i] * (real{1} - y[i]);
    };
  }
  return out;
}

Tensor dropout(const Tensor& x, real p, Rng& rng, bool training) {
  if (p < 0 || p >= 1) throw ConfigError("dropout: p must be in [0,1)");
  if (!training || p == 0) return x;
  const std::size_t n = x.numel();
  const real keep = real{1} - p;
  auto mask = std::make_shared<std::vector<uint8_t>>(n);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) (*mask)[i] = uni(rng) >= p ? 1 : 0;

  Tensor out = make_op_result(x.shape(), {&x});
  const real* xp = x.data();
  real* op = out.data();
  for (std::size_t i = 0; i < n; ++i)
    op[i] = (*mask)[i] ? xp[i] / keep : real{0};
  if (out.requires_grad()) {
    out.impl()->backward = [n, keep, mask](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      if (!px.requires_grad) return;
      real* xg = px.grad.data();
      const real* g = self.grad.data();
      for (std::size_t i = 0; i < n; ++i)
        if ((*mask)[i]) xg[i] += g[i] / keep;
    };
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x, long* fully_masked_rows) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  Tensor out = make_op_result(x.shape(), {&x});
  const real* xp = x.data();
  real* op = out.data();
  long masked_rows = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xp + r * d;
    real* orow = op + r * d;
    real mx = row[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    if (mx <= kFullyMaskedThreshold) {
      // All entries masked; defined as an all-zeros row.
      std::memset(orow, 0, d * sizeof(real));
      ++masked_rows;
      continue;
    }
    for (std::size_t j = 0; j < d; ++j) orow[j] = row[j] - mx;
    exp_buffer(orow, d);  // masked entries underflow to exactly 0
    real sum = 0;
    for (std::size_t j = 0; j < d; ++j) sum += orow[j];
    const real inv = real{1} / sum;
    for (std::size_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  if (fully_masked_rows) *fully_masked_rows += masked_rows;

  if (out.requires_grad()) {
    out.impl()->backward = [rows, d](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      if (!px.requires_grad) return;
      const real* g = self.grad.data();
      const real* y = self.data.data();
      real* xg = px.grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const real* gr = g + r * d;
        const real* yr = y + r * d;
        real* xr = xg + r * d;
        real dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
        for (std::size_t j = 0; j < d; ++j) xr[j] += yr[j] * (gr[j] - dot);
      }
    };
  }
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 real eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ConfigError("layernorm: gain/bias must match feature dim " +
                      std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  Tensor out = make_op_result(x.shape(), {&x, &gain, &bias});

  // Saved for backward: normalized activations and 1/std per row.
  auto xhat = std::make_shared<std::vector<real>>(rows * d);
  auto invstd = std::make_shared<std::vector<real>>(rows);

  const real* xp = x.data();
  const real* gp = gain.data();
  const real* bp = bias.data();
  real* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xp + r * d;
    real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<real>(d);
    real var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const real c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<real>(d);
    const real is = real{1} / std::sqrt(var + eps);
    (*invstd)[r] = is;
    real* hr = xhat->data() + r * d;
    real* orow = op + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      hr[j] = (row[j] - mean) * is;
      orow[j] = hr[j] * gp[j] + bp[j];
    }
  }

  if (out.requires_grad()) {
    out.impl()->backward = [rows, d, xhat, invstd](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      TensorImpl& pg = *self.parents[1];
      TensorImpl& pb = *self.parents[2];
      const real* g = self.grad.data();
      const real* gp2 = pg.data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const real* gr = g + r * d;
        const real* hr = xhat->data() + r * d;
        if (pg.requires_grad || pb.requires_grad) {
          real* gg = pg.requires_grad ? pg.grad.data() : nullptr;
          real* bg = pb.requires_grad ? pb.grad.data() : nullptr;
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += gr[j] * hr[j];
            if (bg) bg[j] += gr[j];
          }
        }
        if (px.requires_grad) {
          real sum_dh = 0, sum_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const real dh = gr[j] * gp2[j];
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
          }
          const real is = (*invstd)[r];
          real* xg = px.grad.data() + r * d;
          const real dn = static_cast<real>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const real dh = gr[j] * gp2[j];
            xg[j] += is * (dh - sum_dh / dn - hr[j] * sum_dh_h / dn);
          }
        }
      }
    };
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids,
                        Shape prefix) {
  if (table.ndim() != 2) throw ConfigError("embedding_lookup: table rank != 2");
  const std::size_t v = table.dim(0);
  const std::size_t d = table.dim(1);
  if (shape_numel(prefix) != ids.size()) {
    throw ConfigError("embedding_lookup: prefix does not match id count");
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DataError("embedding_lookup: index " + std::to_string(id) +
                      " out of range [0," + std::to_string(v) + ")");
    }
  }
  Shape out_shape = prefix;
  out_shape.push_back(d);
  Tensor out = make_op_result(std::move(out_shape), {&table});
  const real* tp = table.data();
  real* op = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(op + i * d, tp + static_cast<std::size_t>(ids[i]) * d,
                d * sizeof(real));
  }
  if (out.requires_grad()) {
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    out.impl()->backward = [d, ids_copy](TensorImpl& self) {
      TensorImpl& pt = *self.parents[0];
      if (!pt.requires_grad) return;
      const real* g = self.grad.data();
      real* tg = pt.grad.data();
      for (std::size_t i = 0; i < ids_copy->size(); ++i) {
        real* trow = tg + static_cast<std::size_t>((*ids_copy)[i]) * d;
        const real* gr = g + i * d;
        for (std::size_t j = 0; j < d; ++j) trow[j] += gr[j];
      }
    };
  }
  return out;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ConfigError("concat_lastdim: no inputs");
  Shape prefix(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    Shape pp(p.shape().begin(), p.shape().end() - 1);
    if (pp != prefix) throw ConfigError("concat_lastdim: prefix mismatch");
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  const std::size_t rows = shape_numel(prefix);
  Shape out_shape = prefix;
  out_shape.push_back(total);
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  Tensor out = make_op_result(std::move(out_shape), ptrs);
  real* op = out.data();
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const std::size_t w = widths[pi];
    const real* src = parts[pi].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::memcpy(op + r * total + off, src + r * w, w * sizeof(real));
    }
    off += w;
  }
  if (out.requires_grad()) {
    out.impl()->backward = [rows, total, widths](TensorImpl& self) {
      const real* g = self.grad.data();
      std::size_t off2 = 0;
      for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
        TensorImpl& p = *self.parents[pi];
        const std::size_t w = widths[pi];
        if (p.requires_grad) {
          real* pg = p.grad.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const real* gr = g + r * total + off2;
            real* pr = pg + r * w;
            for (std::size_t j = 0; j < w; ++j) pr[j] += gr[j];
          }
        }
        off2 += w;
      }
    };
  }
  return out;
}

Tensor slice_lastdim(const Tensor& x, std::size_t offset, std::size_t len) {
  const std::size_t d = x.shape().back();
  if (offset + len > d) throw ConfigError("slice_lastdim: out of range");
  const std::size_t rows = x.numel() / d;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor out = make_op_result(std::move(out_shape), {&x});
  const real* xp = x.data();
  real* op = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::memcpy(op + r * len, xp + r * d + offset, len * sizeof(real));
  }
  if (out.requires_grad()) {
    out.impl()->backward = [rows, d, offset, len](TensorImpl& self) {
      TensorImpl& px = *self.parents[0];
      if (!px.requires_grad) return;
      const real* g = self.grad.data();
      real* xg = px.grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const real* gr = g + r * len;
        real* xr = xg + r * d + offset;
        for (std::size_t j = 0; j < len; ++j) xr[j] += gr[j];
      }
    };
  }
  return out;
}

Tensor rows_outer(const std::vector<real>& coef, const Tensor& w,
                  Shape prefix) {
  if (w.ndim() != 1) throw ConfigError("rows_outer: w must be rank 1");
  if (shape_numel(prefix) != coef.size()) {
    throw ConfigError("rows_outer: prefix does not match coef count");
  }
  const std::size_t d = w.dim(0);
  Shape out_shape = prefix;
  out_shape.push_back(d);
  Tensor out = make_op_result(std::move(out_shape), {&w});
  const real* wp = w.data();
  real* op = out.data();
  for (std::size_t r = 0; r < coef.size(); ++r) {
    const real c = coef[r];
    for (std::size_t j = 0; j < d; ++j) op[r * d + j] = c * wp[j];
  }
  if (out.requires_grad()) {
    auto coef_copy = std::make_shared<std::vector<real>>(coef);
    out.impl()->backward = [d, coef_copy](TensorImpl& self) {
      TensorImpl& pw = *self.parents[0];
      if (!pw.requires_grad) return;
      const real* g = self.grad.data();
      real* wg = pw.grad.data();
      for (std::size_t r = 0; r < coef_copy->size(); ++r) {
        const real c = (*coef_copy)[r];
        const real* gr = g + r * d;
        for (std::size_t j = 0; j < d; ++j) wg[j] += c * gr[j];
      }
    };
  }
  return out;
}

Tensor causal_mhsa(const Tensor& q, const Tensor& k, const Tensor& v,
                   const std::vector<Tensor>& head_bias, std::size_t heads,
                   std::vector<std::vector<real>>* record,
                   long* fully_masked_rows) {
  if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ConfigError("causal_mhsa: q/k/v must share a [B,L,d] shape");
  }
  const std::size_t b = q.dim(0);
  const std::size_t l = q.dim(1);
  const std::size_t d = q.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("causal_mhsa: d not divisible by head count");
  }
  if (head_bias.empty() ||
      (head_bias.size() != 1 && head_bias.size() != heads)) {
    throw ConfigError("causal_mhsa: need 1 shared bias or one per head");
  }
  for (const Tensor& m : head_bias) {
    if (m.shape() != Shape{b, l, l}) {
      throw ConfigError("causal_mhsa: bias must be [B,L,L]");
    }
  }
  const std::size_t dk = d / heads;
  const real inv_sqrt_dk =
      static_cast<real>(1.0 / std::sqrt(static_cast<double>(dk)));

  std::vector<const Tensor*> parents = {&q, &k, &v};
  for (const Tensor& m : head_bias) parents.push_back(&m);
  Tensor out = make_op_result({b, l, d}, parents);

  // One attention buffer for all (batch, head) pairs; rows above the
  // diagonal are structurally zero and never stored.
  auto att = std::make_shared<std::vector<real>>(b * heads * l * l, real{0});

  if (record) record->assign(heads, std::vector<real>(b * l * l, real{0}));

  const real* qp = q.data();
  const real* kp = k.data();
  const real* vp = v.data();
  real* op = out.data();
  long masked_rows = 0;

  // Rows of the score matrix are built as contiguous AXPY passes over a
  // transposed K slice, keeping the exp/normalize sweeps vectorizable.
#ifdef _OPENMP
#pragma omp parallel for schedule(static) reduction(+ : masked_rows)
#endif
  for (long long bii = 0; bii < static_cast<long long>(b); ++bii) {
    const std::size_t bi = static_cast<std::size_t>(bii);
    std::vector<real> kt_buf(dk * l);
    for (std::size_t h = 0; h < heads; ++h) {
      const real* bias =
          head_bias[head_bias.size() == 1 ? 0 : h].data() + bi * l * l;
      real* att_h = att->data() + (bi * heads + h) * l * l;
      const std::size_t off = h * dk;
      for (std::size_t j = 0; j < l; ++j) {
        const real* krow = kp + (bi * l + j) * d + off;
        for (std::size_t c = 0; c < dk; ++c) kt_buf[c * l + j] = krow[c];
      }
      for (std::size_t t = 0; t < l; ++t) {
        const real* qrow = qp + (bi * l + t) * d + off;
        real* arow = att_h + t * l;
        const std::size_t row_len = t + 1;
        std::memcpy(arow, bias + t * l, row_len * sizeof(real));
        for (std::size_t c = 0; c < dk; ++c) {
          const real qs = qrow[c] * inv_sqrt_dk;
          const real* ktc = kt_buf.data() + c * l;
          for (std::size_t j = 0; j < row_len; ++j) arow[j] += qs * ktc[j];
        }
        real mx = arow[0];
        for (std::size_t j = 1; j < row_len; ++j) mx = std::max(mx, arow[j]);
        if (mx <= kFullyMaskedThreshold) {
          std::memset(arow, 0, row_len * sizeof(real));
          ++masked_rows;
        } else {
          for (std::size_t j = 0; j < row_len; ++j) arow[j] -= mx;
          exp_buffer(arow, row_len);
          real sum = 0;
          for (std::size_t j = 0; j < row_len; ++j) sum += arow[j];
          const real inv = real{1} / sum;
          for (std::size_t j = 0; j < row_len; ++j) arow[j] *= inv;
        }
        real* orow = op + (bi * l + t) * d + off;
        for (std::size_t j = 0; j < row_len; ++j) {
          const real w = arow[j];
          const real* vrow = vp + (bi * l + j) * d + off;
          for (std::size_t c = 0; c < dk; ++c) orow[c] += w * vrow[c];
        }
      }
      if (record) {
        real* rec = (*record)[h].data() + bi * l * l;
        std::memcpy(rec, att_h, l * l * sizeof(real));
      }
    }
  }
  if (fully_masked_rows) *fully_masked_rows += masked_rows;

  if (out.requires_grad()) {
    const std::size_t n_bias = head_bias.size();
    out.impl()->backward = [b, l, d, dk, heads, inv_sqrt_dk, att,
                            n_bias](TensorImpl& self) {
      TensorImpl& pq = *self.parents[0];
      TensorImpl& pk = *self.parents[1];
      TensorImpl& pv = *self.parents[2];
      const real* g = self.grad.data();
      const real* qp2 = pq.data.data();
      const real* kp2 = pk.data.data();
      const real* vp2 = pv.data.data();
      // Parallel over the batch only: bias gradients are shared between
      // heads, so per-b slices are the disjoint unit of work.
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (long long bii = 0; bii < static_cast<long long>(b); ++bii) {
        const std::size_t bi = static_cast<std::size_t>(bii);
        std::vector<real> ds(l * l);
        std::vector<real> vt_buf(dk * l);
        for (std::size_t h = 0; h < heads; ++h) {
          TensorImpl& pbias = *self.parents[3 + (n_bias == 1 ? 0 : h)];
          const real* att_h = att->data() + (bi * heads + h) * l * l;
          const std::size_t off = h * dk;
          for (std::size_t j = 0; j < l; ++j) {
            const real* vrow = vp2 + (bi * l + j) * d + off;
            for (std::size_t c = 0; c < dk; ++c) vt_buf[c * l + j] = vrow[c];
          }
          // dAtt then softmax backward, row by row.
          for (std::size_t t = 0; t < l; ++t) {
            const real* grow = g + (bi * l + t) * d + off;
            real* dsrow = ds.data() + t * l;
            const real* arow = att_h + t * l;
            const std::size_t row_len = t + 1;
            std::memset(dsrow, 0, row_len * sizeof(real));
            for (std::size_t c = 0; c < dk; ++c) {
              const real gc = grow[c];
              const real* vtc = vt_buf.data() + c * l;
              for (std::size_t j = 0; j < row_len; ++j) dsrow[j] += gc * vtc[j];
            }
            real dot = 0;
            for (std::size_t j = 0; j < row_len; ++j) dot += dsrow[j] * arow[j];
            for (std::size_t j = 0; j < row_len; ++j) {
              dsrow[j] = arow[j] * (dsrow[j] - dot);
            }
          }
          if (pbias.requires_grad) {
            real* bg = pbias.grad.data() + bi * l * l;
            for (std::size_t t = 0; t < l; ++t)
              for (std::size_t j = 0; j <= t; ++j)
                bg[t * l + j] += ds[t * l + j];
          }
          if (pv.requires_grad) {
            real* vg = pv.grad.data();
            for (std::size_t t = 0; t < l; ++t) {
              const real* grow = g + (bi * l + t) * d + off;
              const real* arow = att_h + t * l;
              for (std::size_t j = 0; j <= t; ++j) {
                real* vgr = vg + (bi * l + j) * d + off;
                const real w = arow[j];
                for (std::size_t c = 0; c < dk; ++c) vgr[c] += w * grow[c];
              }
            }
          }
          if (pq.requires_grad || pk.requires_grad) {
            for (std::size_t t = 0; t < l; ++t) {
              real* dsrow = ds.data() + t * l;
              for (std::size_t j = 0; j <= t; ++j) dsrow[j] *= inv_sqrt_dk;
            }
            if (pq.requires_grad) {
              real* qg = pq.grad.data();
              for (std::size_t t = 0; t < l; ++t) {
                real* qgr = qg + (bi * l + t) * d + off;
                const real* dsrow = ds.data() + t * l;
                for (std::size_t j = 0; j <= t; ++j) {
                  const real w = dsrow[j];
                  const real* krow = kp2 + (bi * l + j) * d + off;
                  for (std::size_t c = 0; c < dk; ++c) qgr[c] += w * krow[c];
                }
              }
            }
            if (pk.requires_grad) {
              real* kg = pk.grad.data();
              for (std::size_t t = 0; t < l; ++t) {
                const real* qrow = qp2 + (bi * l + t) * d + off;
                const real* dsrow = ds.data() + t * l;
                for (std::size_t j = 0; j <= t; ++j) {
                  real* kgr = kg + (bi * l + j) * d + off;
                  const real w = dsrow[j];
                  for (std::size_t c = 0; c < dk; ++c) kgr[c] += w * qrow[c];
                }
              }
            }
          }
        }
      }
    };
  }
  return out;
}

BceResult bce_loss(const Tensor& p, const Tensor& targets, const Tensor& mask) {
  check_same_shape(p, targets, "bce_loss");
  check_same_shape(p, mask, "bce_loss");
  const std::size_t n = p.numel();
  constexpr real lo = static_cast<real>(1e-7);
  const real hi = real{1} - lo;

  std::size_t valid = 0;
  const real* mp = mask.data();
  for (std::size_t i = 0; i < n; ++i)
    if (mp[i] != 0) ++valid;
  if (valid == 0) throw DataError("bce_loss: mask selects no steps");

  Tensor sum = make_op_result({1}, {&p});
  const real* pp = p.data();
  const real* tp = targets.data();
  real acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mp[i] == 0) continue;
    const real pc = std::clamp(pp[i], lo, hi);
    acc -= tp[i] * std::log(pc) + (real{1} - tp[i]) * std::log(real{1} - pc);
  }
  sum.data()[0] = acc;

  if (sum.requires_grad()) {
    auto t_keep = targets.impl();
    auto m_keep = mask.impl();
    sum.impl()->backward = [n, lo, hi, t_keep, m_keep](TensorImpl& self) {
      TensorImpl& pp2 = *self.parents[0];
      if (!pp2.requires_grad) return;
      const real g = self.grad[0];
      real* pg = pp2.grad.data();
      const real* pv = pp2.data.data();
      const real* tv = t_keep->data.data();
      const real* mv = m_keep->data.data();
      for (std::size_t i = 0; i < n; ++i) {
        if (mv[i] == 0) continue;
        if (pv[i] <= lo || pv[i] >= hi) continue;  // clamp region is flat
        const real pc = pv[i];
        pg[i] += g * (pc - tv[i]) / (pc * (real{1} - pc));
      }
    };
  }

  BceResult res;
  res.sum = sum;
  res.mean = scale(sum, real{1} / static_cast<real>(valid));
  res.valid_count = valid;
  return res;
}

void fill_trunc_normal(Tensor& t, real std_dev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, static_cast<double>(std_dev));
  for (real& v : t.vec()) {
    double x = normal(rng);
    while (std::abs(x) > 2.0 * static_cast<double>(std_dev)) x = normal(rng);
    v = static_cast<real>(x);
  }
}

}  // namespace kt
