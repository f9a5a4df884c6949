#include "kt/kernels.hpp"

#include <cstring>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kt::kernels {

namespace {

// Training allocates and frees multi-megabyte activation buffers every step;
// keeping them on the heap instead of round-tripping through mmap removes
// the page-fault churn.
struct MallocTuning {
  MallocTuning() {
#ifdef __GLIBC__
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, -1);
#endif
  }
};
const MallocTuning g_malloc_tuning;

bool g_parallel =
#ifdef _OPENMP
    true;
#else
    false;
#endif

// Below this many multiply-adds the omp fork overhead dominates.
constexpr std::size_t kParallelCutoff = 64 * 1024;

inline bool use_parallel(std::size_t work) {
#ifdef _OPENMP
  return g_parallel && work >= kParallelCutoff && omp_get_max_threads() > 1;
#else
  (void)work;
  return false;
#endif
}
}  // namespace

bool parallel_enabled() { return g_parallel; }
void set_parallel(bool on) { g_parallel = on; }

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul_serial(const real* a, const real* b, real* c, std::size_t m,
                   std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    real* crow = c + i * n;
    if (!accumulate) std::memset(crow, 0, n * sizeof(real));
    const real* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const real av = arow[kk];
      const real* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

namespace {

// Dot product over eight independent accumulator lanes; the fixed lane
// order keeps results identical across runs and thread counts while letting
// the compiler vectorize the reduction.
inline real dot_lanes(const real* a, const real* b, std::size_t k) {
  real lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t kk = 0;
  for (; kk + 8 <= k; kk += 8) {
    for (std::size_t u = 0; u < 8; ++u) lane[u] += a[kk + u] * b[kk + u];
  }
  real tail = 0;
  for (; kk < k; ++kk) tail += a[kk] * b[kk];
  return ((lane[0] + lane[1]) + (lane[2] + lane[3])) +
         ((lane[4] + lane[5]) + (lane[6] + lane[7])) + tail;
}

}  // namespace

void matmul_nt_serial(const real* a, const real* b, real* c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const real* arow = a + i * k;
    real* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const real acc = dot_lanes(arow, b + j * k, k);
      if (accumulate)
        crow[j] += acc;
      else
        crow[j] = acc;
    }
  }
}

void matmul_tn_serial(const real* a, const real* b, real* c, std::size_t m,
                      std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::memset(c, 0, m * n * sizeof(real));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const real* arow = a + kk * m;
    const real* brow = b + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const real av = arow[i];
      real* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul(const real* a, const real* b, real* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  if (!use_parallel(m * k * n)) {
    matmul_serial(a, b, c, m, k, n, accumulate);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    real* crow = c + i * n;
    if (!accumulate) std::memset(crow, 0, n * sizeof(real));
    const real* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const real av = arow[kk];
      const real* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
#endif
}

void matmul_nt(const real* a, const real* b, real* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  if (!use_parallel(m * k * n)) {
    matmul_nt_serial(a, b, c, m, k, n, accumulate);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const real* arow = a + i * k;
    real* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const real acc = dot_lanes(arow, b + j * k, k);
      if (accumulate)
        crow[j] += acc;
      else
        crow[j] = acc;
    }
  }
#endif
}

void matmul_tn(const real* a, const real* b, real* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  if (!use_parallel(m * k * n)) {
    matmul_tn_serial(a, b, c, m, k, n, accumulate);
    return;
  }
#ifdef _OPENMP
  // Parallel over output rows; each thread walks the k dimension itself so
  // the per-element summation order matches the serial kernel exactly.
#pragma omp parallel for schedule(static)
  for (long long ii = 0; ii < static_cast<long long>(m); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    real* crow = c + i * n;
    if (!accumulate) std::memset(crow, 0, n * sizeof(real));
    for (std::size_t kk = 0; kk < k; ++kk) {
      const real av = a[kk * m + i];
      const real* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
#endif
}

}  // namespace kt::kernels
