#include <vector>

#include "doctest.h"
#include "kt/kernels.hpp"
#include "testutil.hpp"

namespace {

std::vector<kt::real> random_buf(std::size_t n, kt::Rng& rng) {
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  std::vector<kt::real> v(n);
  for (auto& x : v) x = static_cast<kt::real>(uni(rng));
  return v;
}

}  // namespace

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
  kt::Rng rng(123);
  // Sizes straddle the parallel cutoff.
  const std::vector<std::array<std::size_t, 3>> sizes = {
      {3, 4, 5}, {64, 64, 64}, {128, 96, 80}, {200, 200, 32}};
  for (auto [m, k, n] : sizes) {
    auto a = random_buf(m * k, rng);
    auto b = random_buf(k * n, rng);
    auto bt = random_buf(n * k, rng);
    auto at = random_buf(k * m, rng);

    std::vector<kt::real> c_ref(m * n), c_par(m * n);

    kt::kernels::matmul_serial(a.data(), b.data(), c_ref.data(), m, k, n,
                               false);
    kt::kernels::set_parallel(true);
    kt::kernels::matmul(a.data(), b.data(), c_par.data(), m, k, n, false);
    CHECK(c_ref == c_par);

    kt::kernels::matmul_nt_serial(a.data(), bt.data(), c_ref.data(), m, k, n,
                                  false);
    kt::kernels::matmul_nt(a.data(), bt.data(), c_par.data(), m, k, n, false);
    CHECK(c_ref == c_par);

    kt::kernels::matmul_tn_serial(at.data(), b.data(), c_ref.data(), m, k, n,
                                  false);
    kt::kernels::matmul_tn(at.data(), b.data(), c_par.data(), m, k, n, false);
    CHECK(c_ref == c_par);
  }
}

TEST_CASE("accumulate mode adds onto the output") {
  kt::Rng rng(9);
  const std::size_t m = 4, k = 6, n = 3;
  auto a = random_buf(m * k, rng);
  auto b = random_buf(k * n, rng);
  std::vector<kt::real> base = random_buf(m * n, rng);
  std::vector<kt::real> once(base), twice(base);
  kt::kernels::matmul_serial(a.data(), b.data(), once.data(), m, k, n, true);
  kt::kernels::matmul_serial(a.data(), b.data(), twice.data(), m, k, n, true);
  kt::kernels::matmul_serial(a.data(), b.data(), twice.data(), m, k, n, true);
  for (std::size_t i = 0; i < m * n; ++i) {
    CHECK(twice[i] ==
          doctest::Approx(2.0 * (once[i] - base[i]) + base[i]).epsilon(1e-12));
  }
}

TEST_CASE("transpose identities tie the three kernels together") {
  kt::Rng rng(21);
  const std::size_t m = 7, k = 5, n = 6;
  auto a = random_buf(m * k, rng);
  auto b = random_buf(k * n, rng);

  // Materialize transposes.
  std::vector<kt::real> bt(n * k), at(k * m);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + i] = b[i * n + j];
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) at[j * m + i] = a[i * k + j];

  std::vector<kt::real> c1(m * n), c2(m * n), c3(m * n);
  kt::kernels::matmul_serial(a.data(), b.data(), c1.data(), m, k, n, false);
  kt::kernels::matmul_nt_serial(a.data(), bt.data(), c2.data(), m, k, n,
                                false);
  kt::kernels::matmul_tn_serial(at.data(), b.data(), c3.data(), m, k, n,
                                false);
  for (std::size_t i = 0; i < m * n; ++i) {
    CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-12));
    CHECK(c1[i] == doctest::Approx(c3[i]).epsilon(1e-12));
  }
}
