// Compares the serial reference kernels against the OpenMP path at model
// shapes and reports a full forward pass both ways, asserting bit-identical
// results as it goes.
#include <chrono>
#include <functional>
#include <cstdio>
#include <vector>

#include "kt/kernels.hpp"
#include "kt/model.hpp"
#include "kt/synth.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double run_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) fn();
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() /
         reps;
}

std::vector<kt::real> random_buf(std::size_t n, kt::Rng& rng) {
  std::vector<kt::real> v(n);
  for (auto& x : v) x = static_cast<kt::real>(kt::uniform_in(rng, -1, 1));
  return v;
}

}  // namespace

int main() {
  std::printf("threads available: %d\n\n", kt::kernels::max_threads());

  kt::Rng rng(42);
  struct Case {
    const char* name;
    std::size_t m, k, n;
  };
  const Case cases[] = {
      {"projection", 12800, 32, 32},
      {"ffn expand", 12800, 32, 128},
      {"ffn narrow", 12800, 128, 32},
      {"wide model", 12800, 128, 128},
  };

  std::printf("%-12s %10s %10s %8s %s\n", "matmul", "serial ms", "omp ms",
              "speedup", "bitwise");
  for (const Case& c : cases) {
    auto a = random_buf(c.m * c.k, rng);
    auto b = random_buf(c.k * c.n, rng);
    std::vector<kt::real> out_serial(c.m * c.n), out_par(c.m * c.n);

    const double t_serial = run_ms(
        [&] {
          kt::kernels::matmul_serial(a.data(), b.data(), out_serial.data(),
                                     c.m, c.k, c.n, false);
        },
        5);
    kt::kernels::set_parallel(true);
    const double t_par = run_ms(
        [&] {
          kt::kernels::matmul(a.data(), b.data(), out_par.data(), c.m, c.k,
                              c.n, false);
        },
        5);
    const bool same = out_serial == out_par;
    std::printf("%-12s %10.2f %10.2f %7.2fx %s\n", c.name, t_serial, t_par,
                t_serial / t_par, same ? "yes" : "NO");
    if (!same) return 1;
  }

  // Full model forward, serial vs parallel kernels.
  kt::SynthConfig sc;
  sc.n_students = 64;
  sc.seed = 9;
  auto data = kt::generate(sc);
  auto feats = kt::derive_features(data.log, 600);
  auto split = kt::split_by_sessions(feats, 200);
  std::vector<const kt::AugmentedSequence*> ptrs;
  for (std::size_t i = 0; i < 64 && i < split.train.size(); ++i)
    ptrs.push_back(&split.train[i]);
  kt::Batch batch = kt::make_batch(ptrs);

  kt::ModelConfig mc;
  mc.d = 32;
  mc.layers = 2;
  mc.heads = 4;
  mc.vocab = 50;
  mc.max_len = 200;
  kt::Model model(mc, 3);
  const kt::BiasMasks masks = model.build_masks(batch);

  kt::NoGradGuard ng;
  kt::kernels::set_parallel(false);
  kt::Tensor p_serial = model.forward(batch, masks, false);
  const double fwd_serial =
      run_ms([&] { (void)model.forward(batch, masks, false); }, 5);
  kt::kernels::set_parallel(true);
  kt::Tensor p_par = model.forward(batch, masks, false);
  const double fwd_par =
      run_ms([&] { (void)model.forward(batch, masks, false); }, 5);

  bool same = p_serial.vec() == p_par.vec();
  std::printf("\nmodel forward (B=%zu, L=%zu, d=32): serial %.1f ms, omp %.1f "
              "ms, %.2fx, bitwise %s\n",
              batch.b, batch.l, fwd_serial, fwd_par, fwd_serial / fwd_par,
              same ? "yes" : "NO");
  return same ? 0 : 1;
}
