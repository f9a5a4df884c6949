#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace kt {

#ifdef KT_REAL_FLOAT32
using real = float;
#else
using real = double;
#endif

// Additive logit sentinel for masked attention positions. A finite large
// negative value instead of -inf so that (masked) - (masked) never produces
// NaN when masks stack.
inline constexpr real kMaskValue = static_cast<real>(-1e9);
// A softmax row whose max is below this is treated as fully masked.
inline constexpr real kFullyMaskedThreshold = static_cast<real>(-5e8);

using Rng = std::mt19937_64;

// Distribution helpers built directly on the engine bits so that seeded
// streams do not depend on the standard library's distribution internals.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}
inline double uniform_in(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}
inline int uniform_int_in(Rng& rng, int lo, int hi) {
  const int span = hi - lo + 1;
  int v = lo + static_cast<int>(uniform01(rng) * span);
  return v > hi ? hi : v;
}
template <typename T>
void shuffle_vec(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j =
        static_cast<std::size_t>(uniform_int_in(rng, 0, static_cast<int>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

// Bad shapes, bad hyperparameters, unknown variants. CLI exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent input data. CLI exit code 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN loss or gradient during optimization. CLI exit code 4.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace kt
