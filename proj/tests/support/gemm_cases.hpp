#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace testing {

struct GemmCase {
  int m = 0, k = 0, n = 0;
  std::vector<std::uint8_t> a;  // m x k
  std::vector<std::int8_t> w;   // k x n
};

// Random shapes up to the given bounds with independent per-case zero
// densities, so every active-thread count shows up.
inline GemmCase random_gemm(std::mt19937_64& rng, int max_m, int max_k, int max_n) {
  GemmCase c;
  c.m = std::uniform_int_distribution<int>(1, max_m)(rng);
  c.k = std::uniform_int_distribution<int>(1, max_k)(rng);
  c.n = std::uniform_int_distribution<int>(1, max_n)(rng);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  const double a_zero = density(rng), w_zero = density(rng);
  std::uniform_int_distribution<int> av(1, 255), wv(-127, 127);
  std::bernoulli_distribution az(a_zero), wz(w_zero);
  c.a.resize(static_cast<std::size_t>(c.m) * c.k);
  c.w.resize(static_cast<std::size_t>(c.k) * c.n);
  for (auto& x : c.a) x = az(rng) ? 0 : static_cast<std::uint8_t>(av(rng));
  for (auto& x : c.w) x = wz(rng) ? 0 : static_cast<std::int8_t>(wv(rng));
  return c;
}

}  // namespace testing
