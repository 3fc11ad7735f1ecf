#include <random>

#include "doctest.h"
#include "nbsmt/error.hpp"
#include "nbsmt/sysmt_gemm.hpp"
#include "support/gemm_cases.hpp"
#include "support/oracles.hpp"

using namespace nbsmt;

TEST_CASE("cycle formula") {
  ArrayConfig arr{32, 32};
  CHECK(layer_cycles(64, 90, 100, arr, 2) == 360);
  CHECK(layer_cycles(64, 90, 100, arr, 1) == 720);
  CHECK(layer_cycles(64, 90, 100, arr, 4) == 2 * 4 * 23);
  for (int t : {1, 2, 4}) CHECK(layer_cycles(10, 1, 10, arr, t) == 1);
  CHECK_THROWS_AS(layer_cycles(1, 1, 1, arr, 3), Error);
}

TEST_CASE("speedup") {
  CycleReport r;
  LayerCycleEntry exempt{"a", 1, true, 32, 64, 32, 64, 64, {}};
  LayerCycleEntry fast{"b", 4, false, 32, 64, 32, 16, 64, {}};
  r.add(exempt);
  r.add(fast);
  CHECK(speedup(r) == doctest::Approx(1.6).epsilon(1e-12));
  CycleReport base;
  base.add(exempt);
  base.add({"b", 1, false, 32, 64, 32, 64, 64, {}});
  CHECK(speedup(base) == 1.0);
  CHECK(speedup(r, base) == doctest::Approx(1.6).epsilon(1e-12));

  CycleReport big;
  big.add({"tiny", 1, true, 1, 1, 1, 1, 1, {}});
  big.add({"huge", 4, false, 32000, 4000, 32, 1000000, 4000000, {}});
  CHECK(speedup(big) == doctest::Approx(4.0).epsilon(1e-5));
}

TEST_CASE("report merging sums entries by name") {
  CycleReport r;
  LayerCycleEntry e{"conv2", 4, false, 10, 9, 3, 5, 20, {}};
  e.stats = {270, 60, 30, 100};
  r.add(e);
  r.add(e);
  REQUIRE(r.layers.size() == 1);
  CHECK(r.find("conv2")->cycles == 10);
  CHECK(r.find("conv2")->stats.collision_cycles == 60);
  CHECK(r.find("conv2")->collision_rate() == 0.5);
  CHECK(r.total_baseline_cycles() == 40);
}

TEST_CASE("thread config parsing") {
  auto c = ThreadConfig::parse("4T", "conv2=2,conv3=1T");
  CHECK(c.default_threads == 4);
  CHECK(c.threads_for("conv2") == 2);
  CHECK(c.threads_for("conv3") == 1);
  CHECK(c.threads_for("conv4") == 4);
  CHECK(c.label() == "4T[conv2=2T,conv3=1T]");
  CHECK(ThreadConfig::parse("2").label() == "2T");
  CHECK_THROWS_AS(ThreadConfig::parse("3T"), Error);
  CHECK_THROWS_AS(ThreadConfig::parse("4T", "conv2"), Error);
  nlohmann::json j = c;
  CHECK(j.get<ThreadConfig>() == c);
}

TEST_CASE("T=1 matches the reference GEMM") {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 100; ++i) {
    auto g = testing::random_gemm(rng, 9, 40, 9);
    auto ref = reference_gemm(g.a, g.w, g.m, g.k, g.n);
    auto got = nbsmt_gemm(g.a, g.w, g.m, g.k, g.n, 1);
    REQUIRE(got.output == ref);
    CHECK(got.stats.collision_cycles == 0);
    CHECK(got.stats.abs_error_sum == 0);
    CHECK(got.stats.mac_cycles == static_cast<std::int64_t>(g.m) * g.n * g.k);
  }
}

TEST_CASE("NB-SMT GEMM matches the scalar oracle") {
  std::mt19937_64 rng(22);
  for (int t : {2, 4}) {
    for (int i = 0; i < 60; ++i) {
      auto g = testing::random_gemm(rng, 6, 23, 6);
      auto got = nbsmt_gemm(g.a, g.w, g.m, g.k, g.n, t);
      auto want = oracle::gemm(g.a, g.w, g.m, g.k, g.n, t);
      REQUIRE(got.output.size() == want.output.size());
      for (std::size_t j = 0; j < want.output.size(); ++j) REQUIRE(got.output[j] == want.output[j]);
      CHECK(got.stats.mac_cycles == want.mac_cycles);
      CHECK(got.stats.collision_cycles == want.collision_cycles);
      CHECK(got.stats.abs_error_sum == want.abs_error_sum);
    }
  }
}

TEST_CASE("degenerate operand matrices") {
  std::vector<std::uint8_t> ones(4 * 8, 3);
  std::vector<std::int8_t> w(8 * 4, -2);
  auto full = nbsmt_gemm(ones, w, 4, 8, 4, 2);
  CHECK(full.stats.collision_cycles == full.stats.mac_cycles);

  std::vector<std::uint8_t> zeros(4 * 8, 0);
  auto none = nbsmt_gemm(zeros, w, 4, 8, 4, 4);
  CHECK(none.stats.collision_cycles == 0);
  CHECK(none.stats.abs_error_sum == 0);
  for (auto v : none.output) CHECK(v == 0);
}

TEST_CASE("collision rate falls as operands get sparser") {
  std::mt19937_64 rng(23);
  double prev = 2.0;
  for (double zero : {0.0, 0.2, 0.4, 0.6, 0.8}) {
    std::int64_t coll = 0, cyc = 0;
    for (int rep = 0; rep < 20; ++rep) {
      std::bernoulli_distribution z(zero);
      std::uniform_int_distribution<int> av(1, 255), wv(1, 127);
      std::vector<std::uint8_t> a(16 * 64);
      std::vector<std::int8_t> w(64 * 16);
      for (auto& x : a) x = z(rng) ? 0 : static_cast<std::uint8_t>(av(rng));
      for (auto& x : w) x = z(rng) ? 0 : static_cast<std::int8_t>(wv(rng));
      auto r = nbsmt_gemm(a, w, 16, 64, 16, 4);
      coll += r.stats.collision_cycles;
      cyc += r.stats.mac_cycles;
    }
    double rate = static_cast<double>(coll) / static_cast<double>(cyc);
    CHECK(rate < prev);
    prev = rate;
  }
}

TEST_CASE("im2col lowering") {
  Conv2d one_by_one;
  one_by_one.weight = Tensor({2, 3, 1, 1});
  one_by_one.bias = Tensor({2});
  QActivations in{{1, 3, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}, 1.0f, 0};
  auto low = im2col_lower(one_by_one, in);
  CHECK(low.depth == 3);
  CHECK(low.rows == 4);
  CHECK(low.data == std::vector<std::uint8_t>{1, 5, 9, 2, 6, 10, 3, 7, 11, 4, 8, 12});

  Conv2d three;
  three.weight = Tensor({4, 5, 3, 3});
  three.bias = Tensor({4});
  three.padding = 1;
  QActivations big{{1, 5, 28, 28}, std::vector<std::uint8_t>(5 * 784, 9), 1.0f, 7};
  auto l3 = im2col_lower(three, big);
  CHECK(l3.rows == 784);
  CHECK(l3.depth == 45);
  // the corner output sees padding in its first kernel row
  CHECK(l3.data[0] == 7);
  CHECK(l3.data[4] == 9);
}

TEST_CASE("accumulator overflow is reported") {
  const int k = 70000;
  std::vector<std::uint8_t> a(k, 255);
  std::vector<std::int8_t> w(k, 127);
  CHECK_THROWS_AS(reference_gemm(a, w, 1, k, 1), Error);
  CHECK_THROWS_AS(nbsmt_gemm(a, w, 1, k, 1, 1), Error);
}
