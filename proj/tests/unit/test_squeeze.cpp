#include <algorithm>
#include <cstdlib>
#include <random>
#include <vector>

#include "doctest.h"
#include "nbsmt/error.hpp"
#include "nbsmt/squeeze_mac.hpp"
#include "support/oracles.hpp"

using namespace nbsmt::squeeze;

namespace {

ThreadOperands op(int a, int w) { return {static_cast<std::uint8_t>(a), static_cast<std::int8_t>(w)}; }

}  // namespace

TEST_CASE("thread activity") {
  std::vector<ThreadOperands> ops{op(3, 0), op(5, 2)};
  CHECK(active_threads(ops) == std::vector<int>{1});
  std::vector<ThreadOperands> full{op(1, 1), op(2, -3), op(200, 9), op(4, 127)};
  CHECK(active_threads(full) == std::vector<int>{0, 1, 2, 3});
  std::vector<ThreadOperands> idle{op(0, 5), op(0, -5)};
  auto r = mac_cycle(idle, SqueezePolicy(2));
  CHECK(active_threads(idle).empty());
  CHECK(r.contribution == 0);
  CHECK_FALSE(r.collided());
}

TEST_CASE("operand reduction") {
  CHECK(reduce_activation(0) == 0);
  CHECK(reduce_activation(100) == 96);
  CHECK(reduce_activation(255) == 240);
  CHECK(reduce_activation(8) == 16);
  CHECK(reduce_weight(-50) == -48);
  CHECK(reduce_weight(-8) == -16);
  CHECK(reduce_weight(127) == 112);
  CHECK(reduce_weight(-127) == -128);
  CHECK(reduce_operand(100, 4, Signedness::kUnsigned) == 96);
  CHECK_THROWS_AS(reduce_operand(100, 3, Signedness::kUnsigned), nbsmt::Error);
  for (int a = 0; a < 256; ++a) CHECK(reduce_activation(a) == oracle::reduce_unsigned(a));
  for (int w = -127; w < 128; ++w) CHECK(reduce_weight(w) == oracle::reduce_signed(w));
}

TEST_CASE("two-thread collision example") {
  std::vector<ThreadOperands> ops{op(100, 3), op(7, -50)};
  auto r = mac_cycle(ops, SqueezePolicy(2));
  CHECK(r.active_count == 2);
  CHECK(r.threads[0].reduction == Reduction::kActivation);
  CHECK(r.threads[0].squeezed == 288);
  CHECK(r.threads[1].reduction == Reduction::kWeight);
  CHECK(r.threads[1].squeezed == -336);
  CHECK(r.contribution == -48);
  CHECK(r.abs_error() == 12 + 14);
}

TEST_CASE("four active threads reduce both operands") {
  std::vector<ThreadOperands> ops{op(100, 48), op(1, 1), op(1, 1), op(1, 1)};
  auto r = mac_cycle(ops, SqueezePolicy(4));
  CHECK(r.threads[0].squeezed == 4608);
  CHECK(r.threads[0].reduction == Reduction::kBoth);
  CHECK(both_operand_product(100, 48) == 4608);
}

TEST_CASE("policy") {
  CHECK_THROWS_AS(SqueezePolicy(3), nbsmt::Error);
  SqueezePolicy p4(4);
  CHECK(p4.level_for(0) == ReductionLevel::kExact);
  CHECK(p4.level_for(1) == ReductionLevel::kExact);
  CHECK(p4.level_for(2) == ReductionLevel::kOneOperand);
  CHECK(p4.level_for(3) == ReductionLevel::kBothOperands);
  std::vector<ThreadOperands> too_many{op(1, 1), op(1, 1), op(1, 1)};
  CHECK_THROWS_AS(mac_cycle(too_many, SqueezePolicy(2)), nbsmt::Error);
  std::vector<ThreadOperands> bad{op(1, -128)};
  CHECK_THROWS_AS(mac_cycle(bad, SqueezePolicy(1)), nbsmt::Error);
}

TEST_CASE("single active thread is exact") {
  for (int a = 1; a < 256; a += 3) {
    for (int w = -127; w < 128; w += 5) {
      std::vector<ThreadOperands> ops{op(0, 17), op(a, w), op(9, 0), op(0, 0)};
      auto r = mac_cycle(ops, SqueezePolicy(4));
      REQUIRE(r.contribution == a * w);
    }
  }
}

TEST_CASE("operands on the 16-grid are never perturbed") {
  std::mt19937 rng(3);
  std::uniform_int_distribution<int> qa(0, 15), qw(-7, 7);
  for (int trial = 0; trial < 5000; ++trial) {
    std::vector<ThreadOperands> ops;
    int exact = 0;
    for (int t = 0; t < 4; ++t) {
      int a = qa(rng) * 16, w = qw(rng) * 16;
      ops.push_back(op(a, w));
      exact += a * w;
    }
    REQUIRE(mac_cycle(ops, SqueezePolicy(4)).contribution == exact);
  }
}

TEST_CASE("single operand reduction error bound") {
  for (int a = 1; a < 256; ++a) {
    for (int w = -127; w < 128; ++w) {
      if (w == 0) continue;
      Reduction which;
      int got = one_operand_product(a, w, &which);
      int err = std::abs(got - a * w);
      bool clamped = which == Reduction::kActivation ? a > 247 : w > 119;
      if (!clamped) {
        int other = which == Reduction::kActivation ? std::abs(w) : a;
        REQUIRE(err <= 8 * other);
      }
    }
  }
}

TEST_CASE("inactive thread placement does not matter") {
  std::mt19937 rng(4);
  std::uniform_int_distribution<int> a(0, 255), w(-127, 127), zero(0, 2);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<ThreadOperands> ops;
    for (int t = 0; t < 4; ++t) ops.push_back(op(zero(rng) ? a(rng) : 0, w(rng)));
    auto base = mac_cycle(ops, SqueezePolicy(4)).contribution;
    std::vector<ThreadOperands> packed;
    for (auto o : ops) {
      if (is_active(o)) packed.push_back(o);
    }
    std::reverse(packed.begin(), packed.end());
    REQUIRE(mac_cycle(packed, SqueezePolicy(4)).contribution == base);
  }
}
