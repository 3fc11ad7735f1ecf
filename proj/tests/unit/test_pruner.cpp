#include <random>

#include "doctest.h"
#include "nbsmt/engine.hpp"
#include "nbsmt/error.hpp"
#include "nbsmt/pruner.hpp"
#include "support/builders.hpp"

using namespace nbsmt;

TEST_CASE("magnitude pruning example") {
  Tensor w({4}, {0.1f, -0.5f, 0.3f, 0.05f});
  prune_by_magnitude(w, 0.5);
  CHECK(w.data == std::vector<float>{0.0f, -0.5f, 0.3f, 0.0f});
  Tensor same({3}, {1.0f, 2.0f, 3.0f});
  prune_by_magnitude(same, 0.0);
  CHECK(same.data == std::vector<float>{1.0f, 2.0f, 3.0f});
  CHECK_THROWS_AS(prune_by_magnitude(same, 1.0), Error);
  CHECK_THROWS_AS(prune_by_magnitude(same, -0.1), Error);
}

TEST_CASE("ties are pruned in index order") {
  Tensor w({4}, {0.2f, -0.2f, 0.2f, 1.0f});
  prune_by_magnitude(w, 0.5);
  CHECK(w.data == std::vector<float>{0.0f, 0.0f, 0.2f, 1.0f});
}

TEST_CASE("graph pruning and sparsity report") {
  auto g = testing::tiny_graph();
  auto dense = sparsity_report(g);
  for (const auto& s : dense) CHECK(s.float_fraction() < 0.01);

  auto p = magnitude_prune(g, 0.4);
  CHECK(bit_equal(std::get<Conv2d>(p.layer("conv1").op).weight, std::get<Conv2d>(g.layer("conv1").op).weight));
  auto ds = testing::tiny_dataset(p, 16);
  auto qp = calibrate(p, ds);
  for (const auto& s : sparsity_report(p, &qp)) {
    if (!s.eligible) continue;
    CHECK(s.float_fraction() >= 0.4);
    REQUIRE(s.quant_fraction().has_value());
    CHECK(*s.quant_fraction() >= s.float_fraction());
  }
  auto twice = magnitude_prune(p, 0.4);
  CHECK(bit_equal(twice, p));
}

TEST_CASE("post-ReLU activation sparsity is a fraction") {
  auto g = testing::tiny_graph();
  auto ds = testing::tiny_dataset(g, 8);
  ForwardHooks hooks;
  std::vector<double> fractions;
  hooks.on_layer_output = [&](std::size_t i, const Tensor& t) {
    if (std::holds_alternative<ReLU>(g.layers[i].op)) fractions.push_back(zero_fraction(t));
  };
  forward(g, nullptr, ds.images, ExecutionMode::float32(), hooks);
  CHECK(fractions.size() == 4);
  for (double f : fractions) CHECK((f >= 0.0 && f <= 1.0));
}

TEST_CASE("pruning lowers collisions across seeds") {
  int lower = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto g = testing::tiny_graph(seed);
    auto ds = testing::tiny_dataset(g, 32, seed);
    auto qp = calibrate(g, ds);
    auto p = magnitude_prune(g, 0.4);
    auto mode = ExecutionMode::nbsmt(ThreadConfig::uniform(4));
    auto rd = forward(g, &qp, ds.images, mode).cycles;
    // pruning keeps max|w|, so the dense quantization still applies
    auto rp = forward(p, &qp, ds.images, mode).cycles;
    double cd = 0, cp = 0;
    for (const auto& name : g.eligible_layers()) {
      cd += rd.find(name)->collision_rate();
      cp += rp.find(name)->collision_rate();
    }
    lower += cp < cd;
  }
  CHECK(lower == 5);
}
