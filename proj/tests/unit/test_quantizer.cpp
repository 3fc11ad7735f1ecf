#include <cmath>
#include <random>

#include "doctest.h"
#include "nbsmt/quantizer.hpp"
#include "support/builders.hpp"

using namespace nbsmt;

TEST_CASE("weight scales") {
  CHECK(weight_scale(1.27f) == doctest::Approx(0.01f));
  CHECK(weight_scale(0.0f) == kScaleFloor);
  Tensor w({2, 3}, {0.0f, 0.0f, 0.0f, 1.0f, -2.54f, 0.5f});
  const float scales[] = {weight_scale(0.0f), weight_scale(2.54f)};
  auto q = quantize_weights(w, scales);
  CHECK(q.data[0] == 0);
  CHECK(q.data[4] == -127);
  CHECK(std::isfinite(dequantize(q).data[0]));
}

TEST_CASE("activation params") {
  auto p = activation_params(0.0f, 5.1f, true);
  CHECK(p.act_scale == 0.02f);
  CHECK(p.act_zero_point == 0);
  auto s = activation_params(-1.3f, 5.1f, true);
  CHECK(s.act_zero_point == 0);
  auto signed_range = activation_params(-1.0f, 1.55f, false);
  CHECK(signed_range.act_scale == doctest::Approx(0.01f));
  CHECK(signed_range.act_zero_point == 100);
  auto positive_only = activation_params(2.0f, 5.1f, false);
  CHECK(positive_only.act_zero_point == 0);
  CHECK(positive_only.act_scale == 0.02f);
  auto empty = activation_params(0.0f, 0.0f, true);
  CHECK(empty.act_scale == kScaleFloor);
}

TEST_CASE("scalar quantization") {
  CHECK(quantize_weight_value(0.635f, 0.01f) == 64);
  CHECK(quantize_weight_value(-0.635f, 0.01f) == -64);
  CHECK(quantize_weight_value(-1.27f, 0.01f) == -127);
  CHECK(quantize_weight_value(-5.0f, 0.01f) == -127);
  CHECK(quantize_weight_value(0.0f, 0.01f) == 0);
  CHECK(quantize_activation_value(2.55f, 0.02f, 0) == 128);
  CHECK(quantize_activation_value(-1.0f, 0.02f, 0) == 0);
  CHECK(quantize_activation_value(10.0f, 0.02f, 0) == 255);
}

TEST_CASE("dequantization") {
  QWeights w{{1, 1}, {64}, {0.01f}};
  CHECK(dequantize(w).data[0] == doctest::Approx(0.64f));
  QActivations a{{1}, {10}, 0.5f, 10};
  CHECK(dequantize(a).data[0] == 0.0f);
}

TEST_CASE("activation round trip error is at most half a step") {
  for (auto [lo, hi, nonneg] : {std::tuple{0.0f, 5.1f, true}, std::tuple{-2.0f, 3.0f, false},
                                std::tuple{-0.7f, 0.01f, false}, std::tuple{0.0f, 123.0f, true}}) {
    auto p = activation_params(lo, hi, nonneg);
    float lo_eff = nonneg ? 0.0f : std::min(lo, 0.0f);
    for (int i = 0; i <= 20000; ++i) {
      float x = lo_eff + (hi - lo_eff) * static_cast<float>(i) / 20000.0f;
      auto q = quantize_activation_value(x, p.act_scale, p.act_zero_point);
      float back = (static_cast<int>(q) - p.act_zero_point) * p.act_scale;
      REQUIRE(std::fabs(back - x) <= p.act_scale / 2 * (1 + 1e-4f) + 1e-6f);
    }
  }
}

TEST_CASE("weight round trip error and symmetry") {
  std::mt19937_64 rng(5);
  auto w = testing::random_tensor({8, 3, 3, 3}, rng, -1.0f, 1.0f);
  std::vector<float> scales(8);
  for (int o = 0; o < 8; ++o) {
    float m = 0;
    for (int i = 0; i < 27; ++i) m = std::max(m, std::fabs(w.data[o * 27 + i]));
    scales[o] = weight_scale(m);
  }
  auto q = quantize_weights(w, scales);
  Tensor neg = w;
  for (auto& v : neg.data) v = -v;
  auto qn = quantize_weights(neg, scales);
  auto back = dequantize(q);
  for (std::size_t i = 0; i < w.size(); ++i) {
    float s = scales[i / 27];
    CHECK(std::fabs(back.data[i] - w.data[i]) <= s / 2 * (1 + 1e-5f));
    CHECK(qn.data[i] == -q.data[i]);
    CHECK(q.data[i] >= -127);
  }
}

TEST_CASE("calibration") {
  auto g = testing::tiny_graph();
  auto ds = testing::tiny_dataset(g, 40);
  auto q1 = calibrate(g, ds, {16});
  auto q2 = calibrate(g, ds, {7});
  CHECK(q1 == q2);
  CHECK(q1.layers.size() == 5);
  CHECK(has_nonnegative_producer(g, *g.index_of("conv2")));
  CHECK(has_nonnegative_producer(g, *g.index_of("conv3")));
  CHECK_FALSE(has_nonnegative_producer(g, *g.index_of("conv1")));
  CHECK(q1.at("conv1").act_zero_point > 0);
  CHECK(q1.at("conv3").act_zero_point == 0);
  CHECK(q1.at("conv2").weight_scales.size() == 6);

  auto path = testing::scratch_dir("qp") / "q.json";
  save_quant_params(q1, path);
  CHECK(load_quant_params(path) == q1);
}
