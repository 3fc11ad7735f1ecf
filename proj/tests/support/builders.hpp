#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "nbsmt/dataset.hpp"
#include "nbsmt/model.hpp"

namespace testing {

inline nbsmt::Tensor random_tensor(nbsmt::Shape shape, std::mt19937_64& rng, float lo, float hi) {
  nbsmt::Tensor t(std::move(shape));
  std::uniform_real_distribution<float> d(lo, hi);
  for (auto& v : t.data) v = d(rng);
  return t;
}

inline nbsmt::Layer conv(std::string name, int in, int out, int k, int pad, std::mt19937_64& rng) {
  nbsmt::Conv2d c;
  c.weight = random_tensor({out, in, k, k}, rng, -0.5f, 0.5f);
  c.bias = random_tensor({out}, rng, -0.1f, 0.1f);
  c.padding = pad;
  return {std::move(name), c, false};
}

inline nbsmt::Layer batchnorm(std::string name, int ch, std::mt19937_64& rng) {
  nbsmt::BatchNormParams p;
  p.gamma = random_tensor({ch}, rng, 0.5f, 1.5f);
  p.beta = random_tensor({ch}, rng, -0.2f, 0.2f);
  p.running_mean = random_tensor({ch}, rng, -0.3f, 0.3f);
  p.running_var = random_tensor({ch}, rng, 0.5f, 2.0f);
  return {std::move(name), nbsmt::BatchNorm{p}, false};
}

// Miniature DeskCNN-shaped graph: 1x8x8 input, three BN'd convs, one FC.
inline nbsmt::LayerGraph tiny_graph(std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  nbsmt::LayerGraph g;
  g.arch = "tiny";
  g.input_shape = {1, 8, 8};
  g.num_classes = 4;
  g.input_norm = {{0.5f}, {0.25f}};
  g.layers.push_back(conv("conv1", 1, 4, 3, 1, rng));
  g.layers.push_back({"relu1", nbsmt::ReLU{}, false});
  g.layers.push_back(conv("conv2", 4, 6, 3, 1, rng));
  g.layers.push_back(batchnorm("bn2", 6, rng));
  g.layers.push_back({"relu2", nbsmt::ReLU{}, false});
  g.layers.push_back({"pool2", nbsmt::MaxPool{2, 2}, false});
  g.layers.push_back(conv("conv3", 6, 6, 3, 1, rng));
  g.layers.push_back(batchnorm("bn3", 6, rng));
  g.layers.push_back({"relu3", nbsmt::ReLU{}, false});
  g.layers.push_back(conv("conv4", 6, 5, 3, 1, rng));
  g.layers.push_back(batchnorm("bn4", 5, rng));
  g.layers.push_back({"relu4", nbsmt::ReLU{}, false});
  nbsmt::FullyConnected fc;
  fc.weight = random_tensor({4, 5 * 4 * 4}, rng, -0.3f, 0.3f);
  fc.bias = random_tensor({4}, rng, -0.1f, 0.1f);
  g.layers.push_back({"fc", fc, false});
  nbsmt::apply_default_exemptions(g);
  return g;
}

// Random pixel images normalized like the graph expects; labels cycle 0..C-1.
inline nbsmt::LabeledDataset tiny_dataset(const nbsmt::LayerGraph& g, std::int64_t n,
                                          std::uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255);
  nbsmt::LabeledDataset ds;
  ds.images = nbsmt::Tensor({n, g.input_shape[0], g.input_shape[1], g.input_shape[2]});
  for (auto& v : ds.images.data) {
    v = (static_cast<float>(px(rng)) / 255.0f - g.input_norm.mean[0]) / g.input_norm.std[0];
  }
  for (std::int64_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<std::int32_t>(i % g.num_classes));
  return ds;
}

inline std::filesystem::path fixture_dir() { return NBSMT_FIXTURE_DIR; }

// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nbsmt_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
