#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>

#include "doctest.h"
#include "nbsmt/dataset.hpp"
#include "nbsmt/error.hpp"
#include "support/builders.hpp"

using namespace nbsmt;

namespace {

const InputNorm kMnistNorm{{0.1307f}, {0.3081f}};

void put_be32(std::ofstream& f, std::uint32_t v) {
  char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  f.write(b, 4);
}

// Writes a tiny raw idx pair, returns the prefix.
std::filesystem::path write_idx(const std::filesystem::path& dir, std::uint32_t image_magic,
                                std::uint32_t label_magic, int n, int pixels_written) {
  auto prefix = dir / "tiny";
  std::ofstream img(prefix.string() + "-images-idx3-ubyte", std::ios::binary);
  put_be32(img, image_magic);
  put_be32(img, n);
  put_be32(img, 28);
  put_be32(img, 28);
  for (int i = 0; i < pixels_written; ++i) img.put(char(i % 256));
  std::ofstream lab(prefix.string() + "-labels-idx1-ubyte", std::ios::binary);
  put_be32(lab, label_magic);
  put_be32(lab, n);
  for (int i = 0; i < n; ++i) lab.put(char(i % 10));
  return prefix;
}

}  // namespace

TEST_CASE("MNIST test split shape and labels") {
  auto ds = load_dataset(testing::fixture_dir() / "mnist" / "t10k", DatasetFormat::kMnistIdx, kMnistNorm);
  CHECK(ds.size() == 10000);
  CHECK(ds.images.shape == Shape{10000, 1, 28, 28});
  CHECK(std::all_of(ds.labels.begin(), ds.labels.end(), [](int l) { return l >= 0 && l <= 9; }));
  std::set<int> seen(ds.labels.begin(), ds.labels.end());
  CHECK(seen.size() == 10);
  validate(ds, 10);
  // pixel 0 maps to -mean/std
  CHECK(ds.images.data[0] == doctest::Approx(-0.1307 / 0.3081).epsilon(1e-6));
}

TEST_CASE("raw idx files load and bad headers are rejected") {
  auto dir = testing::scratch_dir("idx");
  SUBCASE("valid") {
    auto p = write_idx(dir, 0x803, 0x801, 3, 3 * 784);
    auto ds = load_dataset(p, DatasetFormat::kMnistIdx, kMnistNorm);
    CHECK(ds.size() == 3);
    CHECK(ds.labels == std::vector<std::int32_t>{0, 1, 2});
  }
  SUBCASE("wrong image magic") {
    auto p = write_idx(dir, 0x804, 0x801, 3, 3 * 784);
    try {
      load_dataset(p, DatasetFormat::kMnistIdx, kMnistNorm);
      FAIL("expected a format error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kFormat);
    }
  }
  SUBCASE("wrong label magic") {
    auto p = write_idx(dir, 0x803, 0x803, 3, 3 * 784);
    CHECK_THROWS_AS(load_dataset(p, DatasetFormat::kMnistIdx, kMnistNorm), Error);
  }
  SUBCASE("truncated pixels") {
    auto p = write_idx(dir, 0x803, 0x801, 3, 3 * 784 - 1);
    CHECK_THROWS_AS(load_dataset(p, DatasetFormat::kMnistIdx, kMnistNorm), Error);
  }
}

TEST_CASE("CIFAR-10 batch records") {
  auto dir = testing::scratch_dir("cifar");
  {
    std::ofstream f(dir / "data_batch_1.bin", std::ios::binary);
    for (int r = 0; r < 4; ++r) {
      f.put(char(r));
      for (int i = 0; i < 3072; ++i) f.put(char((r + i) % 256));
    }
  }
  InputNorm norm{{0.5f, 0.5f, 0.5f}, {0.25f, 0.25f, 0.25f}};
  auto ds = load_dataset(dir, DatasetFormat::kCifar10Bin, norm);
  CHECK(ds.images.shape == Shape{4, 3, 32, 32});
  CHECK(ds.labels == std::vector<std::int32_t>{0, 1, 2, 3});
  CHECK(ds.images.data[3072] == doctest::Approx((1 / 255.0 - 0.5) / 0.25));
  {
    std::ofstream f(dir / "data_batch_1.bin", std::ios::binary | std::ios::app);
    f.put(1);
  }
  CHECK_THROWS_AS(load_dataset(dir, DatasetFormat::kCifar10Bin, norm), Error);
}

TEST_CASE("calibration sampling") {
  SUBCASE("n = population is a permutation") {
    auto idx = sample_indices(1000, 1000, 3);
    auto sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    for (std::int64_t i = 0; i < 1000; ++i) CHECK(sorted[i] == i);
  }
  SUBCASE("deterministic in seed") {
    CHECK(sample_indices(60000, 512, 9) == sample_indices(60000, 512, 9));
    CHECK(sample_indices(60000, 512, 9) != sample_indices(60000, 512, 10));
  }
  SUBCASE("without replacement") {
    auto idx = sample_indices(60000, 512, 1);
    std::set<std::int64_t> distinct(idx.begin(), idx.end());
    CHECK(distinct.size() == 512);
    CHECK(*distinct.rbegin() < 60000);
  }
  SUBCASE("too many") { CHECK_THROWS_AS(sample_indices(10, 11, 1), Error); }
  SUBCASE("subset copies rows in order") {
    auto g = testing::tiny_graph();
    auto ds = testing::tiny_dataset(g, 20);
    auto sub = sample_calibration_subset(ds, 5, 4);
    auto idx = sample_indices(20, 5, 4);
    for (int i = 0; i < 5; ++i) {
      CHECK(sub.labels[i] == ds.labels[idx[i]]);
      CHECK(sub.images.data[i * 64 + 13] == ds.images.data[idx[i] * 64 + 13]);
    }
  }
}

TEST_CASE("label validation") {
  auto g = testing::tiny_graph();
  auto ds = testing::tiny_dataset(g, 8);
  validate(ds, 4);
  ds.labels[3] = 4;
  CHECK_THROWS_AS(validate(ds, 4), Error);
}
