#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include "nbsmt/model.hpp"
#include "nbsmt/tensor.hpp"

namespace nbsmt {

enum class DatasetFormat { kMnistIdx, kCifar10Bin };

DatasetFormat parse_dataset_format(std::string_view name);

struct LabeledDataset {
  Tensor images;  // N,C,H,W, normalized
  std::vector<std::int32_t> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t image_elements() const;

  /// Copies images/labels at the given indices, in order.
  LabeledDataset subset(std::span<const std::int64_t> indices) const;
  /// Copies [begin, begin + count).
  LabeledDataset slice(std::int64_t begin, std::int64_t count) const;
};

/// Throws Error(kValidation) unless label count equals the batch extent and
/// every label lies in [0, num_classes).
void validate(const LabeledDataset& ds, int num_classes);

/// Reads an idx image/label file pair (optionally gzip-compressed). Images
/// are normalized with `norm`.
LabeledDataset load_mnist(const std::filesystem::path& images,
                          const std::filesystem::path& labels,
                          const InputNorm& norm);

/// Reads one or more CIFAR-10 binary batch files (1 label byte + 3072 pixel
/// bytes per record).
LabeledDataset load_cifar10(std::span<const std::filesystem::path> batches,
                            const InputNorm& norm);

/// Format dispatcher.
///  - MNIST: `path` is a prefix such that `<path>-images-idx3-ubyte[.gz]` and
///    `<path>-labels-idx1-ubyte[.gz]` exist (e.g. `data/t10k`).
///  - CIFAR-10: `path` is a single batch file or a directory whose `*.bin`
///    files are loaded in lexical order.
LabeledDataset load_dataset(const std::filesystem::path& path, DatasetFormat format,
                            const InputNorm& norm);

/// Deterministic sampling of `n` distinct images (partial Fisher-Yates over a
/// mt19937_64 stream seeded with `seed`).
LabeledDataset sample_calibration_subset(const LabeledDataset& ds, std::int64_t n,
                                         std::uint64_t seed);

/// Index list behind sample_calibration_subset.
std::vector<std::int64_t> sample_indices(std::int64_t population, std::int64_t n,
                                         std::uint64_t seed);

inline constexpr std::int64_t kDefaultCalibrationSize = 512;

}  // namespace nbsmt
