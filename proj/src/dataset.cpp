#include "nbsmt/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <random>

#include "nbsmt/error.hpp"

namespace nbsmt {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr std::int64_t kCifarSide = 32;
constexpr std::int64_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

// gzread passes uncompressed files through unchanged.
std::vector<unsigned char> read_maybe_gz(const fs::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  int n = 0;
  while ((n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  int err = Z_OK;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_STREAM_END)) {
    throw Error(ErrorKind::kFormat, "corrupt compressed stream in " + path.string() + ": " + msg);
  }
  return out;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

fs::path resolve(const fs::path& base) {
  if (fs::exists(base)) return base;
  fs::path gz = base;
  gz += ".gz";
  if (fs::exists(gz)) return gz;
  throw Error(ErrorKind::kIo, "missing dataset file " + base.string() + "[.gz]");
}

void normalize_into(std::span<const unsigned char> pixels, std::int64_t channels, std::int64_t plane,
                    const InputNorm& norm, std::span<float> out) {
  for (std::int64_t c = 0; c < channels; ++c) {
    const float mean = norm.mean.at(static_cast<std::size_t>(c));
    const float sd = norm.std.at(static_cast<std::size_t>(c));
    for (std::int64_t i = 0; i < plane; ++i) {
      const auto idx = static_cast<std::size_t>(c * plane + i);
      out[idx] = (static_cast<float>(pixels[idx]) / 255.0f - mean) / sd;
    }
  }
}

}  // namespace

DatasetFormat parse_dataset_format(std::string_view name) {
  if (name == "mnist-idx" || name == "mnist") return DatasetFormat::kMnistIdx;
  if (name == "cifar10-bin" || name == "cifar10") return DatasetFormat::kCifar10Bin;
  throw Error(ErrorKind::kInvalidArgument, "unknown dataset format '" + std::string(name) + "'");
}

std::int64_t LabeledDataset::image_elements() const {
  return images.rank() == 4 ? images.dim(1) * images.dim(2) * images.dim(3) : 0;
}

LabeledDataset LabeledDataset::subset(std::span<const std::int64_t> indices) const {
  const auto per = image_elements();
  LabeledDataset out;
  out.images = Tensor({static_cast<std::int64_t>(indices.size()), images.dim(1), images.dim(2), images.dim(3)});
  out.labels.reserve(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const auto i = indices[j];
    if (i < 0 || i >= size()) throw Error(ErrorKind::kInvalidArgument, "dataset index out of range");
    std::copy_n(images.data.begin() + i * per, per, out.images.data.begin() + static_cast<std::int64_t>(j) * per);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

LabeledDataset LabeledDataset::slice(std::int64_t begin, std::int64_t count) const {
  if (begin < 0 || count < 0 || begin + count > size()) {
    throw Error(ErrorKind::kInvalidArgument, "dataset slice out of range");
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) idx[static_cast<std::size_t>(i)] = begin + i;
  return subset(idx);
}

void validate(const LabeledDataset& ds, int num_classes) {
  if (ds.images.rank() != 4 || ds.images.dim(0) != ds.size()) {
    throw Error(ErrorKind::kValidation, "label count " + std::to_string(ds.size()) +
                                            " does not match image batch " + shape_to_string(ds.images.shape));
  }
  for (auto l : ds.labels) {
    if (l < 0 || l >= num_classes) {
      throw Error(ErrorKind::kValidation, "label " + std::to_string(l) + " outside [0," +
                                              std::to_string(num_classes) + ")");
    }
  }
}

LabeledDataset load_mnist(const fs::path& images, const fs::path& labels, const InputNorm& norm) {
  const auto img = read_maybe_gz(images);
  const auto lab = read_maybe_gz(labels);
  if (img.size() < 16 || be32(img, 0) != kIdxImagesMagic) {
    throw Error(ErrorKind::kFormat, "bad idx image magic in " + images.string());
  }
  if (lab.size() < 8 || be32(lab, 0) != kIdxLabelsMagic) {
    throw Error(ErrorKind::kFormat, "bad idx label magic in " + labels.string());
  }
  const std::int64_t n = be32(img, 4);
  const std::int64_t rows = be32(img, 8);
  const std::int64_t cols = be32(img, 12);
  if (static_cast<std::int64_t>(img.size()) != 16 + n * rows * cols) {
    throw Error(ErrorKind::kFormat, "truncated idx image file " + images.string());
  }
  if (be32(lab, 4) != n || static_cast<std::int64_t>(lab.size()) != 8 + n) {
    throw Error(ErrorKind::kFormat, "idx label file " + labels.string() + " does not match image count");
  }
  if (norm.mean.size() != 1 || norm.std.size() != 1) {
    throw Error(ErrorKind::kInvalidArgument, "MNIST needs single-channel normalization");
  }
  LabeledDataset ds;
  ds.images = Tensor({n, 1, rows, cols});
  normalize_into(std::span(img).subspan(16), 1, n * rows * cols, norm, ds.images.data);
  ds.labels.assign(lab.begin() + 8, lab.end());
  validate(ds, 10);
  return ds;
}

LabeledDataset load_cifar10(std::span<const fs::path> batches, const InputNorm& norm) {
  if (norm.mean.size() != 3 || norm.std.size() != 3) {
    throw Error(ErrorKind::kInvalidArgument, "CIFAR-10 needs three-channel normalization");
  }
  std::vector<std::vector<unsigned char>> raws;
  std::int64_t n = 0;
  for (const auto& p : batches) {
    auto raw = read_maybe_gz(p);
    if (raw.empty() || raw.size() % kCifarRecord != 0) {
      throw Error(ErrorKind::kFormat, "truncated CIFAR-10 batch " + p.string());
    }
    n += static_cast<std::int64_t>(raw.size()) / kCifarRecord;
    raws.push_back(std::move(raw));
  }
  LabeledDataset ds;
  ds.images = Tensor({n, 3, kCifarSide, kCifarSide});
  ds.labels.reserve(static_cast<std::size_t>(n));
  constexpr std::int64_t per = kCifarRecord - 1;
  std::int64_t i = 0;
  for (const auto& raw : raws) {
    for (std::size_t off = 0; off < raw.size(); off += kCifarRecord, ++i) {
      if (raw[off] > 9) throw Error(ErrorKind::kFormat, "CIFAR-10 label byte out of range");
      ds.labels.push_back(raw[off]);
      normalize_into(std::span(raw).subspan(off + 1, per), 3, kCifarSide * kCifarSide, norm,
                     std::span(ds.images.data).subspan(static_cast<std::size_t>(i * per), per));
    }
  }
  validate(ds, 10);
  return ds;
}

LabeledDataset load_dataset(const fs::path& path, DatasetFormat format, const InputNorm& norm) {
  if (format == DatasetFormat::kMnistIdx) {
    fs::path images = path;
    images += "-images-idx3-ubyte";
    fs::path labels = path;
    labels += "-labels-idx1-ubyte";
    return load_mnist(resolve(images), resolve(labels), norm);
  }
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".bin") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error(ErrorKind::kIo, "no *.bin batches in " + path.string());
  } else {
    files.push_back(resolve(path));
  }
  return load_cifar10(files, norm);
}

std::vector<std::int64_t> sample_indices(std::int64_t population, std::int64_t n, std::uint64_t seed) {
  if (n < 0 || n > population) {
    throw Error(ErrorKind::kInvalidArgument, "cannot sample " + std::to_string(n) + " of " +
                                                 std::to_string(population) + " items without replacement");
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(population));
  for (std::int64_t i = 0; i < population; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  // Rejection sampling on raw engine output keeps draws identical across
  // standard libraries.
  for (std::int64_t i = 0; i < n; ++i) {
    const auto span = static_cast<std::uint64_t>(population - i);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t r = rng();
    while (r >= limit) r = rng();
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(i + static_cast<std::int64_t>(r % span))]);
  }
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

LabeledDataset sample_calibration_subset(const LabeledDataset& ds, std::int64_t n, std::uint64_t seed) {
  return ds.subset(sample_indices(ds.size(), n, seed));
}

}  // namespace nbsmt
