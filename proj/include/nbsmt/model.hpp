#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "nbsmt/tensor.hpp"

namespace nbsmt {

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;

  std::int64_t channels() const { return static_cast<std::int64_t>(gamma.size()); }

  friend bool operator==(const BatchNormParams&, const BatchNormParams&) = default;
};

struct Conv2d {
  Tensor weight;  // O,I,Kh,Kw
  Tensor bias;    // O
  int stride = 1;
  int padding = 0;

  std::int64_t out_channels() const { return weight.dim(0); }
  std::int64_t in_channels() const { return weight.dim(1); }
  std::int64_t kernel_h() const { return weight.dim(2); }
  std::int64_t kernel_w() const { return weight.dim(3); }

  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct BatchNorm {
  BatchNormParams params;
  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

struct MaxPool {
  int kernel = 2;
  int stride = 2;
  friend bool operator==(const MaxPool&, const MaxPool&) = default;
};

/// Consumes its input flattened in C,H,W order.
struct FullyConnected {
  Tensor weight;  // O,I
  Tensor bias;    // O

  friend bool operator==(const FullyConnected&, const FullyConnected&) = default;
};

using LayerOp = std::variant<Conv2d, BatchNorm, ReLU, MaxPool, FullyConnected>;

struct Layer {
  std::string name;
  LayerOp op;
  bool nbsmt_exempt = false;

  bool is_conv() const { return std::holds_alternative<Conv2d>(op); }
  bool is_fc() const { return std::holds_alternative<FullyConnected>(op); }
  bool is_batchnorm() const { return std::holds_alternative<BatchNorm>(op); }
  /// Conv/FC layers are the ones executed as GEMMs.
  bool is_gemm() const { return is_conv() || is_fc(); }
  std::string_view kind() const;

  friend bool operator==(const Layer&, const Layer&) = default;
};

/// Per-channel input normalization applied by dataset loaders:
/// x = (pixel / 255 - mean[c]) / std[c].
struct InputNorm {
  std::vector<float> mean;
  std::vector<float> std;

  friend bool operator==(const InputNorm&, const InputNorm&) = default;
};

struct LayerGraph {
  std::string arch;
  Shape input_shape;  // C,H,W of one image
  int num_classes = 0;
  InputNorm input_norm;
  std::vector<Layer> layers;

  const Layer& layer(const std::string& name) const;
  Layer& layer(const std::string& name);
  std::optional<std::size_t> index_of(const std::string& name) const;

  /// Names of conv layers that may run on the NB-SMT array.
  std::vector<std::string> eligible_layers() const;
  std::vector<std::string> batchnorm_layers() const;

  friend bool operator==(const LayerGraph&, const LayerGraph&) = default;
};

/// Marks the first convolution and every fully connected layer exempt and
/// clears the flag elsewhere.
void apply_default_exemptions(LayerGraph& graph);

/// Shape of the activation produced by each layer for a single image
/// (batch extent 1). Throws Error(kShapeMismatch) naming the offending layer.
std::vector<Shape> infer_shapes(const LayerGraph& graph);

/// Checks every LayerGraph invariant; throws Error naming the layer index.
void validate(const LayerGraph& graph);

/// Bitwise comparison of every tensor and hyperparameter.
bool bit_equal(const LayerGraph& a, const LayerGraph& b);

/// Model container: `<dir>/manifest.json` plus one little-endian float32
/// blob per tensor, each recorded with its byte length and CRC-32.
LayerGraph load_model(const std::filesystem::path& dir);
void save_model(const LayerGraph& graph, const std::filesystem::path& dir);

}  // namespace nbsmt
