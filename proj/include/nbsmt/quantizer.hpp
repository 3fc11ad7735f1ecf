#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbsmt/dataset.hpp"
#include "nbsmt/model.hpp"
#include "nbsmt/tensor.hpp"

namespace nbsmt {

inline constexpr float kScaleFloor = 1e-8f;
inline constexpr int kWeightQMax = 127;
inline constexpr int kActQMax = 255;

/// Unsigned 8-bit activations with one affine (scale, zero_point) per tensor.
struct QActivations {
  Shape shape;
  std::vector<std::uint8_t> data;
  float scale = 1.0f;
  int zero_point = 0;
};

/// Symmetric signed 8-bit weights, one scale per output channel (dim 0),
/// zero-point fixed at 0. Values stay within [-127, 127].
struct QWeights {
  Shape shape;
  std::vector<std::int8_t> data;
  std::vector<float> scales;

  std::int64_t channels() const { return shape.at(0); }
  std::int64_t per_channel() const;
};

struct LayerQuant {
  float act_scale = 1.0f;
  int act_zero_point = 0;
  std::vector<float> weight_scales;

  friend bool operator==(const LayerQuant&, const LayerQuant&) = default;
};

/// Keyed by conv/FC layer name.
struct QuantParams {
  std::map<std::string, LayerQuant> layers;

  const LayerQuant& at(const std::string& name) const;
  bool contains(const std::string& name) const { return layers.count(name) != 0; }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

// Scalar kernels.
std::int8_t quantize_weight_value(float w, float scale);
std::uint8_t quantize_activation_value(float a, float scale, int zero_point);

/// Scale for a symmetric channel: max|w| / 127, floored.
float weight_scale(float max_abs);

/// Affine params for an observed activation range. The range is widened to
/// include 0; `nonnegative_producer` clamps `lo` to 0 first (ReLU inputs).
LayerQuant activation_params(float lo, float hi, bool nonnegative_producer);

QWeights quantize_weights(const Tensor& w, std::span<const float> scales);
QActivations quantize_activations(const Tensor& a, float scale, int zero_point);
Tensor dequantize(const QWeights& q);
Tensor dequantize(const QActivations& q);

struct CalibrationOptions {
  std::int64_t batch_size = 64;
};

/// Float forward passes over `subset` collecting min/max at every conv/FC
/// input, plus per-channel weight scales.
QuantParams calibrate(const LayerGraph& graph, const LabeledDataset& subset,
                      const CalibrationOptions& options = {});

/// True when every path into layer `index` ends in a ReLU, possibly followed
/// by max-pooling.
bool has_nonnegative_producer(const LayerGraph& graph, std::size_t index);

void to_json(nlohmann::json& j, const QuantParams& q);
void from_json(const nlohmann::json& j, QuantParams& q);
void save_quant_params(const QuantParams& q, const std::filesystem::path& path);
QuantParams load_quant_params(const std::filesystem::path& path);

}  // namespace nbsmt
