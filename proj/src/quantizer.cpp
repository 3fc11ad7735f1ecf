#include "nbsmt/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "nbsmt/engine.hpp"
#include "nbsmt/error.hpp"

namespace nbsmt {

namespace {

float round_half_up(float x) {
  const float f = std::floor(x);
  return (x - f >= 0.5f) ? f + 1.0f : f;
}

}  // namespace

std::int64_t QWeights::per_channel() const {
  const auto ch = channels();
  return ch == 0 ? 0 : static_cast<std::int64_t>(data.size()) / ch;
}

const LayerQuant& QuantParams::at(const std::string& name) const {
  auto it = layers.find(name);
  if (it == layers.end()) throw Error(ErrorKind::kInvalidArgument, "no quantization parameters for layer '" + name + "'");
  return it->second;
}

std::int8_t quantize_weight_value(float w, float scale) {
  const float q = std::round(w / scale);  // ties away from zero
  return static_cast<std::int8_t>(std::clamp(q, -static_cast<float>(kWeightQMax), static_cast<float>(kWeightQMax)));
}

std::uint8_t quantize_activation_value(float a, float scale, int zero_point) {
  const float q = round_half_up(a / scale) + static_cast<float>(zero_point);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0f, static_cast<float>(kActQMax)));
}

float weight_scale(float max_abs) {
  return std::max(max_abs / static_cast<float>(kWeightQMax), kScaleFloor);
}

LayerQuant activation_params(float lo, float hi, bool nonnegative_producer) {
  if (nonnegative_producer) lo = 0.0f;
  lo = std::min(lo, 0.0f);
  hi = std::max(hi, 0.0f);
  LayerQuant q;
  q.act_scale = std::max((hi - lo) / static_cast<float>(kActQMax), kScaleFloor);
  q.act_zero_point = static_cast<int>(std::clamp(std::round(-lo / q.act_scale), 0.0f, static_cast<float>(kActQMax)));
  return q;
}

QWeights quantize_weights(const Tensor& w, std::span<const float> scales) {
  if (w.rank() < 1 || static_cast<std::int64_t>(scales.size()) != w.dim(0)) {
    throw Error(ErrorKind::kShapeMismatch, "need one weight scale per output channel of " + shape_to_string(w.shape));
  }
  QWeights q;
  q.shape = w.shape;
  q.scales.assign(scales.begin(), scales.end());
  q.data.resize(w.size());
  const auto per = static_cast<std::int64_t>(w.size()) / w.dim(0);
  for (std::int64_t o = 0; o < w.dim(0); ++o) {
    const float s = scales[static_cast<std::size_t>(o)];
    if (!(s > 0.0f)) throw Error(ErrorKind::kInvalidArgument, "weight scales must be positive");
    for (std::int64_t i = o * per; i < (o + 1) * per; ++i) {
      q.data[static_cast<std::size_t>(i)] = quantize_weight_value(w.data[static_cast<std::size_t>(i)], s);
    }
  }
  return q;
}

QActivations quantize_activations(const Tensor& a, float scale, int zero_point) {
  if (!(scale > 0.0f)) throw Error(ErrorKind::kInvalidArgument, "activation scale must be positive");
  QActivations q;
  q.shape = a.shape;
  q.scale = scale;
  q.zero_point = zero_point;
  q.data.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) q.data[i] = quantize_activation_value(a.data[i], scale, zero_point);
  return q;
}

Tensor dequantize(const QWeights& q) {
  Tensor t(q.shape);
  const auto per = q.per_channel();
  for (std::size_t i = 0; i < q.data.size(); ++i) {
    t.data[i] = q.scales[i / static_cast<std::size_t>(per)] * static_cast<float>(q.data[i]);
  }
  return t;
}

Tensor dequantize(const QActivations& q) {
  Tensor t(q.shape);
  for (std::size_t i = 0; i < q.data.size(); ++i) {
    t.data[i] = q.scale * static_cast<float>(static_cast<int>(q.data[i]) - q.zero_point);
  }
  return t;
}

bool has_nonnegative_producer(const LayerGraph& graph, std::size_t index) {
  for (std::size_t i = index; i-- > 0;) {
    const auto& op = graph.layers[i].op;
    if (std::holds_alternative<ReLU>(op)) return true;
    if (!std::holds_alternative<MaxPool>(op)) return false;
  }
  return false;
}

QuantParams calibrate(const LayerGraph& graph, const LabeledDataset& subset, const CalibrationOptions& options) {
  if (subset.size() == 0) throw Error(ErrorKind::kInvalidArgument, "calibration subset is empty");
  if (options.batch_size <= 0) throw Error(ErrorKind::kInvalidArgument, "calibration batch size must be positive");

  std::vector<float> lo(graph.layers.size(), std::numeric_limits<float>::infinity());
  std::vector<float> hi(graph.layers.size(), -std::numeric_limits<float>::infinity());
  ForwardHooks hooks;
  hooks.on_gemm_input = [&](std::size_t index, const Tensor& input) {
    const auto [mn, mx] = std::minmax_element(input.data.begin(), input.data.end());
    lo[index] = std::min(lo[index], *mn);
    hi[index] = std::max(hi[index], *mx);
  };
  InferenceSession session(graph, nullptr, ExecutionMode::float32());
  for (std::int64_t b = 0; b < subset.size(); b += options.batch_size) {
    const auto n = std::min(options.batch_size, subset.size() - b);
    session.run(subset.slice(b, n).images, hooks);
  }

  QuantParams qp;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& layer = graph.layers[i];
    if (!layer.is_gemm()) continue;
    LayerQuant q = activation_params(lo[i], hi[i], has_nonnegative_producer(graph, i));
    const Tensor& w = layer.is_conv() ? std::get<Conv2d>(layer.op).weight : std::get<FullyConnected>(layer.op).weight;
    const auto channels = w.dim(0);
    const auto per = static_cast<std::int64_t>(w.size()) / channels;
    for (std::int64_t o = 0; o < channels; ++o) {
      float max_abs = 0.0f;
      for (std::int64_t j = o * per; j < (o + 1) * per; ++j) {
        max_abs = std::max(max_abs, std::abs(w.data[static_cast<std::size_t>(j)]));
      }
      q.weight_scales.push_back(weight_scale(max_abs));
    }
    qp.layers.emplace(layer.name, std::move(q));
  }
  return qp;
}

void to_json(nlohmann::json& j, const QuantParams& q) {
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [name, lq] : q.layers) {
    layers[name] = {{"act_scale", lq.act_scale},
                    {"act_zero_point", lq.act_zero_point},
                    {"weight_scales", lq.weight_scales}};
  }
  j = {{"version", 1}, {"layers", std::move(layers)}};
}

void from_json(const nlohmann::json& j, QuantParams& q) {
  q.layers.clear();
  for (const auto& [name, lj] : j.at("layers").items()) {
    LayerQuant lq;
    lq.act_scale = lj.at("act_scale").get<float>();
    lq.act_zero_point = lj.at("act_zero_point").get<int>();
    lq.weight_scales = lj.at("weight_scales").get<std::vector<float>>();
    if (!(lq.act_scale > 0.0f) || lq.act_zero_point < 0 || lq.act_zero_point > kActQMax) {
      throw Error(ErrorKind::kValidation, "invalid activation parameters for layer '" + name + "'");
    }
    for (float s : lq.weight_scales) {
      if (!(s > 0.0f)) throw Error(ErrorKind::kValidation, "nonpositive weight scale for layer '" + name + "'");
    }
    q.layers.emplace(name, std::move(lq));
  }
}

void save_quant_params(const QuantParams& q, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out << nlohmann::json(q).dump(2) << '\n';
}

QuantParams load_quant_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in).get<QuantParams>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, "malformed quantization file " + path.string() + ": " + e.what());
  }
}

}  // namespace nbsmt
