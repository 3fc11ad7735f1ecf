#include "nbsmt/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nbsmt/error.hpp"

namespace nbsmt {

void prune_by_magnitude(Tensor& weights, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw Error(ErrorKind::kInvalidArgument, "sparsity must lie in [0, 1)");
  const auto n = weights.size();
  const auto count = static_cast<std::size_t>(std::ceil(sparsity * static_cast<double>(n)));
  if (count == 0) return;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(weights.data[a]) < std::abs(weights.data[b]);
  });
  for (std::size_t i = 0; i < count; ++i) weights.data[order[i]] = 0.0f;
}

LayerGraph magnitude_prune(const LayerGraph& graph, double sparsity) {
  LayerGraph out = graph;
  for (auto& l : out.layers) {
    if (auto* c = std::get_if<Conv2d>(&l.op); c && !l.nbsmt_exempt) prune_by_magnitude(c->weight, sparsity);
  }
  return out;
}

double zero_fraction(const Tensor& t) {
  if (t.size() == 0) return 0.0;
  const auto zeros = std::count(t.data.begin(), t.data.end(), 0.0f);
  return static_cast<double>(zeros) / static_cast<double>(t.size());
}

double LayerSparsity::float_fraction() const {
  return elements == 0 ? 0.0 : static_cast<double>(float_zeros) / static_cast<double>(elements);
}

std::optional<double> LayerSparsity::quant_fraction() const {
  if (!quant_zeros) return std::nullopt;
  return elements == 0 ? 0.0 : static_cast<double>(*quant_zeros) / static_cast<double>(elements);
}

std::vector<LayerSparsity> sparsity_report(const LayerGraph& graph, const QuantParams* qparams) {
  std::vector<LayerSparsity> out;
  for (const auto& l : graph.layers) {
    if (!l.is_gemm()) continue;
    const Tensor& w = l.is_conv() ? std::get<Conv2d>(l.op).weight : std::get<FullyConnected>(l.op).weight;
    LayerSparsity s;
    s.layer = l.name;
    s.eligible = l.is_conv() && !l.nbsmt_exempt;
    s.elements = static_cast<std::int64_t>(w.size());
    s.float_zeros = std::count(w.data.begin(), w.data.end(), 0.0f);
    if (qparams) {
      const auto q = quantize_weights(w, qparams->at(l.name).weight_scales);
      s.quant_zeros = std::count(q.data.begin(), q.data.end(), std::int8_t{0});
    }
    out.push_back(std::move(s));
  }
  return out;
}

void to_json(nlohmann::json& j, const LayerSparsity& s) {
  j = {{"layer", s.layer}, {"eligible", s.eligible}, {"elements", s.elements}, {"float_zero_fraction", s.float_fraction()}};
  if (auto q = s.quant_fraction()) j["quant_zero_fraction"] = *q;
}

}  // namespace nbsmt
