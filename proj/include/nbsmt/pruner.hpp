#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbsmt/model.hpp"
#include "nbsmt/quantizer.hpp"

namespace nbsmt {

/// Zeroes the ceil(sparsity * n) smallest-magnitude elements; equal
/// magnitudes are pruned in flat index order.
void prune_by_magnitude(Tensor& weights, double sparsity);

/// One-shot magnitude pruning of every NB-SMT-eligible conv layer.
LayerGraph magnitude_prune(const LayerGraph& graph, double sparsity);

struct LayerSparsity {
  std::string layer;
  bool eligible = false;
  std::int64_t elements = 0;
  std::int64_t float_zeros = 0;
  std::optional<std::int64_t> quant_zeros;  // set when qparams are given

  double float_fraction() const;
  std::optional<double> quant_fraction() const;
};

std::vector<LayerSparsity> sparsity_report(const LayerGraph& graph,
                                           const QuantParams* qparams = nullptr);

double zero_fraction(const Tensor& t);

void to_json(nlohmann::json& j, const LayerSparsity& s);

}  // namespace nbsmt
