#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbsmt/dataset.hpp"
#include "nbsmt/engine.hpp"
#include "nbsmt/model.hpp"
#include "nbsmt/quantizer.hpp"

// BatchNorm statistics recalibration: re-collect running mean/variance with
// forward passes executed in the (noisy) target mode. Weights, gamma and beta
// are never touched and labels are never read.

namespace nbsmt {

struct RecalibPlan {
  LabeledDataset source;  // only images are used
  std::int64_t batch_size = 64;
  std::int64_t num_batches = 100;
  float momentum = 0.1f;
  ExecutionMode mode = ExecutionMode::nbsmt(ThreadConfig::uniform(4));
  ArrayConfig array;
};

void validate(const RecalibPlan& plan);

/// Image indices of batch `b`: (b * batch_size + j) mod source size.
std::vector<std::int64_t> recalib_batch_indices(const RecalibPlan& plan, std::int64_t b);

/// Running statistics held in double while a recalibration is in flight;
/// rounded to float32 only when stored back into the BN layer.
struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;

  static RunningStats from(const BatchNormParams& bn);
  void store(BatchNormParams& bn) const;
};

/// running <- (1 - m) * running + m * batch, for mean and variance.
void ema_update(RunningStats& stats, std::span<const double> batch_mean,
                std::span<const double> batch_unbiased_var, float momentum);
void ema_update(BatchNormParams& bn, std::span<const double> batch_mean,
                std::span<const double> batch_unbiased_var, float momentum);

struct BatchSnapshot {
  std::int64_t batch = 0;
  std::string layer;
  std::vector<float> running_mean;
  std::vector<float> running_var;
};

struct RecalibResult {
  LayerGraph graph;
  std::vector<BatchSnapshot> log;
};

RecalibResult recalibrate(const LayerGraph& graph, const QuantParams& qparams,
                          const RecalibPlan& plan);

struct StatDrift {
  std::string layer;
  double mean_delta = 0.0;  // L2 norm over channels
  double var_delta = 0.0;
};

/// Throws Error(kValidation) when the graphs' BN layers differ in name or
/// channel count.
std::vector<StatDrift> stat_drift(const LayerGraph& before, const LayerGraph& after);

void to_json(nlohmann::json& j, const BatchSnapshot& s);
void to_json(nlohmann::json& j, const StatDrift& d);

}  // namespace nbsmt
