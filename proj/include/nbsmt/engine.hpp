#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbsmt/dataset.hpp"
#include "nbsmt/model.hpp"
#include "nbsmt/quantizer.hpp"
#include "nbsmt/sysmt_gemm.hpp"

namespace nbsmt {

enum class ExecutionKind { kFloat32, kQuantReference, kNbsmt };

struct ExecutionMode {
  ExecutionKind kind = ExecutionKind::kFloat32;
  ThreadConfig threads;  // used by kNbsmt only
  /// BatchNorm layers normalize with the statistics of the current batch
  /// (train-mode semantics) instead of their running statistics.
  bool stat_collection = false;

  static ExecutionMode float32() { return {}; }
  static ExecutionMode quant_reference() { return {ExecutionKind::kQuantReference, {}, false}; }
  static ExecutionMode nbsmt(ThreadConfig t) { return {ExecutionKind::kNbsmt, std::move(t), false}; }

  std::string label() const;
};

struct ForwardHooks {
  /// Float tensor entering conv/FC layer `index` (before quantization).
  std::function<void(std::size_t index, const Tensor& input)> on_gemm_input;
  /// Output of every layer, in the float domain.
  std::function<void(std::size_t index, const Tensor& output)> on_layer_output;
  /// Per-channel batch mean and unbiased variance seen by BN layer `index`
  /// (stat_collection only).
  std::function<void(std::size_t index, std::span<const double> mean,
                     std::span<const double> unbiased_var)>
      on_batch_stats;
};

struct ForwardResult {
  Tensor logits;  // N x num_classes
  CycleReport cycles;
};

struct EngineOptions {
  ArrayConfig array;
  std::int64_t batch_size = 100;
  int jobs = 1;
};

/// Graph + quantization prepared for repeated execution in one mode.
/// Immutable after construction; `run` may be called concurrently.
class InferenceSession {
 public:
  InferenceSession(const LayerGraph& graph, const QuantParams* qparams, ExecutionMode mode,
                   ArrayConfig array = {});
  ~InferenceSession();
  InferenceSession(InferenceSession&&) noexcept;
  InferenceSession& operator=(InferenceSession&&) noexcept;

  ForwardResult run(const Tensor& batch, const ForwardHooks& hooks = {}) const;

  const ExecutionMode& mode() const;
  /// Effective thread count per conv/FC layer after exemptions.
  int threads_for(const std::string& layer) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

ForwardResult forward(const LayerGraph& graph, const QuantParams* qparams, const Tensor& batch,
                      const ExecutionMode& mode, const ForwardHooks& hooks = {},
                      const ArrayConfig& array = {});

/// Index of the largest value; ties resolve to the lowest index.
int argmax(std::span<const float> row);

struct EvalResult {
  double top1 = 0.0;
  std::int64_t correct = 0;
  std::int64_t total = 0;
  CycleReport cycles;
};

/// Batches are fixed-size slices in dataset order; `jobs` only changes
/// scheduling, never results.
EvalResult evaluate(const LayerGraph& graph, const QuantParams* qparams, const LabeledDataset& ds,
                    const ExecutionMode& mode, const EngineOptions& options = {});

double top1_accuracy(const LayerGraph& graph, const QuantParams* qparams,
                     const LabeledDataset& ds, const ExecutionMode& mode,
                     const EngineOptions& options = {});

/// Folds every BatchNorm into the preceding conv. Throws Error(kValidation)
/// when a BN does not directly follow a conv.
LayerGraph fold_batchnorm(const LayerGraph& graph);

nlohmann::json evaluation_report(const EvalResult& result, const ExecutionMode& mode);

}  // namespace nbsmt
