#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbsmt/bn_recalib.hpp"
#include "nbsmt/dataset.hpp"
#include "nbsmt/engine.hpp"
#include "nbsmt/model.hpp"
#include "nbsmt/quantizer.hpp"
#include "nbsmt/sysmt_gemm.hpp"

namespace nbsmt {

enum class SweepStrategy {
  kFlipOneTo2T,  // all-4T plus each eligible layer decelerated to 2T
  kFlipOneTo1T,  // all-4T plus each eligible layer decelerated to 1T
  kExhaustive,   // all-4T with up to `max_flips` layers moved to 2T or 1T
  kExplicit,
};

SweepStrategy parse_sweep_strategy(std::string_view name);

struct EnumerateOptions {
  SweepStrategy strategy = SweepStrategy::kFlipOneTo2T;
  int max_flips = 1;
  std::vector<ThreadConfig> explicit_configs;
  std::int64_t max_configs = 4096;
};

/// Number of configs kExhaustive would emit for `eligible` layers.
std::int64_t exhaustive_config_count(std::int64_t eligible, int max_flips);

/// Deterministic ordering. Every config spells out each eligible layer
/// explicitly; exempt layers are pinned to 1T.
std::vector<ThreadConfig> enumerate_configs(const LayerGraph& graph,
                                            const EnumerateOptions& options);

struct SweepPoint {
  ThreadConfig config;
  bool recalibrated = false;
  double speedup = 1.0;
  double top1 = 0.0;
  double accuracy_decrease = 0.0;  // percentage points below the FP32 top-1
  CycleReport cycles;
};

struct SweepOptions {
  double fp32_top1 = 0.0;
  EngineOptions engine;
};

/// One point per config, in config order. With `with_recalib`, a fresh copy
/// of the graph is recalibrated under each config before evaluation.
std::vector<SweepPoint> run_sweep(const LayerGraph& graph, const QuantParams& qparams,
                                  const LabeledDataset& dataset,
                                  std::span<const ThreadConfig> configs, bool with_recalib,
                                  const RecalibPlan& plan, const SweepOptions& options);

/// `a` dominates `b`: speedup >= and decrease <=, strictly better in one.
bool dominates(double speedup_a, double decrease_a, double speedup_b, double decrease_b);
bool dominates(const SweepPoint& a, const SweepPoint& b);

/// Non-dominated points sorted by speedup ascending (then decrease).
std::vector<SweepPoint> pareto_front(std::span<const SweepPoint> points);

/// Two whitespace-separated columns: speedup accuracy_decrease.
void write_dat(std::span<const SweepPoint> points, const std::filesystem::path& path);

void to_json(nlohmann::json& j, const SweepPoint& p);

}  // namespace nbsmt
