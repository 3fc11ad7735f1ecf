#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nbsmt/model.hpp"
#include "nbsmt/quantizer.hpp"
#include "nbsmt/squeeze_mac.hpp"

namespace nbsmt {

/// Output-stationary array geometry.
struct ArrayConfig {
  int rows = 32;
  int cols = 32;
};

/// Thread capacity per layer. Layers without an override use
/// `default_threads`; exempt layers are forced to 1 by the engine.
struct ThreadConfig {
  int default_threads = 1;
  std::map<std::string, int> per_layer;

  int threads_for(const std::string& layer) const;

  /// "4T" / "2" style uniform setting.
  static ThreadConfig uniform(int threads);
  static ThreadConfig parse(std::string_view uniform,
                            std::string_view per_layer_overrides = {});
  /// Compact label such as "4T" or "4T[conv2=2T]".
  std::string label() const;

  friend bool operator==(const ThreadConfig&, const ThreadConfig&) = default;
};

void validate_thread_count(int threads);

void to_json(nlohmann::json& j, const ThreadConfig& c);
void from_json(const nlohmann::json& j, ThreadConfig& c);

/// GEMM view of a convolution: activations M x K (row-major), weights K x N.
struct LoweredActivations {
  std::int64_t rows = 0;  // M = batch * out_h * out_w
  std::int64_t depth = 0; // K = Cin * Kh * Kw
  std::int64_t out_h = 0;
  std::int64_t out_w = 0;
  std::vector<std::uint8_t> data;
};

/// im2col with K ordered (c, kh, kw). Padding cells carry the zero-point.
LoweredActivations im2col_lower(const Conv2d& conv, const QActivations& input);

/// O,I,Kh,Kw (or O,I for FC) weights as a K x N matrix.
std::vector<std::int8_t> lower_weights(const QWeights& w);

std::int64_t ceil_div(std::int64_t a, std::int64_t b);

/// cycles = ceil(M/R) * ceil(N/C) * ceil(K/T).
std::int64_t layer_cycles(std::int64_t m, std::int64_t k, std::int64_t n,
                          const ArrayConfig& array, int threads);

struct GemmStats {
  std::int64_t mac_count = 0;         // M * N * K products
  std::int64_t mac_cycles = 0;        // M * N * ceil(K/T) shared-MAC cycles
  std::int64_t collision_cycles = 0;  // cycles with >= 2 active threads
  std::int64_t abs_error_sum = 0;     // sum |squeezed - exact| over products

  GemmStats& operator+=(const GemmStats& o);
};

struct GemmResult {
  std::vector<std::int32_t> output;  // M x N
  GemmStats stats;
};

/// Exact integer GEMM, 64-bit accumulation checked into int32.
std::vector<std::int32_t> reference_gemm(std::span<const std::uint8_t> a,
                                         std::span<const std::int8_t> w,
                                         std::int64_t m, std::int64_t k, std::int64_t n);

/// NB-SMT GEMM. Output (m, n) is processed ceil(K/T) cycles deep; cycle c
/// feeds thread i with K-index c*T + i. Throws Error(kOverflow) if an
/// accumulator leaves the int32 range.
GemmResult nbsmt_gemm(std::span<const std::uint8_t> a, std::span<const std::int8_t> w,
                      std::int64_t m, std::int64_t k, std::int64_t n, int threads);

/// Per-layer cycle accounting; mergeable across batches by summation.
struct LayerCycleEntry {
  std::string name;
  int threads = 1;
  bool exempt = false;
  std::int64_t m = 0;
  std::int64_t k = 0;
  std::int64_t n = 0;
  std::int64_t cycles = 0;
  std::int64_t baseline_cycles = 0;  // same GEMM at T = 1
  GemmStats stats;

  double collision_rate() const;
  /// Mean |squeezed - exact| per shared-MAC cycle.
  double mean_abs_squeeze_error() const;
};

struct CycleReport {
  std::vector<LayerCycleEntry> layers;  // execution order

  void add(const LayerCycleEntry& entry);  // sums into an entry of the same name
  void merge(const CycleReport& other);
  const LayerCycleEntry* find(std::string_view name) const;
  std::int64_t total_cycles() const;
  std::int64_t total_baseline_cycles() const;
};

/// Sum of baseline (all-1T) cycles over sum of configured cycles.
double speedup(const CycleReport& report);
double speedup(const CycleReport& configured, const CycleReport& baseline);

void to_json(nlohmann::json& j, const LayerCycleEntry& e);
void to_json(nlohmann::json& j, const CycleReport& r);

}  // namespace nbsmt
