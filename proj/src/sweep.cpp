#include "nbsmt/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "nbsmt/error.hpp"

namespace nbsmt {

namespace {

ThreadConfig explicit_config(const std::vector<std::string>& eligible, int threads) {
  ThreadConfig c = ThreadConfig::uniform(1);
  for (const auto& name : eligible) c.per_layer[name] = threads;
  return c;
}

std::int64_t binomial(std::int64_t n, std::int64_t k) {
  if (k < 0 || k > n) return 0;
  std::int64_t r = 1;
  for (std::int64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// Visits every j-subset of [0, n) in lexicographic order.
template <typename F>
void for_each_combination(int n, int j, F&& f) {
  std::vector<int> idx(static_cast<std::size_t>(j));
  std::iota(idx.begin(), idx.end(), 0);
  while (true) {
    f(idx);
    int i = j - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - j + i) --i;
    if (i < 0) return;
    ++idx[static_cast<std::size_t>(i)];
    for (int t = i + 1; t < j; ++t) idx[static_cast<std::size_t>(t)] = idx[static_cast<std::size_t>(t - 1)] + 1;
  }
}

}  // namespace

SweepStrategy parse_sweep_strategy(std::string_view name) {
  if (name == "flip-one-to-2T" || name == "all-4T-flip-one-to-2T") return SweepStrategy::kFlipOneTo2T;
  if (name == "flip-one-to-1T" || name == "all-4T-flip-one-to-1T") return SweepStrategy::kFlipOneTo1T;
  if (name == "exhaustive") return SweepStrategy::kExhaustive;
  if (name == "explicit") return SweepStrategy::kExplicit;
  throw Error(ErrorKind::kInvalidArgument, "unknown sweep strategy '" + std::string(name) + "'");
}

std::int64_t exhaustive_config_count(std::int64_t eligible, int max_flips) {
  std::int64_t total = 0;
  for (std::int64_t j = 0; j <= std::min<std::int64_t>(max_flips, eligible); ++j) {
    total += binomial(eligible, j) * (std::int64_t{1} << j);
  }
  return total;
}

std::vector<ThreadConfig> enumerate_configs(const LayerGraph& graph, const EnumerateOptions& options) {
  const auto eligible = graph.eligible_layers();
  std::vector<ThreadConfig> out;
  switch (options.strategy) {
    case SweepStrategy::kExplicit:
      for (const auto& c : options.explicit_configs) {
        validate_thread_count(c.default_threads);
        for (const auto& [name, t] : c.per_layer) validate_thread_count(t);
      }
      return options.explicit_configs;
    case SweepStrategy::kFlipOneTo2T:
    case SweepStrategy::kFlipOneTo1T: {
      const int slow = options.strategy == SweepStrategy::kFlipOneTo2T ? 2 : 1;
      out.push_back(explicit_config(eligible, 4));
      for (const auto& name : eligible) {
        auto c = explicit_config(eligible, 4);
        c.per_layer[name] = slow;
        out.push_back(std::move(c));
      }
      return out;
    }
    case SweepStrategy::kExhaustive: {
      if (options.max_flips < 0) throw Error(ErrorKind::kInvalidArgument, "max_flips must be nonnegative");
      const auto count = exhaustive_config_count(static_cast<std::int64_t>(eligible.size()), options.max_flips);
      if (count > options.max_configs) {
        throw Error(ErrorKind::kInvalidArgument, "exhaustive sweep would produce " + std::to_string(count) +
                                                     " configs (limit " + std::to_string(options.max_configs) + ")");
      }
      const int n = static_cast<int>(eligible.size());
      for (int j = 0; j <= std::min(options.max_flips, n); ++j) {
        for_each_combination(n, j, [&](const std::vector<int>& chosen) {
          // Each chosen layer takes 2T or 1T; bit b of `pattern` set means 1T.
          for (std::int64_t pattern = 0; pattern < (std::int64_t{1} << j); ++pattern) {
            auto c = explicit_config(eligible, 4);
            for (int b = 0; b < j; ++b) {
              c.per_layer[eligible[static_cast<std::size_t>(chosen[static_cast<std::size_t>(b)])]] =
                  (pattern >> (j - 1 - b)) & 1 ? 1 : 2;
            }
            out.push_back(std::move(c));
          }
        });
      }
      return out;
    }
  }
  return out;
}

std::vector<SweepPoint> run_sweep(const LayerGraph& graph, const QuantParams& qparams, const LabeledDataset& dataset,
                                  std::span<const ThreadConfig> configs, bool with_recalib, const RecalibPlan& plan,
                                  const SweepOptions& options) {
  std::vector<SweepPoint> points;
  points.reserve(configs.size());
  for (const auto& config : configs) {
    const auto mode = ExecutionMode::nbsmt(config);
    EvalResult eval;
    if (with_recalib) {
      RecalibPlan p = plan;
      p.mode = mode;
      const auto recal = recalibrate(graph, qparams, p);
      eval = evaluate(recal.graph, &qparams, dataset, mode, options.engine);
    } else {
      eval = evaluate(graph, &qparams, dataset, mode, options.engine);
    }
    SweepPoint pt;
    pt.config = config;
    pt.recalibrated = with_recalib;
    pt.speedup = speedup(eval.cycles);
    pt.top1 = eval.top1;
    pt.accuracy_decrease = 100.0 * (options.fp32_top1 - eval.top1);
    pt.cycles = std::move(eval.cycles);
    points.push_back(std::move(pt));
  }
  return points;
}

bool dominates(double speedup_a, double decrease_a, double speedup_b, double decrease_b) {
  return speedup_a >= speedup_b && decrease_a <= decrease_b && (speedup_a > speedup_b || decrease_a < decrease_b);
}

bool dominates(const SweepPoint& a, const SweepPoint& b) {
  return dominates(a.speedup, a.accuracy_decrease, b.speedup, b.accuracy_decrease);
}

std::vector<SweepPoint> pareto_front(std::span<const SweepPoint> points) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].speedup != points[b].speedup) return points[a].speedup > points[b].speedup;
    return points[a].accuracy_decrease < points[b].accuracy_decrease;
  });
  // Walk groups of equal speedup from fastest to slowest. A point survives if
  // it ties the smallest decrease of its group and beats every faster point.
  std::vector<std::size_t> keep;
  double best_faster = std::numeric_limits<double>::infinity();
  for (std::size_t g = 0; g < order.size();) {
    std::size_t end = g;
    while (end < order.size() && points[order[end]].speedup == points[order[g]].speedup) ++end;
    const double group_best = points[order[g]].accuracy_decrease;
    if (group_best < best_faster) {
      for (std::size_t i = g; i < end && points[order[i]].accuracy_decrease == group_best; ++i) keep.push_back(order[i]);
    }
    best_faster = std::min(best_faster, group_best);
    g = end;
  }
  std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].speedup != points[b].speedup) return points[a].speedup < points[b].speedup;
    return a < b;
  });
  std::vector<SweepPoint> out;
  out.reserve(keep.size());
  for (auto i : keep) out.push_back(points[i]);
  return out;
}

void write_dat(std::span<const SweepPoint> points, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  char line[64];
  for (const auto& p : points) {
    std::snprintf(line, sizeof line, "%.6f %.6f\n", p.speedup, p.accuracy_decrease);
    out << line;
  }
  if (!out) throw Error(ErrorKind::kIo, "short write to " + path.string());
}

void to_json(nlohmann::json& j, const SweepPoint& p) {
  j = {{"config", p.config},
       {"recalibrated", p.recalibrated},
       {"speedup", p.speedup},
       {"top1", p.top1},
       {"accuracy_decrease", p.accuracy_decrease},
       {"cycles", p.cycles}};
}

}  // namespace nbsmt
