#include "nbsmt/bn_recalib.hpp"

#include <cmath>
#include <map>

#include "nbsmt/error.hpp"

namespace nbsmt {

void validate(const RecalibPlan& plan) {
  if (plan.source.size() == 0) throw Error(ErrorKind::kInvalidArgument, "recalibration source is empty");
  if (plan.batch_size < 1) throw Error(ErrorKind::kInvalidArgument, "recalibration batch size must be positive");
  if (plan.num_batches < 1) throw Error(ErrorKind::kInvalidArgument, "recalibration needs at least one batch");
  if (!(plan.momentum > 0.0f && plan.momentum <= 1.0f)) {
    throw Error(ErrorKind::kInvalidArgument, "momentum must lie in (0, 1]");
  }
}

std::vector<std::int64_t> recalib_batch_indices(const RecalibPlan& plan, std::int64_t b) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(plan.batch_size));
  for (std::int64_t j = 0; j < plan.batch_size; ++j) {
    idx[static_cast<std::size_t>(j)] = (b * plan.batch_size + j) % plan.source.size();
  }
  return idx;
}

RunningStats RunningStats::from(const BatchNormParams& bn) {
  return {{bn.running_mean.data.begin(), bn.running_mean.data.end()},
          {bn.running_var.data.begin(), bn.running_var.data.end()}};
}

void RunningStats::store(BatchNormParams& bn) const {
  for (std::size_t c = 0; c < mean.size(); ++c) {
    bn.running_mean.data[c] = static_cast<float>(mean[c]);
    bn.running_var.data[c] = static_cast<float>(var[c]);
  }
}

void ema_update(RunningStats& stats, std::span<const double> batch_mean, std::span<const double> batch_unbiased_var,
                float momentum) {
  const auto channels = stats.mean.size();
  if (batch_mean.size() != channels || batch_unbiased_var.size() != channels || stats.var.size() != channels) {
    throw Error(ErrorKind::kShapeMismatch, "batch statistics do not match the BN channel count");
  }
  const double m = momentum;
  for (std::size_t c = 0; c < channels; ++c) {
    stats.mean[c] = (1.0 - m) * stats.mean[c] + m * batch_mean[c];
    stats.var[c] = (1.0 - m) * stats.var[c] + m * batch_unbiased_var[c];
  }
}

void ema_update(BatchNormParams& bn, std::span<const double> batch_mean, std::span<const double> batch_unbiased_var,
                float momentum) {
  auto stats = RunningStats::from(bn);
  ema_update(stats, batch_mean, batch_unbiased_var, momentum);
  stats.store(bn);
}

RecalibResult recalibrate(const LayerGraph& graph, const QuantParams& qparams, const RecalibPlan& plan) {
  validate(plan);
  if (graph.batchnorm_layers().empty()) throw Error(ErrorKind::kInvalidArgument, "graph has no BatchNorm layers");

  RecalibResult result{graph, {}};
  ExecutionMode mode = plan.mode;
  mode.stat_collection = true;
  // Collection-mode BN layers never read running statistics, so one session
  // built from the original graph serves every batch.
  const InferenceSession session(graph, mode.kind == ExecutionKind::kFloat32 ? nullptr : &qparams, mode, plan.array);
  std::map<std::size_t, RunningStats> running;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    if (const auto* bn = std::get_if<BatchNorm>(&graph.layers[i].op)) running[i] = RunningStats::from(bn->params);
  }

  for (std::int64_t b = 0; b < plan.num_batches; ++b) {
    const auto images = plan.source.subset(recalib_batch_indices(plan, b)).images;
    ForwardHooks hooks;
    hooks.on_batch_stats = [&](std::size_t index, std::span<const double> mean, std::span<const double> var) {
      auto& layer = result.graph.layers[index];
      auto& bn = std::get<BatchNorm>(layer.op).params;
      auto& stats = running.at(index);
      ema_update(stats, mean, var, plan.momentum);
      stats.store(bn);
      result.log.push_back({b, layer.name, bn.running_mean.data, bn.running_var.data});
    };
    session.run(images, hooks);
  }
  return result;
}

std::vector<StatDrift> stat_drift(const LayerGraph& before, const LayerGraph& after) {
  std::vector<const Layer*> a, b;
  for (const auto& l : before.layers)
    if (l.is_batchnorm()) a.push_back(&l);
  for (const auto& l : after.layers)
    if (l.is_batchnorm()) b.push_back(&l);
  if (a.size() != b.size()) throw Error(ErrorKind::kValidation, "graphs have different BatchNorm layers");
  std::vector<StatDrift> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& pa = std::get<BatchNorm>(a[i]->op).params;
    const auto& pb = std::get<BatchNorm>(b[i]->op).params;
    if (a[i]->name != b[i]->name || pa.channels() != pb.channels()) {
      throw Error(ErrorKind::kValidation, "BatchNorm layer '" + a[i]->name + "' does not match '" + b[i]->name + "'");
    }
    StatDrift d{a[i]->name, 0.0, 0.0};
    for (std::size_t c = 0; c < static_cast<std::size_t>(pa.channels()); ++c) {
      const double dm = static_cast<double>(pb.running_mean.data[c]) - pa.running_mean.data[c];
      const double dv = static_cast<double>(pb.running_var.data[c]) - pa.running_var.data[c];
      d.mean_delta += dm * dm;
      d.var_delta += dv * dv;
    }
    d.mean_delta = std::sqrt(d.mean_delta);
    d.var_delta = std::sqrt(d.var_delta);
    out.push_back(d);
  }
  return out;
}

void to_json(nlohmann::json& j, const BatchSnapshot& s) {
  j = {{"batch", s.batch}, {"layer", s.layer}, {"running_mean", s.running_mean}, {"running_var", s.running_var}};
}

void to_json(nlohmann::json& j, const StatDrift& d) {
  j = {{"layer", d.layer}, {"mean_delta", d.mean_delta}, {"var_delta", d.var_delta}};
}

}  // namespace nbsmt
