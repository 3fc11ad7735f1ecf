// nbsmt: command-line driver for calibration, NB-SMT evaluation, BatchNorm
// recalibration, pruning and speedup/accuracy sweeps.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "nbsmt/bn_recalib.hpp"
#include "nbsmt/dataset.hpp"
#include "nbsmt/engine.hpp"
#include "nbsmt/error.hpp"
#include "nbsmt/model.hpp"
#include "nbsmt/pruner.hpp"
#include "nbsmt/quantizer.hpp"
#include "nbsmt/sweep.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int log_level() {
  const char* v = std::getenv("NBSMT_LOG");
  return v ? std::atoi(v) : 0;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[nbsmt] " << msg << '\n';
}

struct Common {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::int64_t batch_size = 100;
  int rows = 32;
  int cols = 32;
  std::string format = "mnist-idx";

  nbsmt::EngineOptions engine() const { return {{rows, cols}, batch_size, jobs}; }
};

nbsmt::LabeledDataset load_data(const std::string& path, const Common& c, const nbsmt::LayerGraph& g,
                                std::int64_t limit = 0) {
  auto ds = nbsmt::load_dataset(path, nbsmt::parse_dataset_format(c.format), g.input_norm);
  nbsmt::validate(ds, g.num_classes);
  log_info("loaded " + std::to_string(ds.size()) + " images from " + path);
  if (limit > 0 && limit < ds.size()) ds = ds.slice(0, limit);
  return ds;
}

nbsmt::ExecutionMode parse_mode(const std::string& mode, const std::string& threads, const std::string& per_layer) {
  if (mode == "fp32" || mode == "float32") return nbsmt::ExecutionMode::float32();
  if (mode == "a8w8" || mode == "quant_reference") return nbsmt::ExecutionMode::quant_reference();
  if (mode == "nbsmt") return nbsmt::ExecutionMode::nbsmt(nbsmt::ThreadConfig::parse(threads, per_layer));
  throw nbsmt::Error(nbsmt::ErrorKind::kInvalidArgument, "unknown mode '" + mode + "'");
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(out, std::ios::trunc);
  if (!f) throw nbsmt::Error(nbsmt::ErrorKind::kIo, "cannot write " + out);
  f << j.dump(2) << '\n';
}

fs::path front_path(const fs::path& dat) {
  auto p = dat;
  p.replace_filename(dat.stem().string() + "_front" + dat.extension().string());
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NB-SMT quantized CNN simulator"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--jobs", common.jobs, "Parallel evaluation workers")->capture_default_str();
  app.add_option("--eval-batch", common.batch_size, "Images per forward batch")->capture_default_str();
  app.add_option("--array-rows", common.rows, "Systolic array rows")->capture_default_str();
  app.add_option("--array-cols", common.cols, "Systolic array columns")->capture_default_str();
  app.add_option("--format", common.format, "Dataset format: mnist-idx | cifar10-bin")->capture_default_str();

  std::string model, quant, data, out, threads = "1T", per_layer, mode = "nbsmt";
  std::int64_t limit = 0;

  auto* calibrate = app.add_subcommand("calibrate", "Min-max calibration on a random training subset");
  std::int64_t subset = nbsmt::kDefaultCalibrationSize;
  calibrate->add_option("--model", model)->required();
  calibrate->add_option("--data", data, "Training data (MNIST prefix or CIFAR batch)")->required();
  calibrate->add_option("--subset", subset)->capture_default_str();
  calibrate->add_option("--out", out)->required();

  auto* eval = app.add_subcommand("eval", "Top-1 accuracy and cycle report");
  eval->add_option("--model", model)->required();
  eval->add_option("--quant", quant);
  eval->add_option("--data", data)->required();
  eval->add_option("--mode", mode, "fp32 | a8w8 | nbsmt")->capture_default_str();
  eval->add_option("--threads", threads, "Uniform thread count, e.g. 4T")->capture_default_str();
  eval->add_option("--threads-per-layer", per_layer, "Overrides, e.g. conv2=2,conv3=1");
  eval->add_option("--limit", limit, "Evaluate only the first N images");
  eval->add_option("--out", out, "Report path (stdout when omitted)");

  auto* recal = app.add_subcommand("recalibrate", "Re-collect BatchNorm statistics under NB-SMT");
  nbsmt::RecalibPlan plan;
  std::string log_out;
  std::int64_t source_size = 0;
  recal->add_option("--model", model)->required();
  recal->add_option("--quant", quant)->required();
  recal->add_option("--data", data, "Training data")->required();
  recal->add_option("--threads", threads)->capture_default_str();
  recal->add_option("--threads-per-layer", per_layer);
  recal->add_option("--batch-size", plan.batch_size)->capture_default_str();
  recal->add_option("--num-batches", plan.num_batches)->capture_default_str();
  recal->add_option("--momentum", plan.momentum)->capture_default_str();
  recal->add_option("--subset", source_size, "Source images (default batch-size * num-batches)");
  recal->add_option("--out", out, "Output model directory")->required();
  recal->add_option("--log", log_out, "Per-batch statistics log (JSON)");

  auto* prune = app.add_subcommand("prune", "One-shot magnitude pruning of eligible conv layers");
  double sparsity = 0.0;
  prune->add_option("--model", model)->required();
  prune->add_option("--sparsity", sparsity)->required()->check(CLI::Range(0.0, 0.999999));
  prune->add_option("--out", out)->required();

  auto* sweep = app.add_subcommand("sweep", "Speedup/accuracy sweep over per-layer thread configs");
  std::string strategy = "flip-one-to-2T", train, report_out, configs_file;
  int max_flips = 1;
  bool with_recalib = false;
  sweep->add_option("--model", model)->required();
  sweep->add_option("--quant", quant)->required();
  sweep->add_option("--data", data, "Evaluation data")->required();
  sweep->add_option("--train", train, "Training data for recalibration");
  sweep->add_option("--strategy", strategy)->capture_default_str();
  sweep->add_option("--max-flips", max_flips)->capture_default_str();
  sweep->add_option("--configs", configs_file, "JSON list of thread configs (strategy explicit)");
  sweep->add_flag("--recalib", with_recalib);
  sweep->add_option("--batch-size", plan.batch_size)->capture_default_str();
  sweep->add_option("--num-batches", plan.num_batches)->capture_default_str();
  sweep->add_option("--momentum", plan.momentum)->capture_default_str();
  sweep->add_option("--limit", limit);
  sweep->add_option("--out", out, ".dat output; the front goes to <stem>_front.dat")->required();
  sweep->add_option("--report", report_out, "JSON sweep report");

  auto* report = app.add_subcommand("report", "Model summary, sparsity and BN statistic drift");
  std::string baseline;
  report->add_option("--model", model)->required();
  report->add_option("--quant", quant);
  report->add_option("--baseline", baseline, "Model to compute BN drift against");
  report->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: kind=usage message=\"" << e.what() << "\"\n";
    return 2;
  }

  try {
    const auto graph = nbsmt::load_model(model);
    log_info("loaded model " + model + " (" + std::to_string(graph.layers.size()) + " layers)");
    std::optional<nbsmt::QuantParams> qp;
    if (!quant.empty()) qp = nbsmt::load_quant_params(quant);

    if (calibrate->parsed()) {
      const auto ds = load_data(data, common, graph);
      const auto sub = nbsmt::sample_calibration_subset(ds, subset, common.seed);
      nbsmt::save_quant_params(nbsmt::calibrate(graph, sub), out);
    } else if (eval->parsed()) {
      const auto m = parse_mode(mode, threads, per_layer);
      const auto ds = load_data(data, common, graph, limit);
      const auto r = nbsmt::evaluate(graph, qp ? &*qp : nullptr, ds, m, common.engine());
      emit(nbsmt::evaluation_report(r, m), out);
    } else if (recal->parsed()) {
      const auto ds = load_data(data, common, graph);
      if (source_size <= 0) source_size = std::min(ds.size(), plan.batch_size * plan.num_batches);
      plan.source = nbsmt::sample_calibration_subset(ds, source_size, common.seed);
      plan.mode = nbsmt::ExecutionMode::nbsmt(nbsmt::ThreadConfig::parse(threads, per_layer));
      plan.array = {common.rows, common.cols};
      const auto r = nbsmt::recalibrate(graph, *qp, plan);
      nbsmt::save_model(r.graph, out);
      if (!log_out.empty()) {
        emit(json{{"mode", plan.mode.label()},
                  {"momentum", plan.momentum},
                  {"batch_size", plan.batch_size},
                  {"num_batches", plan.num_batches},
                  {"snapshots", r.log},
                  {"drift", nbsmt::stat_drift(graph, r.graph)}},
             log_out);
      }
    } else if (prune->parsed()) {
      nbsmt::save_model(nbsmt::magnitude_prune(graph, sparsity), out);
    } else if (sweep->parsed()) {
      if (!qp) throw nbsmt::Error(nbsmt::ErrorKind::kInvalidArgument, "sweep needs --quant");
      nbsmt::EnumerateOptions eo;
      eo.strategy = nbsmt::parse_sweep_strategy(strategy);
      eo.max_flips = max_flips;
      if (eo.strategy == nbsmt::SweepStrategy::kExplicit) {
        std::ifstream f(configs_file);
        if (!f) throw nbsmt::Error(nbsmt::ErrorKind::kIo, "cannot open --configs file '" + configs_file + "'");
        eo.explicit_configs = json::parse(f).get<std::vector<nbsmt::ThreadConfig>>();
      }
      const auto configs = nbsmt::enumerate_configs(graph, eo);
      const auto ds = load_data(data, common, graph, limit);
      if (with_recalib) {
        if (train.empty()) throw nbsmt::Error(nbsmt::ErrorKind::kInvalidArgument, "--recalib needs --train");
        const auto tr = load_data(train, common, graph);
        plan.source = nbsmt::sample_calibration_subset(tr, std::min(tr.size(), plan.batch_size * plan.num_batches),
                                                       common.seed);
        plan.array = {common.rows, common.cols};
      }
      nbsmt::SweepOptions so;
      so.engine = common.engine();
      so.fp32_top1 = nbsmt::top1_accuracy(graph, nullptr, ds, nbsmt::ExecutionMode::float32(), so.engine);
      const auto points = nbsmt::run_sweep(graph, *qp, ds, configs, with_recalib, plan, so);
      const auto front = nbsmt::pareto_front(points);
      nbsmt::write_dat(points, out);
      nbsmt::write_dat(front, front_path(out));
      if (!report_out.empty()) {
        emit(json{{"fp32_top1", so.fp32_top1}, {"recalibrated", with_recalib}, {"points", points}, {"front", front}},
             report_out);
      }
    } else if (report->parsed()) {
      const auto shapes = nbsmt::infer_shapes(graph);
      json layers = json::array();
      for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        const auto& l = graph.layers[i];
        layers.push_back({{"name", l.name}, {"kind", l.kind()}, {"nbsmt_exempt", l.nbsmt_exempt}, {"output_shape", shapes[i]}});
      }
      json r{{"arch", graph.arch},
             {"layers", std::move(layers)},
             {"eligible_layers", graph.eligible_layers()},
             {"sparsity", nbsmt::sparsity_report(graph, qp ? &*qp : nullptr)}};
      if (!baseline.empty()) r["bn_drift"] = nbsmt::stat_drift(nbsmt::load_model(baseline), graph);
      emit(r, out);
    }
  } catch (const nbsmt::Error& e) {
    std::cerr << "error: kind=" << nbsmt::to_string(e.kind()) << " message=" << json(std::string(e.what())).dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: kind=internal message=" << json(std::string(e.what())).dump() << '\n';
    return 1;
  }
  return 0;
}
