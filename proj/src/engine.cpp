#include "nbsmt/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <optional>
#include <thread>

#include "nbsmt/error.hpp"

namespace nbsmt {

namespace {

struct PreparedGemm {
  std::size_t index = 0;
  int threads = 1;
  QWeights qweights;
  std::vector<std::int8_t> lowered;  // K x N
  std::vector<std::int32_t> colsum;  // per output channel, for the zero-point term
  float act_scale = 1.0f;
  int act_zero_point = 0;
};

const Tensor& gemm_weight(const Layer& l) {
  return l.is_conv() ? std::get<Conv2d>(l.op).weight : std::get<FullyConnected>(l.op).weight;
}

const Tensor& gemm_bias(const Layer& l) {
  return l.is_conv() ? std::get<Conv2d>(l.op).bias : std::get<FullyConnected>(l.op).bias;
}

// Float GEMM: out (M x N) = a (M x K) * w^T where w is N x K row-major.
void float_gemm(const float* a, const float* w, std::int64_t m, std::int64_t k, std::int64_t n, float* out) {
  std::vector<float> wt(static_cast<std::size_t>(k * n));
  for (std::int64_t o = 0; o < n; ++o)
    for (std::int64_t j = 0; j < k; ++j) wt[static_cast<std::size_t>(j * n + o)] = w[o * k + j];
  for (std::int64_t row = 0; row < m; ++row) {
    float* acc = out + row * n;
    std::fill(acc, acc + n, 0.0f);
    const float* arow = a + row * k;
    for (std::int64_t j = 0; j < k; ++j) {
      const float v = arow[j];
      if (v == 0.0f) continue;
      const float* wrow = wt.data() + j * n;
      for (std::int64_t o = 0; o < n; ++o) acc[o] += v * wrow[o];
    }
  }
}

std::vector<float> float_im2col(const Conv2d& conv, const Tensor& x, std::int64_t oh, std::int64_t ow) {
  const auto batch = x.dim(0), channels = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto kh = conv.kernel_h(), kw = conv.kernel_w();
  const auto s = conv.stride, p = conv.padding;
  const auto depth = channels * kh * kw;
  std::vector<float> out(static_cast<std::size_t>(batch * oh * ow * depth), 0.0f);
  float* dst = out.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    const float* img = x.data.data() + b * channels * h * wd;
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox, dst += depth) {
        std::int64_t kidx = 0;
        for (std::int64_t c = 0; c < channels; ++c)
          for (std::int64_t dy = 0; dy < kh; ++dy) {
            const auto y = oy * s - p + dy;
            for (std::int64_t dx = 0; dx < kw; ++dx, ++kidx) {
              const auto xx = ox * s - p + dx;
              if (y >= 0 && y < h && xx >= 0 && xx < wd) dst[kidx] = img[(c * h + y) * wd + xx];
            }
          }
      }
    }
  }
  return out;
}

// GEMM rows are (image, y, x); activations are N,C,H,W.
Tensor rows_to_nchw(const std::vector<float>& rows, std::int64_t batch, std::int64_t channels, std::int64_t oh,
                    std::int64_t ow) {
  Tensor out({batch, channels, oh, ow});
  const auto plane = oh * ow;
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t pix = 0; pix < plane; ++pix)
      for (std::int64_t c = 0; c < channels; ++c)
        out.data[static_cast<std::size_t>((b * channels + c) * plane + pix)] =
            rows[static_cast<std::size_t>((b * plane + pix) * channels + c)];
  return out;
}

Tensor max_pool(const MaxPool& p, const Tensor& x) {
  const auto batch = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto oh = (h - p.kernel) / p.stride + 1, ow = (w - p.kernel) / p.stride + 1;
  Tensor out({batch, channels, oh, ow});
  std::size_t o = 0;
  for (std::int64_t bc = 0; bc < batch * channels; ++bc) {
    const float* plane = x.data.data() + bc * h * w;
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        float m = -std::numeric_limits<float>::infinity();
        for (int dy = 0; dy < p.kernel; ++dy)
          for (int dx = 0; dx < p.kernel; ++dx) m = std::max(m, plane[(oy * p.stride + dy) * w + ox * p.stride + dx]);
        out.data[o++] = m;
      }
  }
  return out;
}

}  // namespace

std::string ExecutionMode::label() const {
  switch (kind) {
    case ExecutionKind::kFloat32: return "fp32";
    case ExecutionKind::kQuantReference: return "a8w8";
    case ExecutionKind::kNbsmt: return "nbsmt:" + threads.label();
  }
  return "unknown";
}

struct InferenceSession::Impl {
  LayerGraph graph;
  ExecutionMode mode;
  ArrayConfig array;
  std::vector<std::optional<PreparedGemm>> gemms;  // indexed by layer

  void apply_batchnorm(std::size_t index, const BatchNormParams& bn, Tensor& x, const ForwardHooks& hooks) const;
  Tensor run_gemm(std::size_t index, const Layer& layer, const Tensor& x, CycleReport& cycles) const;
};

InferenceSession::InferenceSession(const LayerGraph& graph, const QuantParams* qparams, ExecutionMode mode,
                                   ArrayConfig array)
    : impl_(std::make_unique<Impl>()) {
  impl_->graph = graph;
  impl_->mode = std::move(mode);
  impl_->array = array;
  if (array.rows < 1 || array.cols < 1) throw Error(ErrorKind::kInvalidArgument, "array dimensions must be positive");
  impl_->gemms.resize(graph.layers.size());
  const bool quantized = impl_->mode.kind != ExecutionKind::kFloat32;
  if (quantized && qparams == nullptr) {
    throw Error(ErrorKind::kInvalidArgument, "mode " + impl_->mode.label() + " needs quantization parameters");
  }
  if (impl_->mode.kind == ExecutionKind::kNbsmt) {
    validate_thread_count(impl_->mode.threads.default_threads);
    for (const auto& [name, t] : impl_->mode.threads.per_layer) {
      validate_thread_count(t);
      auto idx = graph.index_of(name);
      if (!idx || !graph.layers[*idx].is_gemm()) {
        throw Error(ErrorKind::kInvalidArgument, "thread override names no conv/fc layer: '" + name + "'");
      }
    }
  }
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    if (!l.is_gemm()) continue;
    PreparedGemm g;
    g.index = i;
    if (impl_->mode.kind == ExecutionKind::kNbsmt && !l.nbsmt_exempt) g.threads = impl_->mode.threads.threads_for(l.name);
    if (quantized) {
      const auto& lq = qparams->at(l.name);
      g.act_scale = lq.act_scale;
      g.act_zero_point = lq.act_zero_point;
      g.qweights = quantize_weights(gemm_weight(l), lq.weight_scales);
      g.lowered = lower_weights(g.qweights);
      const auto n = g.qweights.channels();
      const auto k = g.qweights.per_channel();
      g.colsum.assign(static_cast<std::size_t>(n), 0);
      for (std::int64_t o = 0; o < n; ++o)
        for (std::int64_t j = 0; j < k; ++j) g.colsum[static_cast<std::size_t>(o)] += g.qweights.data[static_cast<std::size_t>(o * k + j)];
    }
    impl_->gemms[i] = std::move(g);
  }
}

InferenceSession::~InferenceSession() = default;
InferenceSession::InferenceSession(InferenceSession&&) noexcept = default;
InferenceSession& InferenceSession::operator=(InferenceSession&&) noexcept = default;

const ExecutionMode& InferenceSession::mode() const { return impl_->mode; }

int InferenceSession::threads_for(const std::string& layer) const {
  auto idx = impl_->graph.index_of(layer);
  if (!idx || !impl_->gemms[*idx]) throw Error(ErrorKind::kInvalidArgument, "no conv/fc layer '" + layer + "'");
  return impl_->gemms[*idx]->threads;
}

void InferenceSession::Impl::apply_batchnorm(std::size_t index, const BatchNormParams& bn, Tensor& x,
                                             const ForwardHooks& hooks) const {
  const auto batch = x.dim(0), channels = x.dim(1);
  const auto plane = static_cast<std::int64_t>(x.size()) / (batch * channels);
  std::vector<float> scale(static_cast<std::size_t>(channels)), shift(static_cast<std::size_t>(channels));
  if (mode.stat_collection) {
    const auto count = batch * plane;
    if (count < 2) throw Error(ErrorKind::kInvalidArgument, "batch statistics need at least two values per channel");
    std::vector<double> mean(static_cast<std::size_t>(channels)), unbiased(static_cast<std::size_t>(channels));
    for (std::int64_t c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const float* p = x.data.data() + (b * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const float* p = x.data.data() + (b * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double biased = sq / static_cast<double>(count);
      mean[static_cast<std::size_t>(c)] = mu;
      unbiased[static_cast<std::size_t>(c)] = sq / static_cast<double>(count - 1);
      const double inv = 1.0 / std::sqrt(biased + static_cast<double>(bn.eps));
      scale[static_cast<std::size_t>(c)] = static_cast<float>(bn.gamma.data[static_cast<std::size_t>(c)] * inv);
      shift[static_cast<std::size_t>(c)] =
          static_cast<float>(bn.beta.data[static_cast<std::size_t>(c)] - mu * bn.gamma.data[static_cast<std::size_t>(c)] * inv);
    }
    if (hooks.on_batch_stats) hooks.on_batch_stats(index, mean, unbiased);
  } else {
    for (std::int64_t c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double inv = 1.0 / std::sqrt(static_cast<double>(bn.running_var.data[ci]) + static_cast<double>(bn.eps));
      scale[ci] = static_cast<float>(bn.gamma.data[ci] * inv);
      shift[ci] = static_cast<float>(bn.beta.data[ci] - bn.running_mean.data[ci] * bn.gamma.data[ci] * inv);
    }
  }
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t c = 0; c < channels; ++c) {
      float* p = x.data.data() + (b * channels + c) * plane;
      const float s = scale[static_cast<std::size_t>(c)], t = shift[static_cast<std::size_t>(c)];
      for (std::int64_t i = 0; i < plane; ++i) p[i] = p[i] * s + t;
    }
}

Tensor InferenceSession::Impl::run_gemm(std::size_t index, const Layer& layer, const Tensor& x,
                                        CycleReport& cycles) const {
  const auto& g = *gemms[index];
  const Tensor& bias = gemm_bias(layer);
  const auto batch = x.dim(0);
  const auto* conv = std::get_if<Conv2d>(&layer.op);
  std::int64_t oh = 1, ow = 1;
  if (conv) {
    oh = (x.dim(2) + 2 * conv->padding - conv->kernel_h()) / conv->stride + 1;
    ow = (x.dim(3) + 2 * conv->padding - conv->kernel_w()) / conv->stride + 1;
  }
  const Tensor& w = gemm_weight(layer);
  const auto n = w.dim(0);
  const auto k = static_cast<std::int64_t>(w.size()) / n;
  const auto m = batch * oh * ow;
  if (!conv && static_cast<std::int64_t>(x.size()) != batch * k) {
    throw Error(ErrorKind::kShapeMismatch, "fc layer '" + layer.name + "' expects " + std::to_string(k) + " features");
  }

  std::vector<float> rows(static_cast<std::size_t>(m * n));
  if (mode.kind == ExecutionKind::kFloat32) {
    if (conv) {
      const auto cols = float_im2col(*conv, x, oh, ow);
      float_gemm(cols.data(), w.data.data(), m, k, n, rows.data());
    } else {
      float_gemm(x.data.data(), w.data.data(), m, k, n, rows.data());
    }
    for (std::int64_t r = 0; r < m; ++r)
      for (std::int64_t o = 0; o < n; ++o) rows[static_cast<std::size_t>(r * n + o)] += bias.data[static_cast<std::size_t>(o)];
  } else {
    const auto qa = quantize_activations(x, g.act_scale, g.act_zero_point);
    GemmResult res;
    if (conv) {
      const auto lowered = im2col_lower(*conv, qa);
      res = nbsmt_gemm(lowered.data, g.lowered, m, k, n, g.threads);
    } else {
      res = nbsmt_gemm(qa.data, g.lowered, m, k, n, g.threads);
    }
    for (std::int64_t o = 0; o < n; ++o) {
      const auto oi = static_cast<std::size_t>(o);
      const float s = g.act_scale * g.qweights.scales[oi];
      const std::int64_t corr = static_cast<std::int64_t>(g.act_zero_point) * g.colsum[oi];
      for (std::int64_t r = 0; r < m; ++r) {
        const auto idx = static_cast<std::size_t>(r * n + o);
        rows[idx] = static_cast<float>(static_cast<std::int64_t>(res.output[idx]) - corr) * s + bias.data[oi];
      }
    }
    LayerCycleEntry e;
    e.name = layer.name;
    e.threads = g.threads;
    e.exempt = layer.nbsmt_exempt;
    e.m = m;
    e.k = k;
    e.n = n;
    e.cycles = layer_cycles(m, k, n, array, g.threads);
    e.baseline_cycles = layer_cycles(m, k, n, array, 1);
    e.stats = res.stats;
    cycles.add(e);
  }
  if (!conv) return Tensor({batch, n}, std::move(rows));
  return rows_to_nchw(rows, batch, n, oh, ow);
}

ForwardResult InferenceSession::run(const Tensor& batch, const ForwardHooks& hooks) const {
  const auto& graph = impl_->graph;
  if (batch.rank() != 4 || Shape(batch.shape.begin() + 1, batch.shape.end()) != graph.input_shape) {
    throw Error(ErrorKind::kShapeMismatch, "input batch " + shape_to_string(batch.shape) + " does not match model input " +
                                               shape_to_string(graph.input_shape));
  }
  ForwardResult result;
  Tensor x = batch;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& layer = graph.layers[i];
    if (layer.is_gemm()) {
      if (hooks.on_gemm_input) hooks.on_gemm_input(i, x);
      x = impl_->run_gemm(i, layer, x, result.cycles);
    } else if (const auto* bn = std::get_if<BatchNorm>(&layer.op)) {
      impl_->apply_batchnorm(i, bn->params, x, hooks);
    } else if (std::holds_alternative<ReLU>(layer.op)) {
      for (auto& v : x.data) v = std::max(v, 0.0f);
    } else if (const auto* p = std::get_if<MaxPool>(&layer.op)) {
      // Quantization is monotone, so pooling before the next layer's
      // quantizer equals pooling the quantized values.
      x = max_pool(*p, x);
    }
    if (hooks.on_layer_output) hooks.on_layer_output(i, x);
  }
  result.logits = std::move(x);
  return result;
}

ForwardResult forward(const LayerGraph& graph, const QuantParams* qparams, const Tensor& batch, const ExecutionMode& mode,
                      const ForwardHooks& hooks, const ArrayConfig& array) {
  return InferenceSession(graph, qparams, mode, array).run(batch, hooks);
}

int argmax(std::span<const float> row) {
  int best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

EvalResult evaluate(const LayerGraph& graph, const QuantParams* qparams, const LabeledDataset& ds,
                    const ExecutionMode& mode, const EngineOptions& options) {
  if (options.batch_size <= 0) throw Error(ErrorKind::kInvalidArgument, "batch size must be positive");
  validate(ds, graph.num_classes);
  const InferenceSession session(graph, qparams, mode, options.array);
  const auto batches = ceil_div(ds.size(), options.batch_size);
  std::vector<std::int64_t> correct(static_cast<std::size_t>(batches), 0);
  std::vector<CycleReport> reports(static_cast<std::size_t>(batches));

  std::atomic<std::int64_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::int64_t b = next++; b < batches; b = next++) {
      try {
        const auto begin = b * options.batch_size;
        const auto count = std::min(options.batch_size, ds.size() - begin);
        auto res = session.run(ds.slice(begin, count).images);
        const auto classes = res.logits.dim(1);
        std::int64_t hits = 0;
        for (std::int64_t i = 0; i < count; ++i) {
          const auto row = std::span<const float>(res.logits.data).subspan(static_cast<std::size_t>(i * classes),
                                                                           static_cast<std::size_t>(classes));
          hits += argmax(row) == ds.labels[static_cast<std::size_t>(begin + i)];
        }
        correct[static_cast<std::size_t>(b)] = hits;
        reports[static_cast<std::size_t>(b)] = std::move(res.cycles);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = batches;
      }
    }
  };
  const int jobs = std::max(1, options.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  EvalResult r;
  r.total = ds.size();
  for (std::size_t b = 0; b < correct.size(); ++b) {
    r.correct += correct[b];
    r.cycles.merge(reports[b]);
  }
  r.top1 = r.total == 0 ? 0.0 : static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

double top1_accuracy(const LayerGraph& graph, const QuantParams* qparams, const LabeledDataset& ds,
                     const ExecutionMode& mode, const EngineOptions& options) {
  return evaluate(graph, qparams, ds, mode, options).top1;
}

LayerGraph fold_batchnorm(const LayerGraph& graph) {
  LayerGraph out = graph;
  out.layers.clear();
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    const auto* bn = std::get_if<BatchNorm>(&l.op);
    if (!bn) {
      out.layers.push_back(l);
      continue;
    }
    if (out.layers.empty() || !out.layers.back().is_conv() || i == 0 || !graph.layers[i - 1].is_conv()) {
      throw Error(ErrorKind::kValidation, "layer " + std::to_string(i) + " (" + l.name +
                                              "): batchnorm does not directly follow a convolution");
    }
    auto& conv = std::get<Conv2d>(out.layers.back().op);
    const auto& p = bn->params;
    const auto channels = conv.out_channels();
    if (channels != p.channels()) {
      throw Error(ErrorKind::kShapeMismatch, "layer " + std::to_string(i) + " (" + l.name + "): channel mismatch");
    }
    const auto per = static_cast<std::int64_t>(conv.weight.size()) / channels;
    for (std::int64_t o = 0; o < channels; ++o) {
      const auto oi = static_cast<std::size_t>(o);
      const double s = p.gamma.data[oi] / std::sqrt(static_cast<double>(p.running_var.data[oi]) + static_cast<double>(p.eps));
      for (std::int64_t j = o * per; j < (o + 1) * per; ++j) {
        auto& w = conv.weight.data[static_cast<std::size_t>(j)];
        w = static_cast<float>(w * s);
      }
      conv.bias.data[oi] = static_cast<float>((conv.bias.data[oi] - p.running_mean.data[oi]) * s + p.beta.data[oi]);
    }
  }
  return out;
}

nlohmann::json evaluation_report(const EvalResult& result, const ExecutionMode& mode) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& e : result.cycles.layers) layers.push_back(e);
  return {{"mode", mode.label()},
          {"top1", result.top1},
          {"correct", result.correct},
          {"total", result.total},
          {"speedup", speedup(result.cycles)},
          {"total_cycles", result.cycles.total_cycles()},
          {"total_baseline_cycles", result.cycles.total_baseline_cycles()},
          {"layers", std::move(layers)}};
}

}  // namespace nbsmt
