#include "nbsmt/sysmt_gemm.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "nbsmt/error.hpp"

namespace nbsmt {

namespace {

// Largest |product| a squeezed thread can produce: 255 * |-128|.
constexpr std::int64_t kMaxSqueezedProduct = 255 * 128;
constexpr std::int64_t kSafeInt32Depth = std::numeric_limits<std::int32_t>::max() / kMaxSqueezedProduct;

int parse_threads(std::string_view s) {
  if (!s.empty() && (s.back() == 'T' || s.back() == 't')) s.remove_suffix(1);
  int t = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), t);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw Error(ErrorKind::kInvalidArgument, "cannot parse thread count '" + std::string(s) + "'");
  }
  validate_thread_count(t);
  return t;
}

void check_gemm_args(std::span<const std::uint8_t> a, std::span<const std::int8_t> w, std::int64_t m,
                     std::int64_t k, std::int64_t n) {
  if (m < 0 || k < 0 || n < 0 || static_cast<std::int64_t>(a.size()) != m * k ||
      static_cast<std::int64_t>(w.size()) != k * n) {
    throw Error(ErrorKind::kShapeMismatch, "GEMM operand sizes do not match M=" + std::to_string(m) +
                                               " K=" + std::to_string(k) + " N=" + std::to_string(n));
  }
  for (auto v : w) {
    if (v < -127) throw Error(ErrorKind::kInvalidArgument, "weight quantum -128 is outside [-127, 127]");
  }
}

std::int32_t narrow_checked(std::int64_t v) {
  if (v < std::numeric_limits<std::int32_t>::min() || v > std::numeric_limits<std::int32_t>::max()) {
    throw Error(ErrorKind::kOverflow, "accumulator overflow: " + std::to_string(v) + " exceeds int32");
  }
  return static_cast<std::int32_t>(v);
}

// Scalar path for reductions too deep for int32 lanes; accumulates in int64
// and checks every output.
GemmResult nbsmt_gemm_checked(std::span<const std::uint8_t> a, std::span<const std::int8_t> w, std::int64_t m,
                              std::int64_t k, std::int64_t n, int threads) {
  const squeeze::SqueezePolicy policy(threads);
  GemmResult r;
  r.output.resize(static_cast<std::size_t>(m * n));
  std::array<squeeze::ThreadOperands, squeeze::kMaxThreads> ops{};
  for (std::int64_t row = 0; row < m; ++row) {
    for (std::int64_t col = 0; col < n; ++col) {
      std::int64_t acc = 0;
      for (std::int64_t base = 0; base < k; base += threads) {
        for (int i = 0; i < threads; ++i) {
          const auto kk = base + i;
          ops[static_cast<std::size_t>(i)] =
              kk < k ? squeeze::ThreadOperands{a[static_cast<std::size_t>(row * k + kk)],
                                               w[static_cast<std::size_t>(kk * n + col)]}
                     : squeeze::ThreadOperands{};
        }
        const auto cyc = squeeze::mac_cycle(std::span(ops).first(static_cast<std::size_t>(threads)), policy);
        acc += cyc.contribution;
        r.stats.collision_cycles += cyc.collided() ? 1 : 0;
        r.stats.abs_error_sum += cyc.abs_error();
      }
      r.output[static_cast<std::size_t>(row * n + col)] = narrow_checked(acc);
    }
  }
  r.stats.mac_count = m * n * k;
  r.stats.mac_cycles = m * n * ceil_div(k, threads);
  return r;
}

// Weight-side tables for the collision kernel, each K x N. Every product a
// squeezed thread can form lies within int16 (|p| <= 255 * 128).
struct WeightTables {
  std::vector<std::int16_t> w, reduced, abs_w, abs_dw, nonzero;

  explicit WeightTables(std::span<const std::int8_t> src)
      : w(src.size()), reduced(src.size()), abs_w(src.size()), abs_dw(src.size()), nonzero(src.size()) {
    for (std::size_t i = 0; i < src.size(); ++i) {
      const int v = src[i];
      const int rv = squeeze::reduce_weight(v);
      w[i] = static_cast<std::int16_t>(v);
      reduced[i] = static_cast<std::int16_t>(rv);
      abs_w[i] = static_cast<std::int16_t>(std::abs(v));
      abs_dw[i] = static_cast<std::int16_t>(std::abs(v - rv));
      nonzero[i] = v != 0;
    }
  }
};

struct LiveThread {
  std::int64_t k = 0;
  std::int16_t a = 0;   // activation quantum
  std::int16_t ra = 0;  // reduced activation
  std::int16_t da = 0;  // |a - ra|
};

// One cycle-group of `Live` threads (all with nonzero activation) against every
// output column: count active threads per column, pick the product each thread
// contributes under the squeeze schedule, accumulate result and |error|.
template <int Live>
void squeeze_group(const WeightTables& tab, const std::array<LiveThread, squeeze::kMaxThreads>& th, std::int64_t n,
                   std::int32_t* acc, std::int32_t* err, std::int32_t* collisions) {
  const std::int16_t* wv[Live];
  const std::int16_t* wr[Live];
  const std::int16_t* aw[Live];
  const std::int16_t* dw[Live];
  const std::int16_t* nz[Live];
  std::int16_t x[Live], rx[Live], dx[Live];
  for (int i = 0; i < Live; ++i) {
    const auto off = th[i].k * n;
    wv[i] = tab.w.data() + off;
    wr[i] = tab.reduced.data() + off;
    aw[i] = tab.abs_w.data() + off;
    dw[i] = tab.abs_dw.data() + off;
    nz[i] = tab.nonzero.data() + off;
    x[i] = th[i].a;
    rx[i] = th[i].ra;
    dx[i] = th[i].da;
  }
  for (std::int64_t col = 0; col < n; ++col) {
    std::int16_t c = 0;
    for (int i = 0; i < Live; ++i) c = static_cast<std::int16_t>(c + nz[i][col]);
    std::int32_t sum = 0;
    std::int32_t e = 0;
    for (int i = 0; i < Live; ++i) {
      const std::int16_t exact = static_cast<std::int16_t>(x[i] * wv[i][col]);
      const std::int16_t one = static_cast<std::int16_t>(dx[i] * aw[i][col] <= x[i] * dw[i][col] ? rx[i] * wv[i][col]
                                                                                                 : x[i] * wr[i][col]);
      const std::int16_t both = static_cast<std::int16_t>(rx[i] * wr[i][col]);
      const std::int16_t got = c <= 1 ? exact : (c == 2 ? one : both);
      const std::int16_t d = static_cast<std::int16_t>(got - exact);
      sum += got;
      e += d < 0 ? -d : d;
    }
    acc[col] += sum;
    err[col] += e;
    collisions[col] += c >= 2;
  }
}

}  // namespace

void validate_thread_count(int threads) {
  if (threads != 1 && threads != 2 && threads != 4) {
    throw Error(ErrorKind::kInvalidArgument, "thread count must be 1, 2 or 4 (got " + std::to_string(threads) + ")");
  }
}

int ThreadConfig::threads_for(const std::string& layer) const {
  auto it = per_layer.find(layer);
  return it == per_layer.end() ? default_threads : it->second;
}

ThreadConfig ThreadConfig::uniform(int threads) {
  validate_thread_count(threads);
  ThreadConfig c;
  c.default_threads = threads;
  return c;
}

ThreadConfig ThreadConfig::parse(std::string_view uniform, std::string_view per_layer_overrides) {
  ThreadConfig c = ThreadConfig::uniform(uniform.empty() ? 1 : parse_threads(uniform));
  while (!per_layer_overrides.empty()) {
    const auto comma = per_layer_overrides.find(',');
    auto item = per_layer_overrides.substr(0, comma);
    per_layer_overrides = comma == std::string_view::npos ? std::string_view{} : per_layer_overrides.substr(comma + 1);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw Error(ErrorKind::kInvalidArgument, "per-layer override '" + std::string(item) + "' is not name=T");
    }
    c.per_layer[std::string(item.substr(0, eq))] = parse_threads(item.substr(eq + 1));
  }
  return c;
}

std::string ThreadConfig::label() const {
  std::ostringstream os;
  os << default_threads << 'T';
  if (!per_layer.empty()) {
    os << '[';
    bool first = true;
    for (const auto& [name, t] : per_layer) {
      os << (first ? "" : ",") << name << '=' << t << 'T';
      first = false;
    }
    os << ']';
  }
  return os.str();
}

void to_json(nlohmann::json& j, const ThreadConfig& c) {
  j = {{"default_threads", c.default_threads}, {"per_layer", c.per_layer}, {"label", c.label()}};
}

void from_json(const nlohmann::json& j, ThreadConfig& c) {
  c.default_threads = j.at("default_threads").get<int>();
  validate_thread_count(c.default_threads);
  c.per_layer = j.value("per_layer", std::map<std::string, int>{});
  for (const auto& [name, t] : c.per_layer) validate_thread_count(t);
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

std::int64_t layer_cycles(std::int64_t m, std::int64_t k, std::int64_t n, const ArrayConfig& array, int threads) {
  if (m <= 0 || k <= 0 || n <= 0 || array.rows < 1 || array.cols < 1) {
    throw Error(ErrorKind::kInvalidArgument, "layer_cycles needs positive dimensions");
  }
  validate_thread_count(threads);
  return ceil_div(m, array.rows) * ceil_div(n, array.cols) * ceil_div(k, threads);
}

LoweredActivations im2col_lower(const Conv2d& conv, const QActivations& input) {
  if (input.shape.size() != 4 || input.shape[1] != conv.in_channels()) {
    throw Error(ErrorKind::kShapeMismatch, "conv with " + std::to_string(conv.in_channels()) +
                                               " input channels given activations " + shape_to_string(input.shape));
  }
  const auto batch = input.shape[0], channels = input.shape[1], h = input.shape[2], wd = input.shape[3];
  const auto kh = conv.kernel_h(), kw = conv.kernel_w();
  const auto s = conv.stride, p = conv.padding;
  LoweredActivations out;
  out.out_h = (h + 2 * p - kh) / s + 1;
  out.out_w = (wd + 2 * p - kw) / s + 1;
  if (out.out_h <= 0 || out.out_w <= 0) throw Error(ErrorKind::kShapeMismatch, "conv output is empty");
  out.rows = batch * out.out_h * out.out_w;
  out.depth = channels * kh * kw;
  out.data.assign(static_cast<std::size_t>(out.rows * out.depth), static_cast<std::uint8_t>(input.zero_point));
  auto* dst = out.data.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto* img = input.data.data() + b * channels * h * wd;
    for (std::int64_t oy = 0; oy < out.out_h; ++oy) {
      for (std::int64_t ox = 0; ox < out.out_w; ++ox, dst += out.depth) {
        std::int64_t kidx = 0;
        for (std::int64_t c = 0; c < channels; ++c) {
          for (std::int64_t dy = 0; dy < kh; ++dy) {
            const auto y = oy * s - p + dy;
            for (std::int64_t dx = 0; dx < kw; ++dx, ++kidx) {
              const auto x = ox * s - p + dx;
              if (y >= 0 && y < h && x >= 0 && x < wd) dst[kidx] = img[(c * h + y) * wd + x];
            }
          }
        }
      }
    }
  }
  return out;
}

std::vector<std::int8_t> lower_weights(const QWeights& w) {
  const auto n = w.channels();
  const auto k = w.per_channel();
  std::vector<std::int8_t> out(static_cast<std::size_t>(k * n));
  for (std::int64_t o = 0; o < n; ++o) {
    for (std::int64_t j = 0; j < k; ++j) out[static_cast<std::size_t>(j * n + o)] = w.data[static_cast<std::size_t>(o * k + j)];
  }
  return out;
}

GemmStats& GemmStats::operator+=(const GemmStats& o) {
  mac_count += o.mac_count;
  mac_cycles += o.mac_cycles;
  collision_cycles += o.collision_cycles;
  abs_error_sum += o.abs_error_sum;
  return *this;
}

std::vector<std::int32_t> reference_gemm(std::span<const std::uint8_t> a, std::span<const std::int8_t> w, std::int64_t m,
                                         std::int64_t k, std::int64_t n) {
  check_gemm_args(a, w, m, k, n);
  std::vector<std::int32_t> out(static_cast<std::size_t>(m * n));
  std::vector<std::int64_t> acc(static_cast<std::size_t>(n));
  for (std::int64_t row = 0; row < m; ++row) {
    std::fill(acc.begin(), acc.end(), 0);
    const auto* arow = a.data() + row * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const std::int64_t av = arow[kk];
      if (av == 0) continue;
      const auto* wrow = w.data() + kk * n;
      for (std::int64_t col = 0; col < n; ++col) acc[static_cast<std::size_t>(col)] += av * wrow[col];
    }
    for (std::int64_t col = 0; col < n; ++col) out[static_cast<std::size_t>(row * n + col)] = narrow_checked(acc[static_cast<std::size_t>(col)]);
  }
  return out;
}

GemmResult nbsmt_gemm(std::span<const std::uint8_t> a, std::span<const std::int8_t> w, std::int64_t m, std::int64_t k,
                      std::int64_t n, int threads) {
  validate_thread_count(threads);
  check_gemm_args(a, w, m, k, n);
  if (k > kSafeInt32Depth) return nbsmt_gemm_checked(a, w, m, k, n, threads);

  GemmResult r;
  r.output.assign(static_cast<std::size_t>(m * n), 0);
  r.stats.mac_count = m * n * k;
  r.stats.mac_cycles = m * n * ceil_div(k, threads);

  if (threads == 1) {
    for (std::int64_t row = 0; row < m; ++row) {
      auto* acc = r.output.data() + row * n;
      const auto* arow = a.data() + row * k;
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const std::int32_t av = arow[kk];
        if (av == 0) continue;
        const auto* wrow = w.data() + kk * n;
        for (std::int64_t col = 0; col < n; ++col) acc[col] += av * wrow[col];
      }
    }
    return r;
  }

  const WeightTables tab(w);
  std::vector<std::int32_t> err(static_cast<std::size_t>(n));
  std::vector<std::int32_t> collisions(static_cast<std::size_t>(n), 0);
  std::array<LiveThread, squeeze::kMaxThreads> th{};

  for (std::int64_t row = 0; row < m; ++row) {
    auto* acc = r.output.data() + row * n;
    const auto* arow = a.data() + row * k;
    std::fill(err.begin(), err.end(), 0);
    for (std::int64_t base = 0; base < k; base += threads) {
      // Threads whose activation is zero are inactive for every column.
      int live = 0;
      for (int i = 0; i < threads && base + i < k; ++i) {
        const int v = arow[base + i];
        if (v == 0) continue;
        const int rv = squeeze::reduce_activation(v);
        th[static_cast<std::size_t>(live++)] = {base + i, static_cast<std::int16_t>(v), static_cast<std::int16_t>(rv),
                                                static_cast<std::int16_t>(std::abs(v - rv))};
      }
      switch (live) {
        case 0:
          break;
        case 1: {
          const auto* wrow = w.data() + th[0].k * n;
          const std::int32_t v = th[0].a;
          for (std::int64_t col = 0; col < n; ++col) acc[col] += v * wrow[col];
          break;
        }
        case 2:
          squeeze_group<2>(tab, th, n, acc, err.data(), collisions.data());
          break;
        case 3:
          squeeze_group<3>(tab, th, n, acc, err.data(), collisions.data());
          break;
        default:
          squeeze_group<4>(tab, th, n, acc, err.data(), collisions.data());
          break;
      }
    }
    for (auto e : err) r.stats.abs_error_sum += e;
  }
  for (auto c : collisions) r.stats.collision_cycles += c;
  return r;
}

double LayerCycleEntry::collision_rate() const {
  return stats.mac_cycles == 0 ? 0.0 : static_cast<double>(stats.collision_cycles) / static_cast<double>(stats.mac_cycles);
}

double LayerCycleEntry::mean_abs_squeeze_error() const {
  return stats.mac_cycles == 0 ? 0.0 : static_cast<double>(stats.abs_error_sum) / static_cast<double>(stats.mac_cycles);
}

void CycleReport::add(const LayerCycleEntry& entry) {
  for (auto& e : layers) {
    if (e.name == entry.name) {
      e.m += entry.m;
      e.cycles += entry.cycles;
      e.baseline_cycles += entry.baseline_cycles;
      e.stats += entry.stats;
      return;
    }
  }
  layers.push_back(entry);
}

void CycleReport::merge(const CycleReport& other) {
  for (const auto& e : other.layers) add(e);
}

const LayerCycleEntry* CycleReport::find(std::string_view name) const {
  for (const auto& e : layers) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::int64_t CycleReport::total_cycles() const {
  std::int64_t s = 0;
  for (const auto& e : layers) s += e.cycles;
  return s;
}

std::int64_t CycleReport::total_baseline_cycles() const {
  std::int64_t s = 0;
  for (const auto& e : layers) s += e.baseline_cycles;
  return s;
}

double speedup(const CycleReport& report) {
  const auto c = report.total_cycles();
  return c == 0 ? 1.0 : static_cast<double>(report.total_baseline_cycles()) / static_cast<double>(c);
}

double speedup(const CycleReport& configured, const CycleReport& baseline) {
  const auto c = configured.total_cycles();
  return c == 0 ? 1.0 : static_cast<double>(baseline.total_cycles()) / static_cast<double>(c);
}

void to_json(nlohmann::json& j, const LayerCycleEntry& e) {
  j = {{"name", e.name},
       {"threads", e.threads},
       {"exempt", e.exempt},
       {"m", e.m},
       {"k", e.k},
       {"n", e.n},
       {"mac_count", e.stats.mac_count},
       {"mac_cycles", e.stats.mac_cycles},
       {"cycles", e.cycles},
       {"baseline_cycles", e.baseline_cycles},
       {"collision_cycles", e.stats.collision_cycles},
       {"collision_rate", e.collision_rate()},
       {"mean_abs_squeeze_error", e.mean_abs_squeeze_error()}};
}

void to_json(nlohmann::json& j, const CycleReport& r) {
  j = nlohmann::json::object();
  j["layers"] = r.layers;
  j["total_cycles"] = r.total_cycles();
  j["total_baseline_cycles"] = r.total_baseline_cycles();
  j["speedup"] = speedup(r);
}

}  // namespace nbsmt
