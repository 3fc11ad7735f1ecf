#include "nbsmt/model.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "nbsmt/error.hpp"

namespace nbsmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

[[noreturn]] void fail_layer(ErrorKind kind, std::size_t index, const std::string& name,
                             const std::string& what) {
  throw Error(kind, "layer " + std::to_string(index) + " (" + name + "): " + what);
}

std::uint32_t crc32_of(const void* data, std::size_t bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(bytes)));
}

std::vector<char> to_le_bytes(const Tensor& t) {
  std::vector<char> out(t.data.size() * sizeof(float));
  if constexpr (std::endian::native == std::endian::little) {
    if (!out.empty()) std::memcpy(out.data(), t.data.data(), out.size());
  } else {
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      auto bits = std::bit_cast<std::uint32_t>(t.data[i]);
      for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
  return out;
}

std::vector<float> from_le_bytes(const std::vector<char>& raw) {
  std::vector<float> out(raw.size() / sizeof(float));
  if constexpr (std::endian::native == std::endian::little) {
    if (!out.empty()) std::memcpy(out.data(), raw.data(), out.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + b])) << (8 * b);
      out[i] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

Tensor read_blob(const fs::path& dir, const json& desc, const Shape& expected, std::size_t index,
                 const std::string& layer, const std::string& role) {
  if (!desc.is_object() || !desc.contains("file") || !desc.contains("bytes") ||
      !desc.contains("crc32")) {
    fail_layer(ErrorKind::kFormat, index, layer, "blob '" + role + "' lacks file/bytes/crc32");
  }
  if (desc.contains("shape") && desc.at("shape").get<Shape>() != expected) {
    fail_layer(ErrorKind::kShapeMismatch, index, layer,
               "blob '" + role + "' shape " + shape_to_string(desc.at("shape").get<Shape>()) +
                   " expected " + shape_to_string(expected));
  }
  const auto declared = desc.at("bytes").get<std::int64_t>();
  const auto needed = element_count(expected) * static_cast<std::int64_t>(sizeof(float));
  auto raw = read_file(dir / desc.at("file").get<std::string>());
  if (declared != needed || static_cast<std::int64_t>(raw.size()) != needed) {
    fail_layer(ErrorKind::kShapeMismatch, index, layer,
               "blob '" + role + "' has " + std::to_string(raw.size()) + " bytes (manifest says " +
                   std::to_string(declared) + "), shape " + shape_to_string(expected) + " needs " +
                   std::to_string(needed));
  }
  if (crc32_of(raw.data(), raw.size()) != desc.at("crc32").get<std::uint32_t>()) {
    fail_layer(ErrorKind::kChecksum, index, layer, "blob '" + role + "' checksum mismatch");
  }
  return Tensor(expected, from_le_bytes(raw));
}

json write_blob(const fs::path& dir, const std::string& file, const Tensor& t) {
  auto raw = to_le_bytes(t);
  std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (dir / file).string());
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw Error(ErrorKind::kIo, "short write to " + (dir / file).string());
  return json{{"file", file},
              {"shape", t.shape},
              {"bytes", raw.size()},
              {"crc32", crc32_of(raw.data(), raw.size())}};
}

void check_tensor(const Tensor& t, const Shape& expected, std::size_t index, const std::string& layer,
                  const char* role) {
  if (t.shape != expected || element_count(t.shape) != static_cast<std::int64_t>(t.data.size())) {
    fail_layer(ErrorKind::kShapeMismatch, index, layer,
               std::string(role) + " shape " + shape_to_string(t.shape) + " expected " +
                   shape_to_string(expected));
  }
  if (!t.all_finite()) fail_layer(ErrorKind::kValidation, index, layer, std::string(role) + " has NaN/Inf");
}

bool bits_equal(float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); }

bool bits_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

}  // namespace

std::string_view Layer::kind() const {
  struct Visitor {
    std::string_view operator()(const Conv2d&) const { return "conv2d"; }
    std::string_view operator()(const BatchNorm&) const { return "batchnorm"; }
    std::string_view operator()(const ReLU&) const { return "relu"; }
    std::string_view operator()(const MaxPool&) const { return "maxpool"; }
    std::string_view operator()(const FullyConnected&) const { return "fc"; }
  };
  return std::visit(Visitor{}, op);
}

std::optional<std::size_t> LayerGraph::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  return std::nullopt;
}

const Layer& LayerGraph::layer(const std::string& name) const {
  auto i = index_of(name);
  if (!i) throw Error(ErrorKind::kInvalidArgument, "no layer named '" + name + "'");
  return layers[*i];
}

Layer& LayerGraph::layer(const std::string& name) {
  auto i = index_of(name);
  if (!i) throw Error(ErrorKind::kInvalidArgument, "no layer named '" + name + "'");
  return layers[*i];
}

std::vector<std::string> LayerGraph::eligible_layers() const {
  std::vector<std::string> out;
  for (const auto& l : layers) {
    if (l.is_conv() && !l.nbsmt_exempt) out.push_back(l.name);
  }
  return out;
}

std::vector<std::string> LayerGraph::batchnorm_layers() const {
  std::vector<std::string> out;
  for (const auto& l : layers) {
    if (l.is_batchnorm()) out.push_back(l.name);
  }
  return out;
}

void apply_default_exemptions(LayerGraph& graph) {
  bool seen_conv = false;
  for (auto& l : graph.layers) {
    if (l.is_conv()) {
      l.nbsmt_exempt = !seen_conv;
      seen_conv = true;
    } else {
      l.nbsmt_exempt = l.is_fc();
    }
  }
}

std::vector<Shape> infer_shapes(const LayerGraph& graph) {
  std::vector<Shape> shapes;
  shapes.reserve(graph.layers.size());
  Shape cur = graph.input_shape;
  if (cur.size() != 3) throw Error(ErrorKind::kShapeMismatch, "input shape must be C,H,W");
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    if (const auto* c = std::get_if<Conv2d>(&l.op)) {
      if (cur.size() != 3 || cur[0] != c->in_channels()) {
        fail_layer(ErrorKind::kShapeMismatch, i, l.name,
                   "conv expects " + std::to_string(c->in_channels()) + " input channels, got " +
                       shape_to_string(cur));
      }
      const auto oh = (cur[1] + 2 * c->padding - c->kernel_h()) / c->stride + 1;
      const auto ow = (cur[2] + 2 * c->padding - c->kernel_w()) / c->stride + 1;
      if (oh <= 0 || ow <= 0) fail_layer(ErrorKind::kShapeMismatch, i, l.name, "empty conv output");
      cur = {c->out_channels(), oh, ow};
    } else if (const auto* b = std::get_if<BatchNorm>(&l.op)) {
      if (cur.empty() || cur[0] != b->params.channels()) {
        fail_layer(ErrorKind::kShapeMismatch, i, l.name,
                   "batchnorm has " + std::to_string(b->params.channels()) + " channels, input " +
                       shape_to_string(cur));
      }
    } else if (const auto* p = std::get_if<MaxPool>(&l.op)) {
      if (cur.size() != 3 || cur[1] < p->kernel || cur[2] < p->kernel) {
        fail_layer(ErrorKind::kShapeMismatch, i, l.name, "maxpool input " + shape_to_string(cur));
      }
      cur = {cur[0], (cur[1] - p->kernel) / p->stride + 1, (cur[2] - p->kernel) / p->stride + 1};
    } else if (const auto* f = std::get_if<FullyConnected>(&l.op)) {
      const auto in = element_count(cur);
      if (f->weight.rank() != 2 || f->weight.dim(1) != in) {
        fail_layer(ErrorKind::kShapeMismatch, i, l.name,
                   "fc weight " + shape_to_string(f->weight.shape) + " for input " + shape_to_string(cur));
      }
      cur = {f->weight.dim(0)};
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void validate(const LayerGraph& graph) {
  if (graph.num_classes <= 0) throw Error(ErrorKind::kValidation, "num_classes must be positive");
  if (graph.input_shape.size() != 3 || element_count(graph.input_shape) <= 0) {
    throw Error(ErrorKind::kValidation, "input_shape must be a positive C,H,W");
  }
  const auto channels = static_cast<std::size_t>(graph.input_shape[0]);
  if (graph.input_norm.mean.size() != channels || graph.input_norm.std.size() != channels) {
    throw Error(ErrorKind::kValidation, "input_norm must have one mean/std per input channel");
  }
  for (float s : graph.input_norm.std) {
    if (!(s > 0.0f) || !std::isfinite(s)) throw Error(ErrorKind::kValidation, "input_norm std must be positive");
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    if (l.name.empty() || !names.insert(l.name).second) {
      fail_layer(ErrorKind::kValidation, i, l.name, "layer names must be unique and nonempty");
    }
    if (const auto* c = std::get_if<Conv2d>(&l.op)) {
      if (c->weight.rank() != 4) fail_layer(ErrorKind::kShapeMismatch, i, l.name, "conv weight must be O,I,Kh,Kw");
      check_tensor(c->weight, c->weight.shape, i, l.name, "weight");
      check_tensor(c->bias, {c->out_channels()}, i, l.name, "bias");
      if (c->stride < 1 || c->padding < 0) fail_layer(ErrorKind::kValidation, i, l.name, "bad stride/padding");
    } else if (const auto* b = std::get_if<BatchNorm>(&l.op)) {
      const auto& p = b->params;
      const Shape ch{p.channels()};
      check_tensor(p.gamma, ch, i, l.name, "gamma");
      check_tensor(p.beta, ch, i, l.name, "beta");
      check_tensor(p.running_mean, ch, i, l.name, "running_mean");
      check_tensor(p.running_var, ch, i, l.name, "running_var");
      for (float v : p.running_var.data) {
        if (v < 0.0f) fail_layer(ErrorKind::kValidation, i, l.name, "negative running_var");
      }
      if (!(p.eps > 0.0f) || !std::isfinite(p.eps)) fail_layer(ErrorKind::kValidation, i, l.name, "eps must be > 0");
      if (!(p.momentum >= 0.0f && p.momentum <= 1.0f)) {
        fail_layer(ErrorKind::kValidation, i, l.name, "momentum must lie in [0,1]");
      }
    } else if (const auto* p = std::get_if<MaxPool>(&l.op)) {
      if (p->kernel < 1 || p->stride < 1) fail_layer(ErrorKind::kValidation, i, l.name, "bad pool kernel/stride");
    } else if (const auto* f = std::get_if<FullyConnected>(&l.op)) {
      if (f->weight.rank() != 2) fail_layer(ErrorKind::kShapeMismatch, i, l.name, "fc weight must be O,I");
      check_tensor(f->weight, f->weight.shape, i, l.name, "weight");
      check_tensor(f->bias, {f->weight.dim(0)}, i, l.name, "bias");
    }
  }
  const auto shapes = infer_shapes(graph);
  if (shapes.empty() || shapes.back() != Shape{graph.num_classes}) {
    throw Error(ErrorKind::kShapeMismatch,
                "graph output " + (shapes.empty() ? std::string("<none>") : shape_to_string(shapes.back())) +
                    " does not match num_classes " + std::to_string(graph.num_classes));
  }
}

bool bit_equal(const LayerGraph& a, const LayerGraph& b) {
  if (a.arch != b.arch || a.input_shape != b.input_shape || a.num_classes != b.num_classes ||
      !bits_equal(a.input_norm.mean, b.input_norm.mean) || !bits_equal(a.input_norm.std, b.input_norm.std) ||
      a.layers.size() != b.layers.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto& la = a.layers[i];
    const auto& lb = b.layers[i];
    if (la.name != lb.name || la.nbsmt_exempt != lb.nbsmt_exempt || la.op.index() != lb.op.index()) return false;
    if (const auto* c = std::get_if<Conv2d>(&la.op)) {
      const auto& d = std::get<Conv2d>(lb.op);
      if (!bit_equal(c->weight, d.weight) || !bit_equal(c->bias, d.bias) || c->stride != d.stride ||
          c->padding != d.padding)
        return false;
    } else if (const auto* bn = std::get_if<BatchNorm>(&la.op)) {
      const auto& p = bn->params;
      const auto& q = std::get<BatchNorm>(lb.op).params;
      if (!bit_equal(p.gamma, q.gamma) || !bit_equal(p.beta, q.beta) ||
          !bit_equal(p.running_mean, q.running_mean) || !bit_equal(p.running_var, q.running_var) ||
          !bits_equal(p.eps, q.eps) || !bits_equal(p.momentum, q.momentum))
        return false;
    } else if (const auto* mp = std::get_if<MaxPool>(&la.op)) {
      if (!(*mp == std::get<MaxPool>(lb.op))) return false;
    } else if (const auto* f = std::get_if<FullyConnected>(&la.op)) {
      const auto& g = std::get<FullyConnected>(lb.op);
      if (!bit_equal(f->weight, g.weight) || !bit_equal(f->bias, g.bias)) return false;
    }
  }
  return true;
}

LayerGraph load_model(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + manifest_path.string());
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  LayerGraph g;
  std::vector<std::optional<bool>> exempt_flags;
  try {
    if (m.at("version").get<int>() != kManifestVersion) {
      throw Error(ErrorKind::kFormat, "unsupported manifest version " + m.at("version").dump());
    }
    g.arch = m.at("arch").get<std::string>();
    g.input_shape = m.at("input_shape").get<Shape>();
    g.num_classes = m.at("num_classes").get<int>();
    g.input_norm.mean = m.at("input_norm").at("mean").get<std::vector<float>>();
    g.input_norm.std = m.at("input_norm").at("std").get<std::vector<float>>();
    const auto& layers = m.at("layers");
    if (!layers.is_array()) throw Error(ErrorKind::kFormat, "manifest 'layers' must be an array");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& lj = layers[i];
      Layer l;
      l.name = lj.value("name", std::string{});
      const auto kind = lj.at("kind").get<std::string>();
      try {
        if (kind == "conv2d") {
          const auto shape = lj.at("shape").get<Shape>();
          if (shape.size() != 4) fail_layer(ErrorKind::kShapeMismatch, i, l.name, "conv shape must be O,I,Kh,Kw");
          Conv2d c;
          c.weight = read_blob(dir, lj.at("blob").at("weight"), shape, i, l.name, "weight");
          c.bias = read_blob(dir, lj.at("blob").at("bias"), {shape[0]}, i, l.name, "bias");
          c.stride = lj.value("stride", 1);
          c.padding = lj.value("padding", 0);
          l.op = std::move(c);
        } else if (kind == "batchnorm") {
          const auto shape = lj.at("shape").get<Shape>();
          if (shape.size() != 1) fail_layer(ErrorKind::kShapeMismatch, i, l.name, "batchnorm shape must be [C]");
          BatchNorm b;
          const auto& blob = lj.at("blob");
          b.params.gamma = read_blob(dir, blob.at("gamma"), shape, i, l.name, "gamma");
          b.params.beta = read_blob(dir, blob.at("beta"), shape, i, l.name, "beta");
          b.params.running_mean = read_blob(dir, blob.at("running_mean"), shape, i, l.name, "running_mean");
          b.params.running_var = read_blob(dir, blob.at("running_var"), shape, i, l.name, "running_var");
          b.params.eps = lj.at("eps").get<float>();
          b.params.momentum = lj.value("momentum", 0.1f);
          l.op = std::move(b);
        } else if (kind == "relu") {
          l.op = ReLU{};
        } else if (kind == "maxpool") {
          l.op = MaxPool{lj.value("kernel", 2), lj.value("stride", 2)};
        } else if (kind == "fc") {
          const auto shape = lj.at("shape").get<Shape>();
          if (shape.size() != 2) fail_layer(ErrorKind::kShapeMismatch, i, l.name, "fc shape must be O,I");
          FullyConnected f;
          f.weight = read_blob(dir, lj.at("blob").at("weight"), shape, i, l.name, "weight");
          f.bias = read_blob(dir, lj.at("blob").at("bias"), {shape[0]}, i, l.name, "bias");
          l.op = std::move(f);
        } else {
          fail_layer(ErrorKind::kFormat, i, l.name, "unknown layer kind '" + kind + "'");
        }
      } catch (const json::exception& e) {
        fail_layer(ErrorKind::kFormat, i, l.name, e.what());
      }
      exempt_flags.push_back(lj.contains("nbsmt_exempt") ? std::optional<bool>(lj.at("nbsmt_exempt").get<bool>())
                                                         : std::nullopt);
      g.layers.push_back(std::move(l));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, "malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  apply_default_exemptions(g);
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    if (exempt_flags[i]) g.layers[i].nbsmt_exempt = *exempt_flags[i];
  }
  validate(g);
  return g;
}

void save_model(const LayerGraph& graph, const fs::path& dir) {
  validate(graph);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + dir.string() + ": " + ec.message());

  json layers = json::array();
  for (const auto& l : graph.layers) {
    json lj{{"kind", l.kind()}, {"name", l.name}};
    if (const auto* c = std::get_if<Conv2d>(&l.op)) {
      lj["shape"] = c->weight.shape;
      lj["stride"] = c->stride;
      lj["padding"] = c->padding;
      lj["nbsmt_exempt"] = l.nbsmt_exempt;
      lj["blob"] = {{"weight", write_blob(dir, l.name + ".weight.bin", c->weight)},
                    {"bias", write_blob(dir, l.name + ".bias.bin", c->bias)}};
    } else if (const auto* b = std::get_if<BatchNorm>(&l.op)) {
      const auto& p = b->params;
      lj["shape"] = Shape{p.channels()};
      lj["eps"] = p.eps;
      lj["momentum"] = p.momentum;
      lj["blob"] = {{"gamma", write_blob(dir, l.name + ".gamma.bin", p.gamma)},
                    {"beta", write_blob(dir, l.name + ".beta.bin", p.beta)},
                    {"running_mean", write_blob(dir, l.name + ".running_mean.bin", p.running_mean)},
                    {"running_var", write_blob(dir, l.name + ".running_var.bin", p.running_var)}};
    } else if (const auto* p = std::get_if<MaxPool>(&l.op)) {
      lj["kernel"] = p->kernel;
      lj["stride"] = p->stride;
    } else if (const auto* f = std::get_if<FullyConnected>(&l.op)) {
      lj["shape"] = f->weight.shape;
      lj["nbsmt_exempt"] = l.nbsmt_exempt;
      lj["blob"] = {{"weight", write_blob(dir, l.name + ".weight.bin", f->weight)},
                    {"bias", write_blob(dir, l.name + ".bias.bin", f->bias)}};
    }
    layers.push_back(std::move(lj));
  }
  json m{{"version", kManifestVersion},
         {"arch", graph.arch},
         {"input_shape", graph.input_shape},
         {"num_classes", graph.num_classes},
         {"input_norm", {{"mean", graph.input_norm.mean}, {"std", graph.input_norm.std}}},
         {"layers", std::move(layers)}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + (dir / "manifest.json").string());
  out << m.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::kIo, "short write to " + (dir / "manifest.json").string());
}

}  // namespace nbsmt
