#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "nbsmt/error.hpp"
#include "nbsmt/model.hpp"
#include "support/builders.hpp"

using namespace nbsmt;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected nbsmt::Error");
  return ErrorKind::kIo;
}

}  // namespace

TEST_CASE("save/load round trip is bit exact") {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    auto g = testing::tiny_graph(seed);
    // awkward values that text formats would mangle
    std::get<Conv2d>(g.layers[0].op).weight.data[0] = -0.0f;
    std::get<Conv2d>(g.layers[0].op).weight.data[1] = std::numeric_limits<float>::denorm_min();
    std::get<Conv2d>(g.layers[0].op).weight.data[2] = 0.1f;
    auto dir = testing::scratch_dir("roundtrip");
    save_model(g, dir);
    auto back = load_model(dir);
    CHECK(bit_equal(g, back));
    CHECK(back == g);
  }
}

TEST_CASE("exemption flags survive the container") {
  auto g = testing::tiny_graph();
  g.layer("conv3").nbsmt_exempt = true;
  auto dir = testing::scratch_dir("exempt");
  save_model(g, dir);
  auto back = load_model(dir);
  CHECK(back.layer("conv3").nbsmt_exempt);
  CHECK(back.layer("conv1").nbsmt_exempt);
  CHECK_FALSE(back.layer("conv2").nbsmt_exempt);
}

TEST_CASE("wrong blob byte length names the layer") {
  auto g = testing::tiny_graph();
  auto dir = testing::scratch_dir("badblob");
  save_model(g, dir);
  {
    std::ofstream f(dir / "conv2.weight.bin", std::ios::binary | std::ios::app);
    f.write("\0\0\0\0", 4);
  }
  try {
    load_model(dir);
    FAIL("load should fail");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kShapeMismatch);
    CHECK(std::string(e.what()).find("conv2") != std::string::npos);
  }
}

TEST_CASE("corrupted blob fails the checksum") {
  auto g = testing::tiny_graph();
  auto dir = testing::scratch_dir("crc");
  save_model(g, dir);
  {
    std::fstream f(dir / "bn3.gamma.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(1);
    f.put('\x5a');
  }
  CHECK(kind_of([&] { load_model(dir); }) == ErrorKind::kChecksum);
}

TEST_CASE("manifest shape disagreeing with the graph is rejected") {
  auto g = testing::tiny_graph();
  auto dir = testing::scratch_dir("shape");
  save_model(g, dir);
  nlohmann::json m;
  std::ifstream(dir / "manifest.json") >> m;
  for (auto& l : m["layers"]) {
    if (l["name"] == "fc") l["shape"] = {4, 81};
  }
  std::ofstream(dir / "manifest.json") << m.dump(2);
  CHECK(kind_of([&] { load_model(dir); }) == ErrorKind::kShapeMismatch);
}

TEST_CASE("NaN weights cannot be saved") {
  auto g = testing::tiny_graph();
  std::get<Conv2d>(g.layer("conv3").op).weight.data[5] = std::nanf("");
  auto dir = testing::scratch_dir("nan");
  CHECK(kind_of([&] { save_model(g, dir); }) == ErrorKind::kValidation);
  CHECK_FALSE(std::filesystem::exists(dir / "manifest.json"));
}

TEST_CASE("validation catches structural errors") {
  auto g = testing::tiny_graph();
  SUBCASE("duplicate names") {
    g.layers[1].name = "conv1";
    CHECK(kind_of([&] { validate(g); }) == ErrorKind::kValidation);
  }
  SUBCASE("fc fan-in mismatch") {
    std::get<FullyConnected>(g.layer("fc").op).weight = Tensor({4, 79});
    CHECK(kind_of([&] { validate(g); }) == ErrorKind::kShapeMismatch);
  }
  SUBCASE("negative running variance") {
    std::get<BatchNorm>(g.layer("bn2").op).params.running_var.data[0] = -1.0f;
    CHECK(kind_of([&] { validate(g); }) == ErrorKind::kValidation);
  }
  SUBCASE("wrong class count") {
    g.num_classes = 5;
    CHECK(kind_of([&] { validate(g); }) == ErrorKind::kShapeMismatch);
  }
}

TEST_CASE("shape inference") {
  auto g = testing::tiny_graph();
  auto shapes = infer_shapes(g);
  REQUIRE(shapes.size() == g.layers.size());
  CHECK(shapes[0] == Shape{4, 8, 8});
  CHECK(shapes[5] == Shape{6, 4, 4});
  CHECK(shapes.back() == Shape{4});
}

TEST_CASE("default exemptions") {
  auto g = testing::tiny_graph();
  CHECK(g.eligible_layers() == std::vector<std::string>{"conv2", "conv3", "conv4"});
  CHECK(g.batchnorm_layers() == std::vector<std::string>{"bn2", "bn3", "bn4"});
  CHECK(g.layer("fc").nbsmt_exempt);
}

TEST_CASE("dense fixture layout") {
  auto g = load_model(testing::fixture_dir() / "deskcnn_mnist");
  int convs = 0, bns = 0, fcs = 0;
  for (const auto& l : g.layers) {
    convs += l.is_conv();
    bns += l.is_batchnorm();
    fcs += l.is_fc();
  }
  CHECK(convs == 4);
  CHECK(bns == 3);
  CHECK(fcs == 1);
  CHECK(g.eligible_layers().size() == 3);
  CHECK(g.input_shape == Shape{1, 28, 28});
}
