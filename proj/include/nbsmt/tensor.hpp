#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace nbsmt {

using Shape = std::vector<std::int64_t>;

std::int64_t element_count(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense float32 tensor, row-major. Activations are N,C,H,W; conv weights
/// O,I,Kh,Kw; FC weights O,I.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s);
  Tensor(Shape s, std::vector<float> values);

  std::int64_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }

  std::span<float> values() { return data; }
  std::span<const float> values() const { return data; }

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Bitwise equality (distinguishes -0.0 from 0.0 and compares NaN payloads).
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace nbsmt
