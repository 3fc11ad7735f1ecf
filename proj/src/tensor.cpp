#include "nbsmt/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "nbsmt/error.hpp"

namespace nbsmt {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kChecksum: return "checksum";
    case ErrorKind::kValidation: return "validation";
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kOverflow: return "overflow";
  }
  return "unknown";
}

std::int64_t element_count(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw Error(ErrorKind::kShapeMismatch, "negative extent in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(element_count(shape)), 0.0f) {}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  if (element_count(shape) != static_cast<std::int64_t>(data.size())) {
    throw Error(ErrorKind::kShapeMismatch, "tensor of shape " + shape_to_string(shape) + " given " +
                                               std::to_string(data.size()) + " elements");
  }
}

bool Tensor::all_finite() const {
  for (float v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         (a.data.empty() || std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
}

}  // namespace nbsmt
