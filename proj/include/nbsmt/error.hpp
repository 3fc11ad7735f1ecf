#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nbsmt {

enum class ErrorKind {
  kIo,
  kFormat,
  kShapeMismatch,
  kChecksum,
  kValidation,
  kInvalidArgument,
  kOverflow,
};

std::string_view to_string(ErrorKind kind);

// All library failures surface as this type; `kind()` is what the CLI prints
// in its machine-parsable error line.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace nbsmt
