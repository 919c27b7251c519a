#pragma once

#include <stdexcept>
#include <string>

namespace mtkd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimensions disagree with what an operation requires.
struct ShapeError : Error {
  using Error::Error;
};

// NaN or Inf showed up in a forward or backward pass.
struct NumericError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace mtkd
