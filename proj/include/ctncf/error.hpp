#pragma once

#include <stdexcept>
#include <string>

namespace ctncf {

// Shape/argument contract violations in the tensor and model layers.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad input files, empty logs, unusable splits.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite losses or gradients during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ctncf
