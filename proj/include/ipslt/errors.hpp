#pragma once

#include <stdexcept>

namespace ipslt {

// Caller misuse: bad arguments, wrong mode, violated precondition.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Tensor shape disagreement; the message names both shapes.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Token id or index outside its valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Malformed file content; the message carries a line number where known.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure (missing file, short read, refused overwrite).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ipslt
