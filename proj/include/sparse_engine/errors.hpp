#pragma once

#include <stdexcept>
#include <string>

namespace sparse_engine {

// A file could not be opened, read or written.
class IoError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

// A file was readable but its contents are malformed.
class FormatError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

// Inputs are individually valid but do not belong together, e.g. thresholds
// calibrated for a different model shape.
class MismatchError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

} // namespace sparse_engine
