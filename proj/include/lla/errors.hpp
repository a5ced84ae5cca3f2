#pragma once

#include <stdexcept>
#include <string>

namespace lla {

// Base of every error raised by the library. The CLI maps ConfigError to
// exit code 2 and everything else to 3.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
  using Error::Error;
};

class InputError : public Error {
public:
  using Error::Error;
};

class FormatError : public Error {
public:
  using Error::Error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

class ResourceError : public Error {
public:
  using Error::Error;
};

class UnsupportedDimension : public Error {
public:
  using Error::Error;
};

class NumericError : public Error {
public:
  using Error::Error;
};

// No block of the model shows a feature outlier at the requested threshold.
class SelectionError : public Error {
public:
  using Error::Error;
};

// Planting outliers into a synthetic model failed verification.
class ConstructionError : public Error {
public:
  using Error::Error;
};

// Internal consistency check of the systolic simulator tripped.
class SimulatorError : public Error {
public:
  using Error::Error;
};

// Attack optimisation diverged (non-finite loss).
class AttackError : public Error {
public:
  using Error::Error;
};

} // namespace lla
