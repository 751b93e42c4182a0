#pragma once

#include <stdexcept>
#include <string>

namespace ssr3d {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree along a named axis.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Kernel, stride, padding or crop geometry admits no valid output.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition (e.g. backward from a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed HSC or checkpoint bytes. Messages carry the byte offset.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given inputs (e.g. SAM over all-zero spectra).
class MetricError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity reached a gradient or a loss value.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace ssr3d
