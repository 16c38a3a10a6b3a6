#pragma once

#include <stdexcept>
#include <string>

namespace lungseg {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension / shape mismatch between tensors or between a tensor and an op contract.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Invalid run or model configuration (bad key, missing seed, indivisible dims, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Problems with datasets, manifests or files on disk.
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

/// Numerical failure: NaN loss, failed gradient check, corrupted pooling indices.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// Misuse of the autodiff tape (non-scalar loss, second backward over the same ops).
class TapeError : public Error {
 public:
  explicit TapeError(const std::string& msg) : Error(msg) {}
};

}  // namespace lungseg
