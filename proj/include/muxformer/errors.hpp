#pragma once

#include <stdexcept>
#include <string>

namespace muxformer {

// Shape/size mismatch between tensors or between a tensor and an op's
// expectation. Messages always carry the offending shapes.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid model/run configuration (violated constraint is named).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// API precondition violated by the caller (bad index, non-scalar loss, ...).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

class UnsupportedOpError : public std::runtime_error {
 public:
  explicit UnsupportedOpError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed dataset or embedding file; message includes the byte offset.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// A forward value became NaN/Inf; message names the first bad tensor path.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace muxformer
