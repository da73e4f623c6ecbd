#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sdrc {

inline constexpr const char* kVersionString = "0.1.0";

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor extents do not fit the operation.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// A stated precondition was violated (non-scalar backward output,
// m < 2 samples, zero k, non-finite values, ...).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(what) {}
};

// Input is numerically degenerate: zero-norm vector under cosine,
// all-constant representation entering CKA, and the like.
class DegenerateInputError : public Error {
 public:
  explicit DegenerateInputError(const std::string& what) : Error(what) {}
};

// A mask with an empty side; carries which side was empty.
class DegenerateMaskError : public DegenerateInputError {
 public:
  enum class Side { kForeground, kBackground };
  DegenerateMaskError(Side side, const std::string& what)
      : DegenerateInputError(what), side_(side) {}
  Side side() const { return side_; }

 private:
  Side side_;
};

// Malformed binary file; carries the byte offset of the defect.
class ParseError : public Error {
 public:
  ParseError(std::size_t offset, const std::string& what)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Malformed config text; message names the key and line.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

}  // namespace sdrc
