#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace nlvt {

// Tensor shapes that do not conform to an operation.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid model/train/augmentation configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke an operation precondition (non-scalar backward, pixel out of range, ...).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed binary image data. Carries the byte offset at which parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Malformed text input (manifest CSV, config file). Carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Checkpoint failed its integrity or compatibility checks.
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A forward op produced NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A file could not be opened.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace nlvt
