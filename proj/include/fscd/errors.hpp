#pragma once

#include <stdexcept>
#include <string>

namespace fscd {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// A referenced file or directory does not exist or cannot be opened.
class MissingFileError : public Error {
 public:
  explicit MissingFileError(const std::string& msg) : Error(msg) {}
};

// A record violates the dataset or prediction schema. The message names the
// offending record and field.
class SchemaViolationError : public Error {
 public:
  explicit SchemaViolationError(const std::string& msg) : Error(msg) {}
};

// A synthetic scene spec cannot be satisfied within the retry budget.
class InfeasibleSpecError : public Error {
 public:
  explicit InfeasibleSpecError(const std::string& msg) : Error(msg) {}
};

// Array shapes do not line up.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid numeric input (non-finite cost, nonpositive sigma, ...).
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

// A pipeline stage was invoked without its upstream artifact.
class MissingPrerequisiteError : public Error {
 public:
  explicit MissingPrerequisiteError(const std::string& msg) : Error(msg) {}
};

}  // namespace fscd
