#pragma once

#include <stdexcept>
#include <string>

namespace pgt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible shapes for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Operand outside an operation's mathematical domain (log of non-positive, division by zero).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A softmax row with no admissible entry.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

class RankError : public Error {
 public:
  using Error::Error;
};

// Bad caller-supplied data (empty sets, non-finite coordinates, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed command line or unknown command/suite.
class UsageError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class CompatibilityError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

}  // namespace pgt
