#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedsparse {

// Every error raised by the library derives from Error so callers can catch
// one type at the boundary (the CLI maps the subtypes onto exit codes).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidArgument : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ParseError : Error {
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : Error(what + " (row " + std::to_string(row) + ", column " + std::to_string(column) + ")"),
        row(row),
        column(column) {}

  std::size_t row;
  std::size_t column;
};

struct InvalidData : Error {
  using Error::Error;
};

struct UnsupportedOperation : Error {
  using Error::Error;
};

struct UndefinedMetric : Error {
  using Error::Error;
};

// Raised inside a run when an iterate, gradient or aggregate stops being
// finite. run_algorithm catches it and flags the trace instead of crashing.
struct DivergenceError : Error {
  DivergenceError(const std::string& what, std::size_t iteration)
      : Error(what + " at iteration " + std::to_string(iteration)), iteration(iteration) {}

  std::size_t iteration;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace fedsparse
