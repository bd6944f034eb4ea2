#pragma once

#include <stdexcept>
#include <string>

namespace pointvector {

/// Base of every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Array extents or counts do not fit together.
struct SizeError : Error {
  using Error::Error;
};

/// A configuration value is invalid or unknown.
struct ConfigError : Error {
  using Error::Error;
};

/// A computation produced NaN/Inf, or a gradient did.
struct NumericFault : Error {
  using Error::Error;
};

/// Caller broke an API contract (e.g. backward from a non-scalar).
struct ContractError : Error {
  using Error::Error;
};

/// Batch statistics cannot be formed (fewer than two samples per channel).
struct DegenerateStatistics : Error {
  using Error::Error;
};

/// A neighborhood has no usable entry.
struct EmptyNeighborhood : Error {
  using Error::Error;
};

/// Label or sample data is out of range.
struct DataError : Error {
  using Error::Error;
};

/// Text input could not be parsed. Carries the 1-based line number.
struct ParseError : Error {
  ParseError(const std::string& what, std::size_t line_no)
      : Error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
  std::size_t line;
};

/// Rows of a text file disagree on their column count.
struct FormatError : Error {
  using Error::Error;
};

/// Checkpoint missing, truncated or incompatible with the model.
struct CheckpointError : Error {
  using Error::Error;
};

/// A reference oracle was asked for something it cannot do.
struct OracleError : Error {
  using Error::Error;
};

}  // namespace pointvector
