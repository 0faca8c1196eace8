#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cbna {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or channel mismatch in a tensor kernel.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid call arguments (bad policy, window mismatch, ...).
struct ArgumentError : Error {
  using Error::Error;
};

// Malformed checkpoint or dataset file.
struct FormatError : Error {
  using Error::Error;
};

// Inconsistent data content (label indices out of range, ...).
struct DataError : Error {
  using Error::Error;
};

// Metric undefined for the requested inputs.
struct MetricError : Error {
  using Error::Error;
};

// Training diverged; carries the offending step index.
struct TrainError : Error {
  TrainError(const std::string& msg, size_t step_) : Error(msg), step(step_) {}
  size_t step = 0;
};

}  // namespace cbna
