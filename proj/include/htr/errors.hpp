#pragma once

#include <stdexcept>
#include <string>

namespace htr {

/// Base of every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shapes or extents that do not fit together.
struct DimensionError : Error {
  using Error::Error;
};

/// API misuse: missing cache, bad argument range, empty input where one is required.
struct UsageError : Error {
  using Error::Error;
};

/// NaN/Inf produced or consumed.
struct NumericError : Error {
  using Error::Error;
};

/// Invalid run configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed corpus, image, transcript or file.
struct InputError : Error {
  using Error::Error;
};

/// Artifacts that do not belong together (charset hash, architecture).
struct MismatchError : Error {
  using Error::Error;
};

/// CTC label that cannot be aligned to the available time steps.
struct InfeasibleLabelError : Error {
  using Error::Error;
};

/// Exhaustive enumeration that would exceed its guard.
struct SizeError : Error {
  using Error::Error;
};

}  // namespace htr
