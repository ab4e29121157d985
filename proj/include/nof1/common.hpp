// Shared error types and small helpers used across the library.
#ifndef NOF1_COMMON_HPP
#define NOF1_COMMON_HPP

#include <charconv>
#include <stdexcept>
#include <string>
#include <vector>

namespace nof1 {

// Shortest decimal string that round-trips to the same double. Used by
// every writer so that reruns are byte-identical.
inline std::string format_number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid inputs: bad files, schema violations, out-of-range requests.
struct ValidationError : Error {
  using Error::Error;
};

// Numerical degeneracies: non-PSD matrices, non-positive innovation
// variance, optimizer failures that cannot be recovered from.
struct NumericalError : Error {
  using Error::Error;
};

// Optional sink for non-fatal diagnostics (near-singular matrices handled
// by pseudo-inverse, clamped eigenvalues, optimizer budget exhaustion).
using WarningLog = std::vector<std::string>;

inline void warn(WarningLog* log, const std::string& msg) {
  if (log) log->push_back(msg);
}

}  // namespace nof1

#endif  // NOF1_COMMON_HPP
