#pragma once

#include <stdexcept>
#include <string>

namespace arith {

// Exit codes shared by every CLI entry point.
enum class ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kData = 2,
  kNumeric = 3,
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent inputs: bad files, unsatisfiable dataset
// requests, shape mismatches, checksum failures.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Divergence or non-finite values during optimization.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace arith
