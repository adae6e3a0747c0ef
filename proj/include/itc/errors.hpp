#pragma once

#include <stdexcept>
#include <string>

namespace itc {

// Error taxonomy. The CLI maps these onto exit codes: ConfigError -> 2,
// NumericalError -> 3, everything else -> 1.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad configuration, bad file contents, mismatched shapes between inputs.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// Numerical failure: infeasible transport problem, non-finite loss,
// binarization that fails to settle.
class NumericalError : public Error {
public:
  explicit NumericalError(const std::string& what) : Error(what) {}
};

class IoError : public Error {
public:
  explicit IoError(const std::string& what) : Error(what) {}
};

}  // namespace itc
