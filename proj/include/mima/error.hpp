#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mima {

enum class Errc {
  DimensionMismatch,
  NotSPD,
  NonFiniteFunctionValue,
  SingularQ,
  SingularSchur,
  StaleFactorization,
  SignatureMismatch,
  ShapeMismatch,
  IncompatibleSignature,
  NonFiniteLoss,
  NonFiniteGradient,
  EmptyBatch,
  DegenerateDenominator,
  ConfigError,
  ResampleLimitExceeded,
  IoError,
  InvalidArgument,
};

std::string_view to_string(Errc code);

// Every failure in the library is reported as an Error carrying a code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace mima
