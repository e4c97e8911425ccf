#pragma once

#include <stdexcept>
#include <string>

namespace vitprune {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller supplied an out-of-range index, empty input or invalid setting.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An iterative numeric routine failed to converge or produced non-finite values.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}

  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

/// Malformed file: bad magic, truncated record, inconsistent header field.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The adaptive loop exhausted its thresholds before reaching the target rate.
class UnreachableTargetError : public std::runtime_error {
 public:
  UnreachableTargetError(const std::string& what, double best_rate)
      : std::runtime_error(what), best_rate_(best_rate) {}

  double best_rate() const noexcept { return best_rate_; }

 private:
  double best_rate_;
};

/// Training produced a non-finite loss; the model was restored to its last good state.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : std::runtime_error(what), epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace vitprune
