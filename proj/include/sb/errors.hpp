#pragma once

#include <stdexcept>
#include <string>

namespace sb {

/// Bad input, configuration or file contents. The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite loss during optimization. The CLI maps this to exit code 3.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& context, double value)
      : std::runtime_error("loss diverged (" + context + ", value=" + std::to_string(value) + ")"),
        context_(context),
        value_(value) {}
  const std::string& context() const { return context_; }
  double value() const { return value_; }

 private:
  std::string context_;
  double value_;
};

}  // namespace sb
