#ifndef LATENT3D_ERRORS_HPP
#define LATENT3D_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace latent3d {

/// Bad input: malformed files, invalid configs, violated preconditions.
/// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Failure while doing otherwise valid work (IO, subprocesses, divergence).
/// The CLI maps this to exit code 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

class ShapeMismatch : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ExternalStepError : public RuntimeFailure {
 public:
  ExternalStepError(const std::string& what, std::string captured_output)
      : RuntimeFailure(what), output_(std::move(captured_output)) {}
  const std::string& output() const { return output_; }

 private:
  std::string output_;
};

class DivergenceError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ValidationError(msg);
}

}  // namespace latent3d

#endif
