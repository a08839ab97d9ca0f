#pragma once

#include <stdexcept>
#include <string>

namespace dpimg {

// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorCode {
  kInvalidArgument,  // rejected input: precondition or shape violation
  kFormat,           // malformed file contents
  kIo,               // filesystem failure
  kConvergence,      // iterative solver hit its cap
  kSingular,         // non-positive pivot in a factorization
  kDegenerate,       // data has no variance to model
};

inline const char* ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kFormat: return "format error";
    case ErrorCode::kIo: return "I/O error";
    case ErrorCode::kConvergence: return "convergence error";
    case ErrorCode::kSingular: return "singularity error";
    case ErrorCode::kDegenerate: return "degenerate model";
  }
  return "error";
}

inline bool IsNumerical(ErrorCode code) {
  return code == ErrorCode::kConvergence || code == ErrorCode::kSingular ||
         code == ErrorCode::kDegenerate;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

// Raised by the Jacobi solver; carries the off-diagonal norm it reached.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& message, double off_diagonal_norm)
      : Error(ErrorCode::kConvergence, message),
        off_diagonal_norm_(off_diagonal_norm) {}

  double off_diagonal_norm() const { return off_diagonal_norm_; }

 private:
  double off_diagonal_norm_;
};

[[noreturn]] inline void Fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void Require(bool condition, const std::string& message) {
  if (!condition) Fail(ErrorCode::kInvalidArgument, message);
}

}  // namespace dpimg
