#pragma once

#include <stdexcept>
#include <string>

namespace sgds {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UndecodableFrame : public Error {
 public:
  UndecodableFrame() : Error("undecodable frame") {}
};

class DegenerateEmbedding : public Error {
 public:
  DegenerateEmbedding() : Error("degenerate embedding") {}
};

class InvalidGuidedTarget : public Error {
 public:
  explicit InvalidGuidedTarget(double precision)
      : Error("invalid guided target: precision " + std::to_string(precision) + " <= 0"), precision_(precision) {}
  double precision() const { return precision_; }

 private:
  double precision_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace sgds
