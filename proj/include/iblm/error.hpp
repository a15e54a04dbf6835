#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iblm {

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  ShapeError(std::string op, const Shape& a, const Shape& b)
      : Error(op + ": incompatible shapes " + iblm::to_string(a) + " and " + iblm::to_string(b)),
        op_(std::move(op)),
        lhs_(a),
        rhs_(b) {}
  ShapeError(std::string op, const Shape& a, const std::string& what)
      : Error(op + ": " + what + " (shape " + iblm::to_string(a) + ")"), op_(std::move(op)), lhs_(a) {}

  const std::string& op() const noexcept { return op_; }
  const Shape& lhs() const noexcept { return lhs_; }
  const Shape& rhs() const noexcept { return rhs_; }

 private:
  std::string op_;
  Shape lhs_;
  Shape rhs_;
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, int iterations)
      : Error(what + " after " + std::to_string(iterations) + " sweeps"), iterations_(iterations) {}
  int iterations() const noexcept { return iterations_; }

 private:
  int iterations_;
};

class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, std::size_t coordinate)
      : Error(what + " (coordinate " + std::to_string(coordinate) + ")"), coordinate_(coordinate) {}
  std::size_t coordinate() const noexcept { return coordinate_; }

 private:
  std::size_t coordinate_;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace iblm
