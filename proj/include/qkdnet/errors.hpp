#pragma once

#include <stdexcept>
#include <string>

namespace qkdnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value violates a type invariant. `field()` names the offending field.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Malformed or truncated wire data.
class DecodeError : public Error {
 public:
  using Error::Error;
};

}  // namespace qkdnet
