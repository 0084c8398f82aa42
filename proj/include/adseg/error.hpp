#pragma once

#include <stdexcept>
#include <string>

namespace adseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Raised by the sparse correction loss when no pixel carries a label.
class NoCorrectionsError : public Error {
 public:
  NoCorrectionsError() : Error("no corrected pixels: correction map is entirely -1") {}
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

#define ADSEG_CHECK(cond, ExType, msg)     \
  do {                                     \
    if (!(cond)) throw ExType(std::string(msg)); \
  } while (0)

}  // namespace adseg
