#pragma once

#include <stdexcept>
#include <string>

namespace sbsg {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can separate library failures from programming bugs.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or axes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class VocabError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class BenchmarkError : public Error {
 public:
  using Error::Error;
};

}  // namespace sbsg
