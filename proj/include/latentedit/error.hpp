#pragma once

#include <stdexcept>
#include <string>

namespace latentedit {

// Base for every error raised by the library. Callers that only care about
// "something went wrong" catch this; the subclasses exist so tests and the
// service layer can map failures to specific responses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CorruptFileError : public IoError {
 public:
  using IoError::IoError;
};

class VersionError : public IoError {
 public:
  using IoError::IoError;
};

class BackendError : public Error {
 public:
  using Error::Error;
};

class AssetMissingError : public BackendError {
 public:
  using BackendError::BackendError;
};

class NotRenderableError : public BackendError {
 public:
  using BackendError::BackendError;
};

}  // namespace latentedit
