#pragma once

#include <stdexcept>
#include <string>

namespace flgames {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class LabelError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class LengthError : public Error {
public:
    using Error::Error;
};

class EmptyBufferError : public Error {
public:
    using Error::Error;
};

class VariantError : public Error {
public:
    using Error::Error;
};

}  // namespace flgames
