#pragma once

#include <stdexcept>
#include <string>

namespace ropeforge {

// Base of every error the library throws. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Vector or tensor dimensions disagree with the configuration.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A sequence is longer than the context the active factors support, or a
// document is shorter than the length an operation needs.
class LengthError : public Error {
public:
    using Error::Error;
};

class VocabError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
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

// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace ropeforge
