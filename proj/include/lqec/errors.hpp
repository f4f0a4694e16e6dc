#pragma once

#include <stdexcept>
#include <string>

namespace lqec {

// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes do not conform to an operation's requirements.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Input values are outside an operation's mathematical domain.
class DomainError : public Error {
public:
    using Error::Error;
};

// An API precondition was violated by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

// A configuration object is inconsistent or out of range.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Runtime input data (tokens, corpora, file contents) is invalid.
class InputError : public Error {
public:
    using Error::Error;
};

// A serialized container could not be parsed.
class ParseError : public Error {
public:
    using Error::Error;
};

// A parsed container is structurally valid but internally inconsistent.
class IntegrityError : public Error {
public:
    using Error::Error;
};

}  // namespace lqec
