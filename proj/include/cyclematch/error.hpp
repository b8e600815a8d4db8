#pragma once

#include <stdexcept>
#include <string>

namespace cyclematch {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or truncated file contents.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Caller supplied inconsistent shapes or out-of-range arguments.
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// The requested class has no foreground cell in the reference mask.
class EmptyForeground : public Error {
public:
    using Error::Error;
};

/// A mask with no foreground or no background where both are required.
class DegenerateMask : public Error {
public:
    using Error::Error;
};

/// Invalid command line or run configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

class NumericsError : public Error {
public:
    using Error::Error;
};

/// Failure talking to an external mask decoder.
class BridgeError : public Error {
public:
    using Error::Error;
};

}  // namespace cyclematch
