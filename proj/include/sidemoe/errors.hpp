#pragma once

#include <stdexcept>
#include <string>

namespace sidemoe {

// Error taxonomy shared by the library and the CLI. The CLI maps these onto
// process exit codes (config -> 2, numeric -> 3, io -> 4).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace sidemoe
