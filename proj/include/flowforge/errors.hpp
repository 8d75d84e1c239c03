#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace flowforge {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Raised by binary readers. Each kind is distinct so callers can tell a
// foreign file from a damaged or outdated one.
class FormatError : public Error {
public:
    enum class Kind { BadMagic, Truncated, VersionMismatch, Malformed };

    FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// A numerical process produced non-finite values. `where` names the process
// (svd-solve, training, sampling, optimizer), `index` the iteration/step.
class DivergenceError : public Error {
public:
    DivergenceError(std::string where, std::int64_t index, const std::string& what)
        : Error(what), where_(std::move(where)), index_(index) {}
    const std::string& where() const noexcept { return where_; }
    std::int64_t index() const noexcept { return index_; }

private:
    std::string where_;
    std::int64_t index_;
};

}  // namespace flowforge
