#pragma once

#include <stdexcept>
#include <string>

namespace flowseg {

/// Incompatible tensor dimensions for an operation.
class ShapeError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values entering or leaving a computation.
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition.
class ContractError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

/// I/O failure; the message always carries the offending path.
class FileError : public std::runtime_error {
   public:
    FileError(const std::string& path, const std::string& what)
        : std::runtime_error(what + ": " + path), path_(path) {}

    const std::string& path() const noexcept { return path_; }

   private:
    std::string path_;
};

}  // namespace flowseg
