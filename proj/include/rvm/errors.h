#pragma once

#include <stdexcept>
#include <string>

namespace rvm {

// Process exit codes shared by the CLI and the replay engine.
enum class ExitCode : int {
    Ok = 0,
    Usage = 1,
    Divergence = 2,
    CorruptLog = 3,
    ImageMismatch = 4,
    GuestLayout = 5,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const { return ExitCode::Usage; }
};

class EncodeError : public Error {
public:
    using Error::Error;
};

class AsmError : public Error {
public:
    AsmError(int line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

class CorruptLogError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::CorruptLog; }
};

class ImageMismatchError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::ImageMismatch; }
};

class GuestLayoutError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const override { return ExitCode::GuestLayout; }
};

// The modeled counter cannot provide a trustworthy corrected count.
class UnusableCounter : public Error {
public:
    using Error::Error;
};

// Raised when a PMI is armed for a count that has already passed; always a
// replay-engine bug.
class PmiInPast : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ReplayModeError : public Error {
public:
    using Error::Error;
};

}  // namespace rvm
