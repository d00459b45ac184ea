#pragma once

#include <stdexcept>
#include <string>

namespace stylebank {

enum class ErrorCode {
    InvalidArgument,
    ShapeMismatch,
    UnknownStyle,
    DuplicateStyle,
    InvalidMask,
    Numeric,
    State,
    Format,
    Io,
};

const char* to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries a category so callers (CLI exit
/// codes, HTTP status mapping) can react without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) fail(code, message);
}

} // namespace stylebank
