#pragma once

#include <stdexcept>
#include <string>

namespace ctxar {

// Error categories surfaced on the command line as `error: <code>: <message>`.
enum class ErrorCode {
    usage,
    config,
    shape,
    contract,
    range,
    numeric,
    io,
    format,
    fingerprint,
    data,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace ctxar
