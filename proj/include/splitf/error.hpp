#pragma once

#include <stdexcept>
#include <string>

namespace splitf {

// Error taxonomy shared across modules. The category travels with the
// exception so the CLI and the wire layer can report "<category>: <msg>".
enum class ErrorKind {
    config,
    input,
    protocol,
    transport,
    capacity,
    session,
    numeric,
    training,
    decomposition,
    internal,
};

const char* to_string(ErrorKind kind);

class SplitError : public std::runtime_error {
public:
    SplitError(ErrorKind kind, const std::string& msg)
        : std::runtime_error(std::string(to_string(kind)) + ": " + msg), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::input: return "input";
        case ErrorKind::protocol: return "protocol";
        case ErrorKind::transport: return "transport";
        case ErrorKind::capacity: return "capacity";
        case ErrorKind::session: return "session";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::training: return "training";
        case ErrorKind::decomposition: return "decomposition";
        case ErrorKind::internal: return "internal";
    }
    return "unknown";
}

} // namespace splitf
