#ifndef GRACE_ERRORS_HPP
#define GRACE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace grace {

// Error taxonomy mirrors the CLI exit codes: usage -> 1, data -> 2, numeric -> 3.
// Contract errors are programmer mistakes (bad shapes, misuse of an API) and
// map to the numeric/data codes where they surface.
enum class ErrorKind { usage, data, numeric, contract };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline Error usage_error(const std::string& msg) { return Error(ErrorKind::usage, msg); }
inline Error data_error(const std::string& msg) { return Error(ErrorKind::data, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorKind::numeric, msg); }
inline Error contract_error(const std::string& msg) { return Error(ErrorKind::contract, msg); }

}  // namespace grace

#endif
