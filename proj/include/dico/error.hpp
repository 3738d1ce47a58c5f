#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dico {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dimension/shape mismatches between operands.
struct ShapeError : Error {
    using Error::Error;
};

/// Non-finite inputs where finiteness is required, NaN losses.
struct NumericError : Error {
    using Error::Error;
};

/// Graph misuse: non-scalar loss, backward re-entry.
struct GraphError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct CheckpointError : Error {
    using Error::Error;
};

/// Raised by verification oracles, e.g. a non-deterministic objective.
struct OracleError : Error {
    using Error::Error;
};

namespace detail {

inline void cat_into(std::ostringstream&) {}

template <typename A, typename... Rest>
void cat_into(std::ostringstream& oss, const A& a, const Rest&... rest) {
    oss << a;
    cat_into(oss, rest...);
}

} // namespace detail

template <typename... Args>
std::string cat(const Args&... args) {
    std::ostringstream oss;
    detail::cat_into(oss, args...);
    return oss.str();
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream oss;
    oss << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << ',';
        oss << shape[i];
    }
    oss << ']';
    return oss.str();
}

} // namespace dico
