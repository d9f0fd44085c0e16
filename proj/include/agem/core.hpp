#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace agem {

#ifdef AGEM_USE_FLOAT
using real = float;
#else
using real = double;
#endif

/// Shape or dimension contract violated by the caller.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// NaN/Inf produced, solver failure, or a degenerate numerical case.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing records, unknown ids, or inputs too small for the request.
class DataError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or unsupported file content.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require_shape(bool cond, std::string_view what) {
    if (!cond) throw ShapeError(std::string(what));
}

inline void check_finite(std::span<const real> values, std::string_view op) {
    for (real v : values) {
        if (!std::isfinite(v)) {
            throw NumericalError("non-finite value produced by " + std::string(op));
        }
    }
}

} // namespace agem
